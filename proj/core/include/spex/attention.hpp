#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "spex/autodiff.hpp"
#include "spex/optim.hpp"
#include "spex/pattern.hpp"
#include "spex/sampler.hpp"

namespace spex {

struct TemperatureSchedule {
  double lambda = 5.0;
  double gamma = 0.99;
  double floor = 0.05;

  void validate() const;
};

// 1 for t <= lambda, max(gamma^(t - lambda), floor) afterwards.
double temperature_at(const TemperatureSchedule& sched, double epoch);

// Each row r -> s * r / max(||r||, eps).
template <typename T>
Tensor<T> normalize_v(const Tensor<T>& v, T s, T eps);

enum class NormKind : std::uint8_t { kLayer, kBatch, kNone };

const char* to_string(NormKind k) noexcept;
NormKind norm_from_string(const std::string& s);

struct ModelConfig {
  std::size_t in_dim = 0;
  std::size_t width = 4;
  std::size_t heads = 1;
  std::size_t layers = 2;
  std::size_t out_dim = 2;
  std::size_t ffn_mult = 2;
  NormKind norm = NormKind::kLayer;
  bool normalize_v = true;
  double clip = 8.0;
  double dropout = 0.0;
  double v_eps = 1e-6;
  double norm_eps = 1e-5;
  double bn_momentum = 0.1;

  std::size_t head_dim() const noexcept { return width / heads; }
  void validate() const;
};

struct ForwardOptions {
  double temperature = 1.0;
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

// Scores per layer, head-averaged. Full route: aligned with the pattern
// layer's col_idx. Plan route: aligned with the plan's key slots (padding 0).
template <typename T>
struct ForwardResult {
  ad::Var<T> logits;
  std::vector<std::vector<float>> scores;
};

// Input embedding, L attention + feed-forward blocks, linear head. Rows are
// nodes: H is (rows x width) and every weight multiplies from the right.
template <typename T>
class Network {
 public:
  // Parameter leaves of one tape, aligned with params().entries().
  struct Bound {
    std::vector<ad::Var<T>> vars;
  };

  Network(ModelConfig config, std::uint64_t init_seed);
  Network(ModelConfig config, ParamStore<T> params);

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }

  Bound bind(ad::Tape<T>& tape) const;
  // Gradients of the trainable parameters after tape.backward(); empty
  // tensors for buffers.
  std::vector<Tensor<T>> gradients(const ad::Tape<T>& tape, const Bound& bound) const;

  // Every node attends over its full pattern row. features is (n x in_dim).
  ForwardResult<T> forward_full(ad::Tape<T>& tape, const Bound& bound, const Tensor<T>& features,
                                const AttentionPattern& pattern, const ForwardOptions& options);

  // Fixed-degree batched attention over a sampled plan. Logits rows follow
  // plan.seeds.
  ForwardResult<T> forward_plan(ad::Tape<T>& tape, const Bound& bound, const Tensor<T>& features,
                                const BatchPlan& plan, const ForwardOptions& options);

  template <typename U>
  Network<U> cast() const {
    return Network<U>(config_, params_.template cast<U>());
  }

 private:
  struct LayerVars;
  LayerVars layer_vars(const Bound& bound, std::size_t l) const;
  ad::Var<T> norm(ad::Tape<T>& tape, const Bound& bound, std::size_t l, int which, ad::Var<T> x,
                  bool training);
  ad::Var<T> block_tail(ad::Tape<T>& tape, const Bound& bound, std::size_t l, ad::Var<T> hq,
                        ad::Var<T> attn, const ForwardOptions& options);
  ad::Var<T> dropout(ad::Tape<T>& tape, ad::Var<T> x, const ForwardOptions& options,
                     std::size_t l, std::uint64_t site);

  ModelConfig config_;
  ParamStore<T> params_;
};

// Features of `nodes` (or all nodes) as a tensor.
template <typename T>
Tensor<T> feature_matrix(const Graph& g);
template <typename T>
Tensor<T> feature_rows(const Graph& g, std::span<const NodeId> nodes);

}  // namespace spex
