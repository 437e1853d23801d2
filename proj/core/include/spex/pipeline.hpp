#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spex/attention.hpp"
#include "spex/graph.hpp"
#include "spex/optim.hpp"
#include "spex/pattern.hpp"
#include "spex/sampler.hpp"

namespace spex {

enum class Phase : std::uint8_t { kEstimator, kFinal };

enum class Ablation : std::uint8_t {
  kNone,
  kUniform,  // uniform scores over the same support
  kMax,      // top-deg selection instead of sampling
  kNoTemp,   // estimator trained at temperature 1
  kNoVnorm,  // estimator trained without V normalization
};

const char* to_string(Phase p) noexcept;
const char* to_string(Ablation a) noexcept;
Ablation ablation_from_string(const std::string& s);

struct TrainConfig {
  Phase phase = Phase::kEstimator;
  std::size_t width = 4;
  std::size_t heads = 1;
  std::size_t layers = 2;
  std::size_t epochs = 100;
  double lr = 1e-2;
  double weight_decay = 1e-3;
  double dropout = 0.0;
  std::size_t warmup_epochs = 0;
  TemperatureSchedule temperature;
  std::vector<std::size_t> degs;  // final only, one per layer
  std::size_t batch_size = 0;     // 0: every training node in one batch
  std::uint64_t seed = 0;
  Ablation ablation = Ablation::kNone;
  std::optional<NormKind> norm;   // default: layer (estimator), batch (final)
  // Final phase: run every batch through the full pattern instead of sampled
  // plans, with the same batches, initialization and schedule.
  bool full_graph_reference = false;
  bool double_precision = false;
  // Build the next batch plan on a worker thread (queue capacity 2).
  bool prefetch = false;
  SamplerOptions sampler;

  static TrainConfig estimator_defaults();
  static TrainConfig final_defaults();

  NormKind resolved_norm() const;
  bool anneals() const;
  bool normalizes_v() const;
  void validate() const;
  ModelConfig model_config(const Graph& g) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_metric = 0.0;
  double temperature = 1.0;
  double lr = 0.0;
};

struct TrainResult {
  ModelConfig model;
  ParamStore<float> params;  // best-validation checkpoint
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0: initialization (no epochs run)
  double best_val_metric = 0.0;
  double best_val_loss = 0.0;
  double best_temperature = 1.0;
  double test_metric = 0.0;
  ScoreSet scores;  // estimator phase: scores at the best epoch
  SampleStats sample_stats;
};

// Full-pattern training of the narrow network with V normalization and
// temperature annealing; scores come from a clean forward pass of the best
// checkpoint at that epoch's temperature.
TrainResult train_estimator(const Graph& g, const AttentionPattern& pattern,
                            const TrainConfig& config);

// Wide network on per-epoch resampled fixed-degree plans.
TrainResult train_final(const Graph& g, const ScoreSet& scores, const TrainConfig& config);

// Head-averaged attention of every layer over the full pattern.
ScoreSet extract_scores(Network<float>& net, const Graph& g, const AttentionPattern& pattern,
                        double temperature);

// The attention pattern spanned by a score set's support.
AttentionPattern pattern_from_scores(const ScoreSet& scores);

// Scores the final network samples from under an ablation.
ScoreSet effective_scores(const ScoreSet& scores, Ablation ablation);

struct Prediction {
  std::vector<NodeId> nodes;
  Tensor<float> logits;  // mean over samples
  Tensor<float> probs;   // mean class / label probabilities over samples
};

struct PredictOptions {
  std::size_t batch_size = 1;
  std::size_t samples = 1;
  std::uint64_t seed = 0;
  SamplerOptions sampler;
};

// Builds plans for the requested nodes in batches and runs the network in
// inference mode. Each node's sample stream depends only on (seed, sample,
// layer, node), so results do not depend on the batch size.
Prediction predict(const ModelConfig& model, const ParamStore<float>& params, const Graph& g,
                   const ScoreSet& scores, const std::vector<std::size_t>& degs,
                   const std::vector<NodeId>& nodes, const PredictOptions& options);

// Accuracy of the predictions against the graph labels (per-label accuracy
// for multilabel tasks).
double accuracy(const Graph& g, const Prediction& p);

// Average fraction of augmented edges kept per layer:
// sum_l sum_i min(deg_l, |row_i|) / (L * m_aug).
double edge_percent(const ScoreSet& scores, const std::vector<std::size_t>& degs,
                    std::size_t m_aug);

// config.json, history.csv, scores/, ckpt/, metrics.json.
void write_run(const std::filesystem::path& dir, const TrainConfig& config,
               const TrainResult& result, const nlohmann::json& extra_metrics = {});

nlohmann::json model_to_json(const ModelConfig& m);
ModelConfig model_from_json(const nlohmann::json& j);

// Largest row of every layer.
std::vector<std::size_t> max_degrees(const ScoreSet& scores);

}  // namespace spex
