#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "spex/pattern.hpp"
#include "spex/rng.hpp"

namespace spex {

// Learned attention distributions, one CSR per layer. Rows sum to one.
struct ScoreLayer {
  Csr csr;
  std::vector<float> scores;     // parallel to csr.col_idx
  std::vector<EdgeType> types;   // parallel to csr.col_idx; empty if unknown

  std::span<const float> row_scores(std::size_t i) const noexcept {
    return {scores.data() + csr.row_ptr[i], csr.degree(i)};
  }
};

struct ScoreSet {
  std::vector<ScoreLayer> layers;
  std::size_t estimator_width = 0;
  std::int64_t best_epoch = -1;

  std::size_t num_layers() const noexcept { return layers.size(); }
  std::size_t num_nodes() const noexcept {
    return layers.empty() ? 0 : layers.front().csr.num_rows();
  }
  // Nonnegative scores, rows summing to one within tol, types aligned.
  void validate(double tol = 1e-5) const;
};

// Uniform rows over the support of every layer of `pattern`.
ScoreSet uniform_scores(const AttentionPattern& pattern);
// Same support as `scores`, uniform weights.
ScoreSet uniformized(const ScoreSet& scores);
// Copies edge types from the pattern; supports must be contained in it.
void attach_types(ScoreSet& scores, const AttentionPattern& pattern);

// Text: per layer a header "layer l n nnz" then nnz lines "i j score" with six
// significant digits. Layers are numbered from 1.
void save_scores_text(const ScoreSet& scores, const std::filesystem::path& path);
ScoreSet load_scores_text(const std::filesystem::path& path);
// Binary mirror of the CSR arrays (magic "SPXS").
void save_scores_binary(const ScoreSet& scores, const std::filesystem::path& path);
ScoreSet load_scores_binary(const std::filesystem::path& path);

struct SampleStats {
  std::size_t uniform_fallbacks = 0;
  std::size_t prefilter_flagged = 0;
};

// Weighted sampling without replacement of k positions from one score row:
// keys log(u_i) / a_i with u_i ~ U(0, 1), keep the k largest. Zero scores get
// key -inf. Returns positions in increasing order; all positions when k >= row
// length. A row of all zeros falls back to uniform sampling.
std::vector<std::uint32_t> reservoir_sample(std::span<const float> scores, std::size_t k, Rng& rng,
                                            SampleStats* stats = nullptr);

// The k highest-scoring positions (ties: lower position), increasing order.
std::vector<std::uint32_t> top_k_positions(std::span<const float> scores, std::size_t k);

struct Prefiltered {
  std::vector<std::uint32_t> kept;  // positions, increasing
  double dropped_mass = 0.0;
  bool flagged = false;  // tail mass exceeded tail_eps; full row kept
};

// Keeps the top k_prime scores when the dropped tail mass is at most tail_eps.
Prefiltered prefilter_topk(std::span<const float> scores, std::size_t k_prime, double tail_eps);

enum class SamplingPolicy : std::uint8_t {
  kReservoir,  // weighted sampling by score
  kTopScore,   // deterministic top-deg selection
};

struct SamplerOptions {
  SamplingPolicy policy = SamplingPolicy::kReservoir;
  std::size_t k_prime = 0;  // 0: 4 * max(degs)
  double tail_eps = 0.05;
};

// Identifies the random stream of one batch; each query node draws from its
// own sub-stream derived from (seed, epoch, batch, layer, node).
struct StreamKey {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  std::uint64_t batch = 0;
};

// One attention layer of a batch. nodes = V^(l); its first num_queries entries
// are Q^(l) = V^(l+1). Key slots are num_queries x degree, row-major; padded
// slots point at the query's own row with mask 0 and type SELF_LOOP.
struct LayerPlan {
  std::vector<NodeId> nodes;
  std::size_t num_queries = 0;
  std::size_t degree = 0;
  std::vector<std::uint32_t> key_local;
  std::vector<std::uint32_t> key_type;
  std::vector<float> mask;

  std::size_t num_real_keys() const;
};

struct BatchPlan {
  std::vector<NodeId> seeds;
  std::vector<LayerPlan> layers;  // layers[0] is the first attention layer

  const std::vector<NodeId>& input_nodes() const { return layers.front().nodes; }
};

// Backward neighborhood expansion from the seed batch: V^(L+1) = seeds, and for
// l = L..1, Q^(l) = V^(l+1), K_i^(l) sampled from node i's score row with
// deg_l slots, V^(l) = Q^(l) u K^(l).
BatchPlan sample_batch(std::span<const NodeId> seeds, const ScoreSet& scores,
                       std::span<const std::size_t> degs, const SamplerOptions& options,
                       const StreamKey& key, SampleStats* stats = nullptr);

// Shuffled partition of the training nodes into batches for one epoch.
std::vector<std::vector<NodeId>> epoch_batches(std::span<const NodeId> train_nodes,
                                               std::size_t batch_size, std::uint64_t seed,
                                               std::uint64_t epoch);

// Fresh plans for every batch of an epoch.
std::vector<BatchPlan> resample_epoch(const ScoreSet& scores, std::span<const std::size_t> degs,
                                      std::span<const NodeId> train_nodes, std::size_t batch_size,
                                      const SamplerOptions& options, std::uint64_t seed,
                                      std::uint64_t epoch, SampleStats* stats = nullptr);

}  // namespace spex
