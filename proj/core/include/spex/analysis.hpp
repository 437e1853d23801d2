#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "spex/pattern.hpp"
#include "spex/pipeline.hpp"
#include "spex/rng.hpp"
#include "spex/sampler.hpp"
#include "spex/tensor.hpp"

namespace spex {

using Sample = std::vector<double>;

// Unbiased U-statistic of 2E|X-Y| - E|X-X'| - E|Y-Y'| with Euclidean norms.
// Exactly symmetric in its arguments. Needs >= 2 samples on each side.
double energy_distance(const std::vector<Sample>& xs, const std::vector<Sample>& ys);

// ---- consistency study -------------------------------------------------------------------

// Energy distances per (source, layer, node) against the reference runs.
struct ConsistencyReport {
  std::vector<std::string> sources;  // "w<width>", "uniform", "random"
  // distances[s][layer][node]
  std::vector<std::vector<std::vector<double>>> distances;

  std::size_t source_index(const std::string& name) const;
  double layer_mean(std::size_t source, std::size_t layer) const;
  double pooled_mean(std::size_t source) const;
  // Fraction of (layer, node) cells where source a is strictly below b.
  double fraction_below(std::size_t a, std::size_t b) const;
};

struct ConsistencyOptions {
  std::size_t reference_width = 32;
  std::size_t random_samples = 10;  // draws for the random-logit baseline
  double random_logit_range = 8.0;
  std::uint64_t seed = 0;
};

// runs[w] holds the score sets of every run at width w; all must share the
// same support. The reference entry is compared against itself split into
// two disjoint halves.
ConsistencyReport consistency_from_runs(const std::map<std::size_t, std::vector<ScoreSet>>& runs,
                                        const ConsistencyOptions& options);

struct ConsistencyConfig {
  std::vector<std::size_t> widths{4, 8, 16, 32};
  std::size_t runs_per_width = 10;
  TrainConfig base = TrainConfig::estimator_defaults();
  ConsistencyOptions options;
};

// Trains runs_per_width estimators per width (seeds derived from base.seed)
// and compares their scores.
ConsistencyReport consistency_study(const Graph& g, const AttentionPattern& pattern,
                                    const ConsistencyConfig& config,
                                    std::map<std::size_t, std::vector<ScoreSet>>* runs_out = nullptr);

// ---- score statistics --------------------------------------------------------------------

// Natural-log Shannon entropy with 0 log 0 = 0.
double row_entropy(std::span<const float> row);
// Mean row entropy per layer.
std::vector<double> attention_entropy(const ScoreSet& scores);

struct TopkStat {
  std::size_t k = 0;
  double mean = 0.0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
};

double topk_row_mass(std::span<const float> row, std::size_t k);
// result[layer][k - 1] for k = 1..k_max.
std::vector<std::vector<TopkStat>> topk_mass(const ScoreSet& scores, std::size_t k_max);

using TypeMass = std::array<double, kNumEdgeTypes>;

// Score mass of one node's row per edge type.
TypeMass node_type_mass(const ScoreSet& scores, const AttentionPattern& pattern, std::size_t layer,
                        std::size_t node);

struct EdgeTypeAttribution {
  std::vector<TypeMass> per_layer;  // mean over nodes
  TypeMass overall{};               // mean over layers and nodes
};

EdgeTypeAttribution edge_type_attribution(const ScoreSet& scores, const AttentionPattern& pattern);

// Mean over nodes of the energy distance between the runs' layer-a rows and
// layer-b rows.
double inter_layer_distance(const std::vector<ScoreSet>& runs, std::size_t layer_a,
                            std::size_t layer_b);

// ---- theory checks -----------------------------------------------------------------------

// max over pattern edges of |a_hat / a - 1|, where a are softmax scores of
// <q_i, k_j> over each row and a_hat the same with Q, K multiplied by the
// projection (rows of Q, K are points in R^D; projection is d x D).
double jlt_deviation(const Tensor<double>& q, const Tensor<double>& k, const Csr& pattern,
                     const Tensor<double>& projection);

// d x D matrix with independent entries +-1/sqrt(d).
Tensor<double> sign_projection(std::size_t d, std::size_t big_d, Rng& rng);

// One deviation per trial, each with a fresh sign projection.
std::vector<double> jlt_compress_check(const Tensor<double>& q, const Tensor<double>& k,
                                       const Csr& pattern, std::size_t d, std::size_t trials,
                                       std::uint64_t seed);

// Sparse matrix with explicit values on a CSR support.
struct SparseMatrix {
  Csr csr;
  std::vector<double> values;

  Tensor<double> dense() const;
};

// Largest singular value by power iteration on M^T M.
double spectral_norm(const Tensor<double>& m, double tolerance = 1e-6,
                     std::size_t max_iterations = 100000);

struct SampledMatrix {
  SparseMatrix b;
  double relative_error = 0.0;  // ||A - B||_2 / ||A||_2
};

// Draws s entries with probability p_ij = |A_ij| / n (rows of A sum to 1),
// each contributing A_ij / (p_ij s). Returns B and its relative error.
SampledMatrix spectral_sample_check(const SparseMatrix& a, std::size_t s, Rng& rng);

// Same estimator with probabilities taken from a_prime (row-stochastic) while
// the rescaling uses the true values of a. Requires a_prime_ij >= a_ij / alpha
// on the support of a.
SampledMatrix noisy_sampling_check(const SparseMatrix& a, const SparseMatrix& a_prime, double alpha,
                                   std::size_t s, Rng& rng);

// Random row-stochastic matrix: row i holds `row_nnz` random columns (always
// including i) with softmax weights of uniform logits in [-spread, spread].
SparseMatrix random_score_matrix(std::size_t n, std::size_t row_nnz, double spread, Rng& rng);

// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace spex
