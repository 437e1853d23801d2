#include "spex/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "spex/error.hpp"

namespace spex {

namespace {

double distance(const Sample& a, const Sample& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return std::sqrt(s);
}

double within_mean(const std::vector<Sample>& xs) {
  double total = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double row = 0.0;
    for (std::size_t j = i + 1; j < xs.size(); ++j) row += distance(xs[i], xs[j]);
    total += row;
  }
  const double pairs = static_cast<double>(xs.size()) * static_cast<double>(xs.size() - 1) / 2.0;
  return total / pairs;
}

std::vector<Sample> row_samples(const std::vector<ScoreSet>& runs, std::size_t layer,
                                std::size_t node) {
  std::vector<Sample> out;
  out.reserve(runs.size());
  for (const auto& s : runs) {
    const auto row = s.layers.at(layer).row_scores(node);
    out.emplace_back(row.begin(), row.end());
  }
  return out;
}

}  // namespace

double energy_distance(const std::vector<Sample>& xs, const std::vector<Sample>& ys) {
  if (xs.size() < 2 || ys.size() < 2) throw ContractViolation("energy_distance needs >= 2 samples per side");
  const std::size_t dim = xs.front().size();
  for (const auto* set : {&xs, &ys}) {
    for (const auto& s : *set) {
      if (s.size() != dim) throw DimensionError("energy_distance: samples differ in dimension");
    }
  }
  // Fixed orientation so that swapping the arguments gives the same rounding.
  const bool swap = ys.size() < xs.size() || (ys.size() == xs.size() && ys < xs);
  const auto& a = swap ? ys : xs;
  const auto& b = swap ? xs : ys;
  double total = 0.0;
  for (const auto& x : a) {
    double row = 0.0;
    for (const auto& y : b) row += distance(x, y);
    total += row;
  }
  const double e = total / (static_cast<double>(xs.size()) * static_cast<double>(ys.size()));
  return 2.0 * e - (within_mean(xs) + within_mean(ys));
}

std::size_t ConsistencyReport::source_index(const std::string& name) const {
  const auto it = std::find(sources.begin(), sources.end(), name);
  if (it == sources.end()) throw ContractViolation("no consistency source " + name);
  return static_cast<std::size_t>(it - sources.begin());
}

double ConsistencyReport::layer_mean(std::size_t source, std::size_t layer) const {
  const auto& v = distances.at(source).at(layer);
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double ConsistencyReport::pooled_mean(std::size_t source) const {
  double s = 0.0;
  std::size_t count = 0;
  for (const auto& layer : distances.at(source)) {
    s += std::accumulate(layer.begin(), layer.end(), 0.0);
    count += layer.size();
  }
  return count == 0 ? 0.0 : s / static_cast<double>(count);
}

double ConsistencyReport::fraction_below(std::size_t a, std::size_t b) const {
  std::size_t below = 0, count = 0;
  for (std::size_t l = 0; l < distances.at(a).size(); ++l) {
    for (std::size_t i = 0; i < distances[a][l].size(); ++i) {
      below += distances[a][l][i] < distances.at(b)[l][i] ? 1 : 0;
      ++count;
    }
  }
  return count == 0 ? 0.0 : static_cast<double>(below) / static_cast<double>(count);
}

ConsistencyReport consistency_from_runs(const std::map<std::size_t, std::vector<ScoreSet>>& runs,
                                        const ConsistencyOptions& options) {
  const auto ref_it = runs.find(options.reference_width);
  if (ref_it == runs.end()) throw ConfigError("reference width has no runs");
  const auto& ref = ref_it->second;
  if (ref.size() < 4) throw ConfigError("the reference width needs at least four runs");
  if (options.random_samples < 2) throw ConfigError("random baseline needs >= 2 samples");
  const std::size_t layers = ref.front().num_layers(), n = ref.front().num_nodes();
  for (const auto& [w, list] : runs) {
    if (list.size() < 2) throw ConfigError("every width needs at least two runs");
    for (const auto& s : list) {
      if (s.num_layers() != layers || s.num_nodes() != n) {
        throw DimensionError("score sets differ in layers or nodes");
      }
      for (std::size_t l = 0; l < layers; ++l) {
        if (!(s.layers[l].csr == ref.front().layers[l].csr)) {
          throw DimensionError("score sets differ in support");
        }
      }
    }
  }
  const std::vector<ScoreSet> half_a(ref.begin(), ref.begin() + static_cast<std::ptrdiff_t>(ref.size() / 2));
  const std::vector<ScoreSet> half_b(ref.begin() + static_cast<std::ptrdiff_t>(ref.size() / 2), ref.end());

  ConsistencyReport report;
  for (const auto& [w, list] : runs) report.sources.push_back("w" + std::to_string(w));
  report.sources.push_back("uniform");
  report.sources.push_back("random");
  report.distances.assign(report.sources.size(),
                          std::vector<std::vector<double>>(layers, std::vector<double>(n)));

  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto ys = row_samples(ref, l, i);
      std::size_t s = 0;
      for (const auto& [w, list] : runs) {
        report.distances[s][l][i] = w == options.reference_width
                                        ? energy_distance(row_samples(half_a, l, i), row_samples(half_b, l, i))
                                        : energy_distance(row_samples(list, l, i), ys);
        ++s;
      }
      const std::size_t deg = ys.front().size();
      const std::vector<Sample> uniform(2, Sample(deg, 1.0 / static_cast<double>(deg)));
      report.distances[s++][l][i] = energy_distance(uniform, ys);

      Rng rng(derive_seed(options.seed, {0x7a4d, l, i}));
      std::vector<Sample> random(options.random_samples, Sample(deg));
      for (auto& row : random) {
        double top = -std::numeric_limits<double>::infinity();
        for (auto& z : row) {
          z = rng.uniform(-options.random_logit_range, options.random_logit_range);
          top = std::max(top, z);
        }
        double total = 0.0;
        for (auto& z : row) {
          z = std::exp(z - top);
          total += z;
        }
        for (auto& z : row) z /= total;
      }
      report.distances[s][l][i] = energy_distance(random, ys);
    }
  }
  return report;
}

ConsistencyReport consistency_study(const Graph& g, const AttentionPattern& pattern,
                                    const ConsistencyConfig& config,
                                    std::map<std::size_t, std::vector<ScoreSet>>* runs_out) {
  if (std::find(config.widths.begin(), config.widths.end(), config.options.reference_width) ==
      config.widths.end()) {
    throw ConfigError("reference width must be one of the studied widths");
  }
  std::map<std::size_t, std::vector<ScoreSet>> runs;
  for (std::size_t w : config.widths) {
    for (std::size_t r = 0; r < config.runs_per_width; ++r) {
      TrainConfig cfg = config.base;
      cfg.width = w;
      cfg.seed = derive_seed(config.base.seed, {w, r});
      runs[w].push_back(train_estimator(g, pattern, cfg).scores);
    }
  }
  auto report = consistency_from_runs(runs, config.options);
  if (runs_out) *runs_out = std::move(runs);
  return report;
}

double row_entropy(std::span<const float> row) {
  double h = 0.0;
  for (float a : row) {
    if (a > 0.0f) h -= static_cast<double>(a) * std::log(static_cast<double>(a));
  }
  return h;
}

std::vector<double> attention_entropy(const ScoreSet& scores) {
  std::vector<double> out;
  for (const auto& layer : scores.layers) {
    const std::size_t n = layer.csr.num_rows();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += row_entropy(layer.row_scores(i));
    out.push_back(n == 0 ? 0.0 : s / static_cast<double>(n));
  }
  return out;
}

double topk_row_mass(std::span<const float> row, std::size_t k) {
  std::vector<double> v(row.begin(), row.end());
  std::sort(v.begin(), v.end(), std::greater<>());
  double s = 0.0;
  for (std::size_t r = 0; r < std::min(k, v.size()); ++r) s += v[r];
  return s;
}

namespace {

// Linear interpolation between order statistics.
double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  if (v.empty()) return 0.0;
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

std::vector<std::vector<TopkStat>> topk_mass(const ScoreSet& scores, std::size_t k_max) {
  std::vector<std::vector<TopkStat>> out;
  for (const auto& layer : scores.layers) {
    const std::size_t n = layer.csr.num_rows();
    std::vector<std::vector<double>> sorted(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = layer.row_scores(i);
      sorted[i].assign(row.begin(), row.end());
      std::sort(sorted[i].begin(), sorted[i].end(), std::greater<>());
    }
    std::vector<TopkStat> stats;
    std::vector<double> mass(n, 0.0);
    for (std::size_t k = 1; k <= k_max; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        if (k <= sorted[i].size()) mass[i] += sorted[i][k - 1];
      }
      TopkStat st;
      st.k = k;
      st.mean = n == 0 ? 0.0 : std::accumulate(mass.begin(), mass.end(), 0.0) / static_cast<double>(n);
      st.median = quantile(mass, 0.5);
      st.q1 = quantile(mass, 0.25);
      st.q3 = quantile(mass, 0.75);
      stats.push_back(st);
    }
    out.push_back(std::move(stats));
  }
  return out;
}

TypeMass node_type_mass(const ScoreSet& scores, const AttentionPattern& pattern, std::size_t layer,
                        std::size_t node) {
  const ScoreLayer& sl = scores.layers.at(layer);
  const LayerPattern& p = pattern.layer(layer);
  TypeMass m{};
  for (std::size_t e = sl.csr.row_ptr[node]; e < sl.csr.row_ptr[node + 1]; ++e) {
    const std::size_t pos = p.csr.find(node, sl.csr.col_idx[e]);
    if (pos == Csr::npos) throw ContractViolation("score edge outside the attention pattern");
    m[static_cast<std::size_t>(p.types[pos])] += sl.scores[e];
  }
  return m;
}

EdgeTypeAttribution edge_type_attribution(const ScoreSet& scores, const AttentionPattern& pattern) {
  if (scores.num_layers() != pattern.num_layers()) throw DimensionError("layer count mismatch");
  EdgeTypeAttribution out;
  for (std::size_t l = 0; l < scores.num_layers(); ++l) {
    TypeMass acc{};
    const std::size_t n = scores.num_nodes();
    for (std::size_t i = 0; i < n; ++i) {
      const TypeMass m = node_type_mass(scores, pattern, l, i);
      for (std::size_t t = 0; t < kNumEdgeTypes; ++t) acc[t] += m[t];
    }
    for (auto& a : acc) a /= static_cast<double>(n);
    out.per_layer.push_back(acc);
    for (std::size_t t = 0; t < kNumEdgeTypes; ++t) {
      out.overall[t] += acc[t] / static_cast<double>(scores.num_layers());
    }
  }
  return out;
}

double inter_layer_distance(const std::vector<ScoreSet>& runs, std::size_t layer_a,
                            std::size_t layer_b) {
  if (runs.empty()) throw ContractViolation("no runs");
  const std::size_t n = runs.front().num_nodes();
  for (const auto& s : runs) {
    if (!(s.layers.at(layer_a).csr == s.layers.at(layer_b).csr)) {
      throw DimensionError("layers differ in support");
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += energy_distance(row_samples(runs, layer_a, i), row_samples(runs, layer_b, i));
  }
  return total / static_cast<double>(n);
}

// ---- JLT ---------------------------------------------------------------------------------

namespace {

// Softmax of <q_i, k_j> over the pattern row of each i, flattened by edge.
std::vector<double> pattern_softmax(const Tensor<double>& q, const Tensor<double>& k,
                                    const Csr& pattern) {
  const std::size_t dim = q.dim(1);
  std::vector<double> out(pattern.num_edges());
  for (std::size_t i = 0; i < pattern.num_rows(); ++i) {
    const std::size_t b = pattern.row_ptr[i], e = pattern.row_ptr[i + 1];
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t p = b; p < e; ++p) {
      double dot = 0.0;
      const std::size_t j = pattern.col_idx[p];
      for (std::size_t c = 0; c < dim; ++c) dot += q(i, c) * k(j, c);
      out[p] = dot;
      top = std::max(top, dot);
    }
    double total = 0.0;
    for (std::size_t p = b; p < e; ++p) {
      out[p] = std::exp(out[p] - top);
      total += out[p];
    }
    for (std::size_t p = b; p < e; ++p) out[p] /= total;
  }
  return out;
}

// Rows of x mapped through the projection: (n x D) -> (n x d).
Tensor<double> project_rows(const Tensor<double>& x, const Tensor<double>& m) {
  return matmul(x, transpose(m));
}

}  // namespace

double jlt_deviation(const Tensor<double>& q, const Tensor<double>& k, const Csr& pattern,
                     const Tensor<double>& projection) {
  if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1) || projection.dim(1) != q.dim(1)) {
    throw DimensionError("jlt: Q, K and projection dimensions disagree");
  }
  if (pattern.num_rows() != q.dim(0)) throw DimensionError("jlt: pattern does not match Q");
  const auto a = pattern_softmax(q, k, pattern);
  const auto a_hat = pattern_softmax(project_rows(q, projection), project_rows(k, projection), pattern);
  double worst = 0.0;
  for (std::size_t e = 0; e < a.size(); ++e) worst = std::max(worst, std::abs(a_hat[e] / a[e] - 1.0));
  return worst;
}

Tensor<double> sign_projection(std::size_t d, std::size_t big_d, Rng& rng) {
  Tensor<double> m(Shape{d, big_d});
  const double v = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& x : m.values()) x = (rng.next_u64() >> 63) != 0 ? v : -v;
  return m;
}

std::vector<double> jlt_compress_check(const Tensor<double>& q, const Tensor<double>& k,
                                       const Csr& pattern, std::size_t d, std::size_t trials,
                                       std::uint64_t seed) {
  if (d == 0 || d > q.dim(1)) throw ContractViolation("jlt: need 1 <= d <= D");
  std::vector<double> out;
  out.reserve(trials);
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, {d, t}));
    out.push_back(jlt_deviation(q, k, pattern, sign_projection(d, q.dim(1), rng)));
  }
  return out;
}

// ---- entry sampling --------------------------------------------------------------------------

Tensor<double> SparseMatrix::dense() const {
  const std::size_t n = csr.num_rows();
  Tensor<double> m(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t e = csr.row_ptr[i]; e < csr.row_ptr[i + 1]; ++e) m(i, csr.col_idx[e]) = values[e];
  }
  return m;
}

double spectral_norm(const Tensor<double>& m, double tolerance, std::size_t max_iterations) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  std::vector<double> v(cols), mv(rows), w(cols);
  for (std::size_t j = 0; j < cols; ++j) v[j] = 1.0 + 0.01 * static_cast<double>(j % 7);
  double nv = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
  for (auto& x : v) x /= nv;
  double lambda = 0.0;
  for (std::size_t it = 0; it < max_iterations; ++it) {
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j) s += m(i, j) * v[j];
      mv[i] = s;
    }
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) w[j] += m(i, j) * mv[i];
    }
    const double next = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
    if (next == 0.0) return 0.0;
    for (std::size_t j = 0; j < cols; ++j) v[j] = w[j] / next;
    const bool done = std::abs(next - lambda) <= tolerance * next;
    lambda = next;
    if (done) break;
  }
  return std::sqrt(lambda);
}

namespace {

SampledMatrix sample_entries(const SparseMatrix& a, const SparseMatrix& probs_from, std::size_t s,
                             Rng& rng) {
  if (s == 0) throw ContractViolation("need at least one sample");
  const std::size_t n = a.csr.num_rows();
  const auto nd = static_cast<double>(n);
  // p_ij = A'_ij / n over the support of A'.
  std::vector<double> cdf(probs_from.values.size());
  double run = 0.0;
  for (std::size_t e = 0; e < cdf.size(); ++e) {
    run += std::abs(probs_from.values[e]) / nd;
    cdf[e] = run;
  }
  std::vector<std::uint64_t> counts(cdf.size(), 0);
  for (std::size_t t = 0; t < s; ++t) {
    const double u = rng.uniform(0.0, run);
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) --it;
    ++counts[static_cast<std::size_t>(it - cdf.begin())];
  }
  SampledMatrix out;
  out.b.csr.row_ptr.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t e = probs_from.csr.row_ptr[i]; e < probs_from.csr.row_ptr[i + 1]; ++e) {
      if (counts[e] == 0) continue;
      const NodeId j = probs_from.csr.col_idx[e];
      const std::size_t pos = a.csr.find(i, j);
      const double aij = pos == Csr::npos ? 0.0 : a.values[pos];
      if (aij == 0.0) continue;
      const double p = std::abs(probs_from.values[e]) / nd;
      out.b.csr.col_idx.push_back(j);
      out.b.values.push_back(static_cast<double>(counts[e]) * aij / (p * static_cast<double>(s)));
    }
    out.b.csr.row_ptr[i + 1] = out.b.csr.col_idx.size();
  }
  const Tensor<double> ad = a.dense();
  Tensor<double> diff = ad;
  const Tensor<double> bd = out.b.dense();
  for (std::size_t k = 0; k < diff.size(); ++k) diff[k] -= bd[k];
  out.relative_error = spectral_norm(diff) / spectral_norm(ad);
  return out;
}

void check_row_stochastic(const SparseMatrix& m, const char* what) {
  if (m.values.size() != m.csr.num_edges()) throw DimensionError(std::string(what) + ": value count");
  for (std::size_t i = 0; i < m.csr.num_rows(); ++i) {
    double s = 0.0;
    for (std::size_t e = m.csr.row_ptr[i]; e < m.csr.row_ptr[i + 1]; ++e) s += std::abs(m.values[e]);
    if (std::abs(s - 1.0) > 1e-6) {
      throw ContractViolation(std::string(what) + ": row " + std::to_string(i) + " does not sum to 1");
    }
  }
}

}  // namespace

SampledMatrix spectral_sample_check(const SparseMatrix& a, std::size_t s, Rng& rng) {
  check_row_stochastic(a, "spectral_sample_check");
  return sample_entries(a, a, s, rng);
}

SampledMatrix noisy_sampling_check(const SparseMatrix& a, const SparseMatrix& a_prime, double alpha,
                                   std::size_t s, Rng& rng) {
  check_row_stochastic(a, "noisy_sampling_check");
  check_row_stochastic(a_prime, "noisy_sampling_check");
  if (a.csr.num_rows() != a_prime.csr.num_rows()) throw DimensionError("matrix sizes differ");
  if (!(alpha >= 1.0)) throw ContractViolation("alpha must be >= 1");
  for (std::size_t i = 0; i < a.csr.num_rows(); ++i) {
    for (std::size_t e = a.csr.row_ptr[i]; e < a.csr.row_ptr[i + 1]; ++e) {
      if (a.values[e] == 0.0) continue;
      const std::size_t pos = a_prime.csr.find(i, a.csr.col_idx[e]);
      const double ap = pos == Csr::npos ? 0.0 : a_prime.values[pos];
      if (ap * alpha < std::abs(a.values[e]) * (1.0 - 1e-12)) {
        throw ContractViolation("a_prime underestimates a by more than alpha at (" +
                                std::to_string(i) + ", " + std::to_string(a.csr.col_idx[e]) + ")");
      }
    }
  }
  return sample_entries(a, a_prime, s, rng);
}

SparseMatrix random_score_matrix(std::size_t n, std::size_t row_nnz, double spread, Rng& rng) {
  if (row_nnz == 0 || row_nnz > n) throw ContractViolation("row_nnz must lie in [1, n]");
  SparseMatrix m;
  m.csr.row_ptr.assign(n + 1, 0);
  std::vector<NodeId> cols(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(cols.begin(), cols.end(), 0u);
    std::swap(cols[0], cols[i]);
    for (std::size_t r = 1; r < row_nnz; ++r) {
      std::swap(cols[r], cols[r + rng.below(n - r)]);
    }
    std::vector<NodeId> row(cols.begin(), cols.begin() + static_cast<std::ptrdiff_t>(row_nnz));
    std::sort(row.begin(), row.end());
    std::vector<double> w(row_nnz);
    double total = 0.0;
    for (auto& x : w) {
      x = std::exp(rng.uniform(-spread, spread));
      total += x;
    }
    for (std::size_t r = 0; r < row_nnz; ++r) {
      m.csr.col_idx.push_back(row[r]);
      m.values.push_back(w[r] / total);
    }
    m.csr.row_ptr[i + 1] = m.csr.col_idx.size();
  }
  return m;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractViolation("slope needs >= 2 paired points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

}  // namespace spex
