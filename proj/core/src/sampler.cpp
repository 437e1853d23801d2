#include "spex/sampler.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "spex/error.hpp"
#include "text_io.hpp"

namespace spex {

void ScoreSet::validate(double tol) const {
  if (layers.empty()) throw ContractViolation("score set has no layers");
  const std::size_t n = num_nodes();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const ScoreLayer& layer = layers[l];
    layer.csr.validate();
    if (layer.csr.num_rows() != n) throw DimensionError("score layers disagree on node count");
    if (layer.scores.size() != layer.csr.num_edges()) {
      throw DimensionError("score count does not match the layer's edges");
    }
    if (!layer.types.empty() && layer.types.size() != layer.csr.num_edges()) {
      throw DimensionError("edge type count does not match the layer's edges");
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = layer.row_scores(i);
      if (row.empty()) {
        throw ContractViolation("empty score row " + std::to_string(i) + " in layer " +
                                std::to_string(l + 1));
      }
      double total = 0.0;
      for (float a : row) {
        if (!(a >= 0.0f) || !std::isfinite(a)) {
          throw ContractViolation("negative or non-finite score in row " + std::to_string(i));
        }
        total += a;
      }
      if (std::abs(total - 1.0) > tol) {
        throw ContractViolation("score row " + std::to_string(i) + " of layer " +
                                std::to_string(l + 1) + " sums to " + std::to_string(total));
      }
    }
  }
}

ScoreSet uniform_scores(const AttentionPattern& pattern) {
  ScoreSet out;
  for (std::size_t l = 0; l < pattern.num_layers(); ++l) {
    const LayerPattern& p = pattern.layer(l);
    ScoreLayer layer{p.csr, std::vector<float>(p.csr.num_edges()), p.types};
    for (std::size_t i = 0; i < p.csr.num_rows(); ++i) {
      const float w = 1.0f / static_cast<float>(p.csr.degree(i));
      std::fill_n(layer.scores.begin() + static_cast<std::ptrdiff_t>(p.csr.row_ptr[i]),
                  p.csr.degree(i), w);
    }
    out.layers.push_back(std::move(layer));
  }
  return out;
}

ScoreSet uniformized(const ScoreSet& scores) {
  ScoreSet out = scores;
  for (auto& layer : out.layers) {
    for (std::size_t i = 0; i < layer.csr.num_rows(); ++i) {
      const float w = 1.0f / static_cast<float>(layer.csr.degree(i));
      std::fill_n(layer.scores.begin() + static_cast<std::ptrdiff_t>(layer.csr.row_ptr[i]),
                  layer.csr.degree(i), w);
    }
  }
  return out;
}

void attach_types(ScoreSet& scores, const AttentionPattern& pattern) {
  if (scores.num_layers() != pattern.num_layers() || scores.num_nodes() != pattern.num_nodes()) {
    throw DimensionError("score set and pattern differ in layers or nodes");
  }
  for (std::size_t l = 0; l < scores.num_layers(); ++l) {
    ScoreLayer& layer = scores.layers[l];
    const LayerPattern& p = pattern.layer(l);
    layer.types.resize(layer.csr.num_edges());
    for (std::size_t i = 0; i < layer.csr.num_rows(); ++i) {
      for (std::size_t e = layer.csr.row_ptr[i]; e < layer.csr.row_ptr[i + 1]; ++e) {
        const std::size_t pos = p.csr.find(i, layer.csr.col_idx[e]);
        if (pos == Csr::npos) {
          throw ContractViolation("score edge (" + std::to_string(i) + ", " +
                                  std::to_string(layer.csr.col_idx[e]) +
                                  ") is not in the attention pattern");
        }
        layer.types[e] = p.types[pos];
      }
    }
  }
}

void save_scores_text(const ScoreSet& scores, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << "# width " << scores.estimator_width << " best_epoch " << scores.best_epoch << '\n';
  char buf[64];
  for (std::size_t l = 0; l < scores.num_layers(); ++l) {
    const ScoreLayer& layer = scores.layers[l];
    out << "layer " << (l + 1) << ' ' << layer.csr.num_rows() << ' ' << layer.csr.num_edges()
        << '\n';
    for (std::size_t i = 0; i < layer.csr.num_rows(); ++i) {
      for (std::size_t e = layer.csr.row_ptr[i]; e < layer.csr.row_ptr[i + 1]; ++e) {
        std::snprintf(buf, sizeof buf, "%zu %u %.6g\n", i, layer.csr.col_idx[e],
                      static_cast<double>(layer.scores[e]));
        out << buf;
      }
    }
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

ScoreSet load_scores_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  ScoreSet out;
  std::string raw;
  std::size_t no = 0;
  std::size_t remaining = 0, n = 0;
  std::size_t last_row = 0;
  ScoreLayer* cur = nullptr;
  auto finish = [&](std::size_t line) {
    if (!cur) return;
    if (remaining != 0) throw FormatError("layer ends before its declared edge count", line);
    while (cur->csr.row_ptr.size() < n + 1) cur->csr.row_ptr.push_back(cur->csr.col_idx.size());
    cur->csr.validate();
  };
  while (std::getline(in, raw)) {
    ++no;
    const auto line = detail::trim(raw);
    if (line.empty()) continue;
    if (line.front() == '#') {
      const auto f = detail::split_fields(line.substr(1), ' ');
      std::vector<std::string_view> toks;
      for (auto t : f) {
        if (!t.empty()) toks.push_back(t);
      }
      for (std::size_t k = 0; k + 1 < toks.size(); k += 2) {
        if (toks[k] == "width") out.estimator_width = detail::parse_int<std::size_t>(toks[k + 1], no);
        if (toks[k] == "best_epoch") out.best_epoch = detail::parse_int<std::int64_t>(toks[k + 1], no);
      }
      continue;
    }
    const auto f = detail::split_fields(line, ' ');
    if (f.size() == 4 && f[0] == "layer") {
      finish(no);
      const auto l = detail::parse_int<std::size_t>(f[1], no);
      if (l != out.layers.size() + 1) throw FormatError("layers out of order", no);
      n = detail::parse_int<std::size_t>(f[2], no);
      if (!out.layers.empty() && n != out.num_nodes()) {
        throw FormatError("layers disagree on node count", no);
      }
      remaining = detail::parse_int<std::size_t>(f[3], no);
      out.layers.emplace_back();
      cur = &out.layers.back();
      cur->csr.col_idx.reserve(remaining);
      cur->scores.reserve(remaining);
      last_row = 0;
      continue;
    }
    if (!cur) throw FormatError("edge line before any layer header", no);
    if (f.size() != 3) throw FormatError("expected 'i j score'", no);
    if (remaining == 0) throw FormatError("more edges than declared", no);
    const auto i = detail::parse_int<std::size_t>(f[0], no);
    const auto j = detail::parse_int<NodeId>(f[1], no);
    const double a = detail::parse_real(f[2], no);
    if (i >= n || j >= n) throw FormatError("node id out of range", no);
    if (i < last_row) throw FormatError("rows must appear in increasing order", no);
    while (cur->csr.row_ptr.size() < i + 1) cur->csr.row_ptr.push_back(cur->csr.col_idx.size());
    last_row = i;
    cur->csr.col_idx.push_back(j);
    cur->scores.push_back(static_cast<float>(a));
    --remaining;
  }
  finish(no);
  if (out.layers.empty()) throw FormatError("no layers in " + path.string());
  return out;
}

namespace {

constexpr char kScoreMagic[4] = {'S', 'P', 'X', 'S'};
constexpr std::uint32_t kScoreVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "score I/O assumes a little-endian host");

template <typename U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
void put_vec(std::ostream& out, const std::vector<U>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(U)));
}

template <typename U>
U get(std::istream& in) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!in) throw FormatError("truncated score file");
  return v;
}

template <typename U>
void get_vec(std::istream& in, std::vector<U>& v, std::size_t count) {
  v.resize(count);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(U)));
  if (!in) throw FormatError("truncated score file");
}

}  // namespace

void save_scores_binary(const ScoreSet& scores, const std::filesystem::path& path) {
  auto out = detail::open_out(path, std::ios::binary);
  out.write(kScoreMagic, 4);
  put<std::uint32_t>(out, kScoreVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(scores.num_layers()));
  put<std::uint64_t>(out, scores.estimator_width);
  put<std::int64_t>(out, scores.best_epoch);
  for (const auto& layer : scores.layers) {
    put<std::uint64_t>(out, layer.csr.num_rows());
    put<std::uint64_t>(out, layer.csr.num_edges());
    put_vec(out, layer.csr.row_ptr);
    put_vec(out, layer.csr.col_idx);
    put_vec(out, layer.scores);
    put<std::uint8_t>(out, layer.types.empty() ? 0 : 1);
    if (!layer.types.empty()) put_vec(out, layer.types);
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

ScoreSet load_scores_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kScoreMagic, 4) != 0) throw FormatError("not a score file");
  if (get<std::uint32_t>(in) != kScoreVersion) throw FormatError("unsupported score version");
  ScoreSet out;
  const auto count = get<std::uint32_t>(in);
  out.estimator_width = get<std::uint64_t>(in);
  out.best_epoch = get<std::int64_t>(in);
  for (std::uint32_t l = 0; l < count; ++l) {
    ScoreLayer layer;
    const auto n = get<std::uint64_t>(in);
    const auto nnz = get<std::uint64_t>(in);
    get_vec(in, layer.csr.row_ptr, n + 1);
    get_vec(in, layer.csr.col_idx, nnz);
    get_vec(in, layer.scores, nnz);
    if (get<std::uint8_t>(in) != 0) {
      get_vec(in, layer.types, nnz);
      for (EdgeType t : layer.types) {
        if (static_cast<std::size_t>(t) >= kNumEdgeTypes) throw FormatError("bad edge type");
      }
    }
    layer.csr.validate();
    out.layers.push_back(std::move(layer));
  }
  return out;
}

std::vector<std::uint32_t> reservoir_sample(std::span<const float> scores, std::size_t k, Rng& rng,
                                            SampleStats* stats) {
  if (scores.empty()) throw ContractViolation("reservoir_sample: empty row");
  if (k == 0) throw ContractViolation("reservoir_sample: k must be positive");
  const std::size_t len = scores.size();
  std::vector<std::uint32_t> pos(len);
  std::iota(pos.begin(), pos.end(), 0u);
  if (k >= len) return pos;

  bool any_positive = false;
  for (float a : scores) {
    if (!(a >= 0.0f) || !std::isfinite(a)) {
      throw ContractViolation("reservoir_sample: scores must be finite and nonnegative");
    }
    any_positive = any_positive || a > 0.0f;
  }
  if (!any_positive && stats) ++stats->uniform_fallbacks;

  // Primary key log(u)/a; zero weights get -inf and are ordered among
  // themselves by a second uniform draw, so they only fill leftover slots.
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  std::vector<std::pair<double, double>> key(len);
  for (std::size_t i = 0; i < len; ++i) {
    const double u = rng.uniform_open01();
    if (!any_positive) {
      key[i] = {std::log(u), 0.0};
    } else if (scores[i] > 0.0f) {
      key[i] = {std::log(u) / static_cast<double>(scores[i]), 0.0};
    } else {
      key[i] = {kNegInf, u};
    }
  }
  std::partial_sort(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(k), pos.end(),
                    [&](std::uint32_t a, std::uint32_t b) {
                      if (key[a] != key[b]) return key[a] > key[b];
                      return a < b;
                    });
  pos.resize(k);
  std::sort(pos.begin(), pos.end());
  return pos;
}

namespace {

// Positions ordered by score descending, lower position first on ties; the
// first k are placed, the rest are in unspecified order.
std::vector<std::uint32_t> by_score(std::span<const float> scores, std::size_t k) {
  std::vector<std::uint32_t> pos(scores.size());
  std::iota(pos.begin(), pos.end(), 0u);
  k = std::min(k, pos.size());
  std::partial_sort(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(k), pos.end(),
                    [&](std::uint32_t a, std::uint32_t b) {
                      return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
                    });
  return pos;
}

}  // namespace

std::vector<std::uint32_t> top_k_positions(std::span<const float> scores, std::size_t k) {
  auto pos = by_score(scores, k);
  if (k < pos.size()) pos.resize(k);
  std::sort(pos.begin(), pos.end());
  return pos;
}

Prefiltered prefilter_topk(std::span<const float> scores, std::size_t k_prime, double tail_eps) {
  if (k_prime == 0) throw ContractViolation("prefilter_topk: k_prime must be positive");
  Prefiltered out;
  if (k_prime >= scores.size()) {
    out.kept.resize(scores.size());
    std::iota(out.kept.begin(), out.kept.end(), 0u);
    return out;
  }
  auto pos = by_score(scores, k_prime);
  std::vector<char> kept(scores.size(), 0);
  for (std::size_t r = 0; r < k_prime; ++r) kept[pos[r]] = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!kept[i]) out.dropped_mass += scores[i];
  }
  if (out.dropped_mass > tail_eps) {
    out.flagged = true;
    out.kept.resize(scores.size());
    std::iota(out.kept.begin(), out.kept.end(), 0u);
    return out;
  }
  pos.resize(k_prime);
  std::sort(pos.begin(), pos.end());
  out.kept = std::move(pos);
  return out;
}

std::size_t LayerPlan::num_real_keys() const {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(),
                                                [](float m) { return m != 0.0f; }));
}

namespace {

// Keys (score-row positions) chosen for one query.
std::vector<std::uint32_t> choose_keys(std::span<const float> row, std::size_t deg,
                                       const SamplerOptions& options, std::size_t k_prime,
                                       Rng& rng, SampleStats* stats) {
  if (options.policy == SamplingPolicy::kTopScore) return top_k_positions(row, deg);
  if (deg >= row.size()) return reservoir_sample(row, deg, rng, stats);
  if (k_prime < row.size()) {
    const Prefiltered pf = prefilter_topk(row, k_prime, options.tail_eps);
    if (pf.flagged) {
      if (stats) ++stats->prefilter_flagged;
    } else if (pf.kept.size() < row.size()) {
      std::vector<float> sub(pf.kept.size());
      for (std::size_t r = 0; r < sub.size(); ++r) sub[r] = row[pf.kept[r]];
      auto picked = reservoir_sample(sub, deg, rng, stats);
      for (auto& p : picked) p = pf.kept[p];
      return picked;
    }
  }
  return reservoir_sample(row, deg, rng, stats);
}

}  // namespace

BatchPlan sample_batch(std::span<const NodeId> seeds, const ScoreSet& scores,
                       std::span<const std::size_t> degs, const SamplerOptions& options,
                       const StreamKey& key, SampleStats* stats) {
  const std::size_t num_layers = scores.num_layers();
  if (degs.size() != num_layers) {
    throw ContractViolation("need one degree per layer (" + std::to_string(num_layers) + ")");
  }
  for (std::size_t d : degs) {
    if (d == 0) throw ContractViolation("sampling degrees must be positive");
  }
  if (seeds.empty()) throw ContractViolation("seed batch is empty");
  const std::size_t n = scores.num_nodes();
  {
    std::vector<NodeId> sorted(seeds.begin(), seeds.end());
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw ContractViolation("seed batch contains duplicates");
    }
    if (sorted.back() >= n) throw ContractViolation("seed node out of range");
  }
  const std::size_t k_prime =
      options.k_prime != 0 ? options.k_prime : 4 * *std::max_element(degs.begin(), degs.end());

  BatchPlan plan;
  plan.seeds.assign(seeds.begin(), seeds.end());
  plan.layers.resize(num_layers);
  std::vector<NodeId> next(seeds.begin(), seeds.end());
  for (std::size_t step = 0; step < num_layers; ++step) {
    const std::size_t l = num_layers - 1 - step;
    const ScoreLayer& layer = scores.layers[l];
    if (layer.types.size() != layer.csr.num_edges()) {
      throw ContractViolation("score set has no edge types; attach the pattern first");
    }
    LayerPlan& lp = plan.layers[l];
    lp.nodes = next;
    lp.num_queries = next.size();
    std::unordered_map<NodeId, std::uint32_t> local;
    local.reserve(next.size() * (degs[l] + 1));
    for (std::size_t r = 0; r < next.size(); ++r) local.emplace(next[r], static_cast<std::uint32_t>(r));

    std::vector<std::vector<std::uint32_t>> picked(lp.num_queries);
    std::size_t width = 0;
    for (std::size_t r = 0; r < lp.num_queries; ++r) {
      const NodeId q = next[r];
      const auto row = layer.row_scores(q);
      if (row.empty()) {
        throw ContractViolation("node " + std::to_string(q) + " has an empty score row in layer " +
                                std::to_string(l + 1));
      }
      Rng rng(derive_seed(key.seed, {key.epoch, key.batch, l, q}));
      picked[r] = choose_keys(row, degs[l], options, k_prime, rng, stats);
      width = std::max(width, picked[r].size());
    }
    lp.degree = width;
    lp.key_local.assign(lp.num_queries * width, 0);
    lp.key_type.assign(lp.num_queries * width, static_cast<std::uint32_t>(EdgeType::kSelfLoop));
    lp.mask.assign(lp.num_queries * width, 0.0f);
    for (std::size_t r = 0; r < lp.num_queries; ++r) {
      const NodeId q = next[r];
      const std::size_t base = layer.csr.row_ptr[q];
      for (std::size_t s = 0; s < width; ++s) {
        const std::size_t slot = r * width + s;
        if (s >= picked[r].size()) {
          lp.key_local[slot] = static_cast<std::uint32_t>(r);
          continue;
        }
        const std::size_t e = base + picked[r][s];
        const NodeId u = layer.csr.col_idx[e];
        auto [it, inserted] = local.emplace(u, static_cast<std::uint32_t>(lp.nodes.size()));
        if (inserted) lp.nodes.push_back(u);
        lp.key_local[slot] = it->second;
        lp.key_type[slot] = static_cast<std::uint32_t>(layer.types[e]);
        lp.mask[slot] = 1.0f;
      }
    }
    next = lp.nodes;
  }
  return plan;
}

std::vector<std::vector<NodeId>> epoch_batches(std::span<const NodeId> train_nodes,
                                               std::size_t batch_size, std::uint64_t seed,
                                               std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<NodeId> order(train_nodes.begin(), train_nodes.end());
  Rng rng(derive_seed(seed, {epoch, 0xba7cULL}));
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<std::vector<NodeId>> out;
  for (std::size_t b = 0; b < order.size(); b += batch_size) {
    const std::size_t e = std::min(order.size(), b + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return out;
}

std::vector<BatchPlan> resample_epoch(const ScoreSet& scores, std::span<const std::size_t> degs,
                                      std::span<const NodeId> train_nodes, std::size_t batch_size,
                                      const SamplerOptions& options, std::uint64_t seed,
                                      std::uint64_t epoch, SampleStats* stats) {
  const auto batches = epoch_batches(train_nodes, batch_size, seed, epoch);
  std::vector<BatchPlan> out;
  out.reserve(batches.size());
  for (std::size_t b = 0; b < batches.size(); ++b) {
    out.push_back(sample_batch(batches[b], scores, degs, options, StreamKey{seed, epoch, b}, stats));
  }
  return out;
}

}  // namespace spex
