#include "spex/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "spex/error.hpp"
#include "spex/rng.hpp"

namespace spex {

const char* to_string(Generator g) noexcept {
  switch (g) {
    case Generator::kBridgeComponents: return "bridge_components";
    case Generator::kHomophilySbm: return "homophily_sbm";
    case Generator::kHeterophilySbm: return "heterophily_sbm";
  }
  return "?";
}

Generator generator_from_string(const std::string& s) {
  if (s == "bridge_components") return Generator::kBridgeComponents;
  if (s == "homophily_sbm") return Generator::kHomophilySbm;
  if (s == "heterophily_sbm") return Generator::kHeterophilySbm;
  throw ConfigError("unknown generator '" + s + "'");
}

void SyntheticSpec::validate() const {
  const double total = split[0] + split[1] + split[2];
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  for (double f : split) {
    if (f < 0.0) throw ConfigError("split fractions must be nonnegative");
  }
  if (noise < 0.0) throw ConfigError("noise must be nonnegative");
  if (generator == Generator::kBridgeComponents) {
    if (component_size < 2) throw ConfigError("components need at least two nodes");
    if (num_components < 1) throw ConfigError("need at least one component");
    if (2 * num_bridges > num_components) {
      throw ConfigError("each bridge joins two distinct unbridged components");
    }
    if (!(intra_p > 0.0 && intra_p <= 1.0)) throw ConfigError("intra_p must lie in (0, 1]");
  } else {
    if (block_size < 2 || num_blocks < 2) throw ConfigError("need >= 2 blocks of >= 2 nodes");
    if (feature_dim == 0) throw ConfigError("feature_dim must be positive");
    if (multilabel && num_blocks > 62) throw ConfigError("too many blocks for a label bitmask");
    for (double p : {resolved_p_in(), resolved_p_out()}) {
      if (p < 0.0 || p > 1.0) throw ConfigError("block probabilities must lie in [0, 1]");
    }
  }
}

double SyntheticSpec::resolved_p_in() const {
  if (p_in >= 0.0) return p_in;
  return generator == Generator::kHeterophilySbm ? 0.01 : 0.2;
}

double SyntheticSpec::resolved_p_out() const {
  if (p_out >= 0.0) return p_out;
  return generator == Generator::kHeterophilySbm ? 0.1 : 0.01;
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = nlohmann::json{{"generator", to_string(s.generator)},
                     {"seed", s.seed},
                     {"noise", s.noise},
                     {"split", s.split},
                     {"num_components", s.num_components},
                     {"component_size", s.component_size},
                     {"num_bridges", s.num_bridges},
                     {"intra_p", s.intra_p},
                     {"num_blocks", s.num_blocks},
                     {"block_size", s.block_size},
                     {"p_in", s.resolved_p_in()},
                     {"p_out", s.resolved_p_out()},
                     {"feature_dim", s.feature_dim},
                     {"multilabel", s.multilabel}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  s = SyntheticSpec{};
  if (j.contains("generator")) s.generator = generator_from_string(j.at("generator").get<std::string>());
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("seed", s.seed);
  opt("noise", s.noise);
  opt("split", s.split);
  opt("num_components", s.num_components);
  opt("component_size", s.component_size);
  opt("num_bridges", s.num_bridges);
  opt("intra_p", s.intra_p);
  opt("num_blocks", s.num_blocks);
  opt("block_size", s.block_size);
  opt("p_in", s.p_in);
  opt("p_out", s.p_out);
  opt("feature_dim", s.feature_dim);
  opt("multilabel", s.multilabel);
}

namespace {

struct UnionFind {
  std::vector<std::size_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

template <typename V>
void shuffle(V& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace

std::vector<std::int64_t> mixed_component_labels(std::size_t n,
                                                 const std::vector<std::pair<NodeId, NodeId>>& edges,
                                                 const std::vector<int>& color) {
  if (color.size() != n) throw DimensionError("one color per node required");
  UnionFind uf(n);
  for (const auto& [a, b] : edges) uf.unite(a, b);
  std::vector<int> seen(n, 0);  // bit c set when the root's component has color c
  for (std::size_t v = 0; v < n; ++v) seen[uf.find(v)] |= 1 << color[v];
  std::vector<std::int64_t> labels(n);
  for (std::size_t v = 0; v < n; ++v) labels[v] = seen[uf.find(v)] == 3 ? 1 : 0;
  return labels;
}

std::vector<Split> stratified_split(const std::vector<std::int64_t>& labels,
                                    const std::array<double, 3>& fractions, std::uint64_t seed) {
  std::vector<Split> out(labels.size(), Split::kTrain);
  std::vector<std::int64_t> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  for (std::int64_t c : classes) {
    std::vector<NodeId> members;
    for (std::size_t v = 0; v < labels.size(); ++v) {
      if (labels[v] == c) members.push_back(static_cast<NodeId>(v));
    }
    Rng rng(derive_seed(seed, {0x5b1d, static_cast<std::uint64_t>(c)}));
    shuffle(members, rng);
    const auto m = static_cast<double>(members.size());
    const auto n_train = static_cast<std::size_t>(std::floor(fractions[0] * m + 0.5));
    const auto n_val = static_cast<std::size_t>(std::floor((fractions[0] + fractions[1]) * m + 0.5));
    for (std::size_t r = 0; r < members.size(); ++r) {
      out[members[r]] = r < n_train ? Split::kTrain : r < n_val ? Split::kVal : Split::kTest;
    }
  }
  return out;
}

Graph gen_bridge_task(const SyntheticSpec& spec, BridgeLayout* layout) {
  if (spec.generator != Generator::kBridgeComponents) {
    throw ConfigError("gen_bridge_task needs the bridge_components generator");
  }
  spec.validate();
  Rng rng(derive_seed(spec.seed, {0xb51d}));
  const std::size_t c = spec.num_components, s = spec.component_size, n = c * s;
  BridgeLayout lay;
  lay.color.resize(n);
  lay.component.resize(n);

  std::vector<std::size_t> order(c);
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, rng);
  std::vector<int> comp_color(c);
  // Bridged pairs alternate between opposite and equal colors; the rest are
  // colored at random.
  for (std::size_t b = 0; b < spec.num_bridges; ++b) {
    const int first = static_cast<int>(rng.below(2));
    comp_color[order[2 * b]] = first;
    comp_color[order[2 * b + 1]] = b % 2 == 0 ? 1 - first : first;
  }
  for (std::size_t r = 2 * spec.num_bridges; r < c; ++r) {
    comp_color[order[r]] = static_cast<int>(rng.below(2));
  }

  std::vector<std::pair<NodeId, NodeId>> edges;
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t a = 0; a < s; ++a) {
      const std::size_t v = k * s + a;
      lay.component[v] = k;
      lay.color[v] = comp_color[k];
      for (std::size_t b = a + 1; b < s; ++b) {
        if (spec.intra_p >= 1.0 || rng.bernoulli(spec.intra_p)) {
          edges.emplace_back(static_cast<NodeId>(v), static_cast<NodeId>(k * s + b));
        }
      }
    }
  }
  for (std::size_t b = 0; b < spec.num_bridges; ++b) {
    const std::size_t ka = order[2 * b], kb = order[2 * b + 1];
    const auto u = static_cast<NodeId>(ka * s + rng.below(s));
    const auto v = static_cast<NodeId>(kb * s + rng.below(s));
    edges.emplace_back(u, v);
    lay.bridges.emplace_back(u, v);
  }

  auto labels = mixed_component_labels(n, edges, lay.color);
  std::vector<float> features(n * 2);
  for (std::size_t v = 0; v < n; ++v) {
    for (int d = 0; d < 2; ++d) {
      const double base = lay.color[v] == d ? 1.0 : 0.0;
      features[v * 2 + static_cast<std::size_t>(d)] = static_cast<float>(base + spec.noise * rng.normal());
    }
  }
  auto split = stratified_split(labels, spec.split, spec.seed);
  Csr adj = Csr::from_edges(n, std::move(edges), true);
  if (layout) *layout = std::move(lay);
  return Graph(std::move(adj), std::move(features), 2, std::move(labels), std::move(split),
               TaskKind::kBinary, 2);
}

Graph gen_sbm(const SyntheticSpec& spec) {
  if (spec.generator == Generator::kBridgeComponents) {
    throw ConfigError("gen_sbm needs an sbm generator");
  }
  spec.validate();
  Rng rng(derive_seed(spec.seed, {0x5b3}));
  const std::size_t nb = spec.num_blocks, bs = spec.block_size, n = nb * bs;
  const double p_in = spec.resolved_p_in(), p_out = spec.resolved_p_out();
  std::vector<std::pair<NodeId, NodeId>> edges;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      const double p = a / bs == b / bs ? p_in : p_out;
      if (p > 0.0 && rng.bernoulli(p)) {
        edges.emplace_back(static_cast<NodeId>(a), static_cast<NodeId>(b));
      }
    }
  }
  std::vector<float> means(nb * spec.feature_dim);
  for (auto& m : means) m = static_cast<float>(rng.normal());
  std::vector<float> features(n * spec.feature_dim);
  std::vector<std::int64_t> blocks(n), labels(n);
  for (std::size_t v = 0; v < n; ++v) {
    const std::size_t k = v / bs;
    blocks[v] = static_cast<std::int64_t>(k);
    for (std::size_t d = 0; d < spec.feature_dim; ++d) {
      features[v * spec.feature_dim + d] =
          static_cast<float>(means[k * spec.feature_dim + d] + spec.noise * rng.normal());
    }
    if (spec.multilabel) {
      std::int64_t mask = std::int64_t{1} << k;
      if (rng.bernoulli(0.5)) mask |= std::int64_t{1} << ((k + 1) % nb);
      labels[v] = mask;
    } else {
      labels[v] = blocks[v];
    }
  }
  auto split = stratified_split(blocks, spec.split, spec.seed);
  Csr adj = Csr::from_edges(n, std::move(edges), true);
  return Graph(std::move(adj), std::move(features), spec.feature_dim, std::move(labels),
               std::move(split), spec.multilabel ? TaskKind::kMultilabel : TaskKind::kMulticlass,
               nb);
}

Graph generate(const SyntheticSpec& spec) {
  return spec.generator == Generator::kBridgeComponents ? gen_bridge_task(spec) : gen_sbm(spec);
}

double homophily_ratio(const Graph& g) {
  const Csr& a = g.adjacency();
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.num_rows(); ++i) {
    for (NodeId j : a.row(i)) same += g.labels()[i] == g.labels()[j] ? 1 : 0;
  }
  return a.num_edges() == 0 ? 0.0 : static_cast<double>(same) / static_cast<double>(a.num_edges());
}

namespace {

const char* task_name(TaskKind t) {
  switch (t) {
    case TaskKind::kMulticlass: return "multiclass";
    case TaskKind::kBinary: return "binary";
    case TaskKind::kMultilabel: return "multilabel";
  }
  return "?";
}

TaskKind task_from_name(const std::string& s) {
  if (s == "multiclass") return TaskKind::kMulticlass;
  if (s == "binary") return TaskKind::kBinary;
  if (s == "multilabel") return TaskKind::kMultilabel;
  throw FormatError("unknown task kind '" + s + "'");
}

}  // namespace

void write_dataset(const Graph& g, const SyntheticSpec& spec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_graph(g, dir / "edges.tsv", dir / "features.csv", dir / "labels.csv", dir / "split.txt");
  nlohmann::json meta{{"n", g.num_nodes()},
                      {"feature_dim", g.feature_dim()},
                      {"task", task_name(g.task())},
                      {"num_classes", g.num_classes()},
                      {"spec", spec}};
  std::ofstream out(dir / "dataset.json");
  if (!out) throw FormatError("cannot write " + (dir / "dataset.json").string());
  out << meta.dump(2) << '\n';
}

Graph read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "dataset.json");
  if (!in) throw FormatError("missing dataset.json in " + dir.string());
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset.json: ") + e.what());
  }
  LoadOptions opts;
  opts.split_path = dir / "split.txt";
  opts.task = task_from_name(meta.at("task").get<std::string>());
  opts.num_classes = meta.at("num_classes").get<std::size_t>();
  return load_graph(dir / "edges.tsv", dir / "features.csv", dir / "labels.csv",
                    meta.at("n").get<std::size_t>(), opts);
}

}  // namespace spex
