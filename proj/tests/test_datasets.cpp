#include <gtest/gtest.h>

#include <cmath>
#include <queue>

#include <nlohmann/json.hpp>

#include "spex/datasets.hpp"
#include "spex/error.hpp"
#include "support.hpp"

using namespace spex;

namespace {

// Label 1 iff the BFS component of v holds both colors.
std::vector<std::int64_t> bfs_labels(const Csr& adj, const std::vector<int>& color) {
  const std::size_t n = adj.num_rows();
  std::vector<std::int64_t> label(n, -1);
  for (std::size_t s = 0; s < n; ++s) {
    if (label[s] >= 0) continue;
    std::vector<std::size_t> members{s};
    std::vector<bool> seen(n, false);
    seen[s] = true;
    std::queue<std::size_t> q;
    q.push(s);
    bool has[2] = {false, false};
    while (!q.empty()) {
      const std::size_t v = q.front();
      q.pop();
      has[color[v]] = true;
      for (NodeId u : adj.row(v))
        if (!seen[u]) {
          seen[u] = true;
          members.push_back(u);
          q.push(u);
        }
    }
    for (std::size_t v : members) label[v] = has[0] && has[1] ? 1 : 0;
  }
  return label;
}

SyntheticSpec bridge_spec(std::size_t components, std::size_t bridges, std::uint64_t seed) {
  SyntheticSpec s;
  s.num_components = components;
  s.component_size = 6;
  s.num_bridges = bridges;
  s.seed = seed;
  return s;
}

SyntheticSpec sbm_spec(Generator gen, std::uint64_t seed) {
  SyntheticSpec s;
  s.generator = gen;
  s.seed = seed;
  return s;
}

std::size_t undirected_edges(const Graph& g) { return g.adjacency().num_edges() / 2; }

}  // namespace

// ---- bridge task ------------------------------------------------------------------------

TEST(BridgeTask, SameColorUnbridgedComponentsAreAllZero) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SyntheticSpec s = bridge_spec(2, 0, seed);
    BridgeLayout lay;
    Graph g = gen_bridge_task(s, &lay);
    if (lay.color[0] != lay.color[6]) continue;
    for (auto y : g.labels()) EXPECT_EQ(y, 0);
  }
  // Without bridges no component can mix colors.
  Graph g = gen_bridge_task(bridge_spec(5, 0, 3));
  for (auto y : g.labels()) EXPECT_EQ(y, 0);
}

TEST(BridgeTask, OppositeColorsJoinedByOneBridgeAreAllOne) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    BridgeLayout lay;
    Graph g = gen_bridge_task(bridge_spec(2, 1, seed), &lay);
    ASSERT_NE(lay.color[0], lay.color[6]);
    for (auto y : g.labels()) EXPECT_EQ(y, 1);
  }
}

TEST(BridgeTask, LabelsMatchBfsOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SyntheticSpec s = bridge_spec(4, 2, seed);
    s.intra_p = seed % 2 ? 1.0 : 0.4;
    BridgeLayout lay;
    Graph g = gen_bridge_task(s, &lay);
    const auto oracle = bfs_labels(g.adjacency(), lay.color);
    EXPECT_TRUE(std::equal(oracle.begin(), oracle.end(), g.labels().begin())) << "seed " << seed;
  }
}

TEST(BridgeTask, DefaultLayout) {
  SyntheticSpec s;
  BridgeLayout lay;
  Graph g = gen_bridge_task(s, &lay);
  EXPECT_EQ(g.num_nodes(), 8u * 24u);
  EXPECT_EQ(lay.bridges.size(), 4u);
  EXPECT_EQ(g.task(), TaskKind::kBinary);
  // Exactly one edge between each bridged pair and none elsewhere across components.
  std::size_t crossing = 0;
  for (std::size_t v = 0; v < g.num_nodes(); ++v)
    for (NodeId u : g.adjacency().row(v)) crossing += lay.component[u] != lay.component[v];
  EXPECT_EQ(crossing, 2u * 4u);
  for (const auto& [a, b] : lay.bridges) {
    EXPECT_NE(lay.component[a], lay.component[b]);
    EXPECT_NE(g.adjacency().find(a, b), Csr::npos);
  }
  // Features are the one-hot color plus noise of scale 0.1.
  for (std::size_t v = 0; v < g.num_nodes(); ++v) {
    const auto f = g.feature_row(v);
    for (int d = 0; d < 2; ++d) EXPECT_NEAR(f[d], lay.color[v] == d ? 1.0 : 0.0, 0.7);
  }
  const auto oracle = bfs_labels(g.adjacency(), lay.color);
  EXPECT_TRUE(std::equal(oracle.begin(), oracle.end(), g.labels().begin()));
}

TEST(BridgeTask, MixedComponentLabelsFunction) {
  const std::vector<std::pair<NodeId, NodeId>> edges{{0, 1}, {2, 3}, {3, 4}};
  const std::vector<int> color{0, 0, 0, 1, 0};
  EXPECT_EQ(mixed_component_labels(5, edges, color), (std::vector<std::int64_t>{0, 0, 1, 1, 1}));
  EXPECT_THROW(mixed_component_labels(5, edges, {0, 1}), DimensionError);
}

TEST(BridgeTask, DeterministicForSeed) {
  SyntheticSpec s;
  s.seed = 9;
  Graph a = gen_bridge_task(s), b = gen_bridge_task(s);
  EXPECT_EQ(a.adjacency(), b.adjacency());
  EXPECT_TRUE(std::equal(a.features().begin(), a.features().end(), b.features().begin()));
  EXPECT_TRUE(std::equal(a.split().begin(), a.split().end(), b.split().begin()));
  s.seed = 10;
  Graph c = gen_bridge_task(s);
  EXPECT_FALSE(std::equal(a.features().begin(), a.features().end(), c.features().begin()));
}

// ---- block models -----------------------------------------------------------------------

TEST(Sbm, EdgeCountWithinThreeSigma) {
  for (Generator gen : {Generator::kHomophilySbm, Generator::kHeterophilySbm}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      SyntheticSpec s = sbm_spec(gen, seed);
      Graph g = gen_sbm(s);
      const double nb = double(s.num_blocks), bs = double(s.block_size), n = nb * bs;
      const double pairs_in = nb * bs * (bs - 1) / 2.0;
      const double pairs_out = n * (n - 1) / 2.0 - pairs_in;
      const double pi = s.resolved_p_in(), po = s.resolved_p_out();
      const double mean = pi * pairs_in + po * pairs_out;
      const double sd = std::sqrt(pi * (1 - pi) * pairs_in + po * (1 - po) * pairs_out);
      EXPECT_NEAR(double(undirected_edges(g)), mean, 3.0 * sd) << to_string(gen) << " seed " << seed;
    }
  }
}

TEST(Sbm, NoInterBlockEdgesWhenProbabilityIsZero) {
  SyntheticSpec s = sbm_spec(Generator::kHomophilySbm, 1);
  s.p_out = 0.0;
  Graph g = gen_sbm(s);
  for (std::size_t v = 0; v < g.num_nodes(); ++v)
    for (NodeId u : g.adjacency().row(v)) EXPECT_EQ(u / s.block_size, v / s.block_size);
  EXPECT_DOUBLE_EQ(homophily_ratio(g), 1.0);
}

TEST(Sbm, HomophilyFlavorDefaults) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Graph g = gen_sbm(sbm_spec(Generator::kHomophilySbm, seed));
    EXPECT_GT(homophily_ratio(g), 0.8);
    for (std::size_t v = 0; v < g.num_nodes(); ++v) EXPECT_EQ(g.labels()[v], std::int64_t(v / 50));
  }
  Graph h = gen_sbm(sbm_spec(Generator::kHeterophilySbm, 0));
  EXPECT_LT(homophily_ratio(h), 0.5);
}

TEST(Sbm, MultilabelMasks) {
  SyntheticSpec s = sbm_spec(Generator::kHomophilySbm, 2);
  s.multilabel = true;
  Graph g = gen_sbm(s);
  EXPECT_EQ(g.task(), TaskKind::kMultilabel);
  for (auto y : g.labels()) {
    EXPECT_GE(y, 0);
    EXPECT_LT(y, std::int64_t{1} << g.num_classes());
  }
}

TEST(Sbm, HomophilyRatioByHand) {
  // Path 0-1-2 with labels 0, 0, 1: one of two edges joins equal labels.
  Graph g(Csr::from_edges(3, {{0, 1}, {1, 2}}, true), std::vector<float>(3, 0.0f), 1, {0, 0, 1},
          std::vector<Split>(3, Split::kTrain), TaskKind::kMulticlass, 2);
  EXPECT_DOUBLE_EQ(homophily_ratio(g), 0.5);
}

// ---- splits, specs, files ---------------------------------------------------------------

TEST(Splits, StratifiedFractionsPerClass) {
  std::vector<std::int64_t> labels;
  for (int c = 0; c < 3; ++c) labels.insert(labels.end(), 50, c);
  auto split = stratified_split(labels, {0.6, 0.2, 0.2}, 4);
  for (int c = 0; c < 3; ++c) {
    int counts[3] = {};
    for (std::size_t v = 0; v < labels.size(); ++v)
      if (labels[v] == c) ++counts[static_cast<int>(split[v])];
    EXPECT_EQ(counts[0], 30);
    EXPECT_EQ(counts[1], 10);
    EXPECT_EQ(counts[2], 10);
  }
  EXPECT_EQ(split, stratified_split(labels, {0.6, 0.2, 0.2}, 4));
}

TEST(SpecValidation, RejectsBadSpecs) {
  SyntheticSpec s;
  s.split = {0.5, 0.2, 0.2};
  EXPECT_THROW(s.validate(), ConfigError);
  s = SyntheticSpec{};
  s.component_size = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = SyntheticSpec{};
  s.num_bridges = 5;
  EXPECT_THROW(s.validate(), ConfigError);
  s = sbm_spec(Generator::kHomophilySbm, 0);
  s.p_in = 1.5;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(gen_sbm(SyntheticSpec{}), ConfigError);
  EXPECT_THROW(gen_bridge_task(sbm_spec(Generator::kHomophilySbm, 0)), ConfigError);
  EXPECT_THROW(generator_from_string("nope"), ConfigError);
}

TEST(SpecValidation, JsonRoundTrip) {
  SyntheticSpec s = sbm_spec(Generator::kHeterophilySbm, 12);
  s.feature_dim = 5;
  nlohmann::json j = s;
  SyntheticSpec t = j.get<SyntheticSpec>();
  EXPECT_EQ(nlohmann::json(t), j);
  EXPECT_EQ(t.generator, Generator::kHeterophilySbm);
  for (Generator g : {Generator::kBridgeComponents, Generator::kHomophilySbm, Generator::kHeterophilySbm})
    EXPECT_EQ(generator_from_string(to_string(g)), g);
}

TEST(DatasetFiles, WriteReadRoundTrip) {
  for (SyntheticSpec s : {SyntheticSpec{}, sbm_spec(Generator::kHomophilySbm, 3)}) {
    Graph g = generate(s);
    spex::test::TempDir dir;
    write_dataset(g, s, dir.path());
    for (const char* f : {"edges.tsv", "features.csv", "labels.csv", "split.txt", "dataset.json"})
      EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
    Graph h = read_dataset(dir.path());
    EXPECT_EQ(h.adjacency(), g.adjacency());
    EXPECT_TRUE(std::equal(h.labels().begin(), h.labels().end(), g.labels().begin()));
    EXPECT_TRUE(std::equal(h.split().begin(), h.split().end(), g.split().begin()));
    EXPECT_EQ(h.task(), g.task());
    EXPECT_EQ(h.num_classes(), g.num_classes());
    ASSERT_EQ(h.features().size(), g.features().size());
    for (std::size_t k = 0; k < g.features().size(); ++k)
      EXPECT_NEAR(h.features()[k], g.features()[k], 1e-6 * std::max(1.0f, std::abs(g.features()[k])));
  }
}

TEST(DatasetFiles, MissingManifestRejected) {
  spex::test::TempDir dir;
  EXPECT_THROW(read_dataset(dir.path()), FormatError);
}
