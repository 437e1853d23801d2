#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "spex/error.hpp"
#include "spex/expander.hpp"
#include "spex/graph.hpp"
#include "spex/pattern.hpp"
#include "support.hpp"

using namespace spex;
using spex::test::TempDir;
using spex::test::write_file;

namespace {

// Cyclic Jacobi rotations; returns all eigenvalues of a symmetric matrix.
std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-22) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  std::sort(ev.begin(), ev.end());
  return ev;
}

double gap_oracle(const Csr& csr) {
  const std::size_t n = csr.num_rows();
  std::vector<std::vector<double>> m(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (NodeId j : csr.row(i))
      m[i][j] = 1.0 / std::sqrt(double(csr.degree(i)) * double(csr.degree(j)));
  auto ev = jacobi_eigenvalues(m);
  return 1.0 - std::max(ev[n - 2], std::abs(ev[0]));
}

Csr complete(std::size_t n) {
  std::vector<std::pair<NodeId, NodeId>> e;
  for (NodeId i = 0; i < n; ++i)
    for (NodeId j = i + 1; j < n; ++j) e.emplace_back(i, j);
  return Csr::from_edges(n, e, true);
}

Csr cycle(std::size_t n) {
  std::vector<std::pair<NodeId, NodeId>> e;
  for (NodeId i = 0; i < n; ++i) e.emplace_back(i, static_cast<NodeId>((i + 1) % n));
  return Csr::from_edges(n, e, true);
}

}  // namespace

TEST(Csr, FromEdgesSymmetrizesSingleEdge) {
  Csr c = Csr::from_edges(2, {{0, 1}}, true);
  EXPECT_EQ(c.row_ptr, (std::vector<std::uint64_t>{0, 1, 2}));
  EXPECT_EQ(c.col_idx, (std::vector<NodeId>{1, 0}));
}

TEST(Csr, FindLocatesEdges) {
  Csr c = Csr::from_edges(4, spex::test::path_edges(4), true);
  EXPECT_EQ(c.find(1, 2), 2u);
  EXPECT_EQ(c.find(0, 3), Csr::npos);
}

TEST(Csr, ValidateRejectsUnsortedRow) {
  Csr c;
  c.row_ptr = {0, 2, 2};
  c.col_idx = {1, 0};
  EXPECT_THROW(c.validate(), Error);
}

TEST(Csr, ValidateRejectsOutOfRangeColumn) {
  Csr c;
  c.row_ptr = {0, 1};
  c.col_idx = {3};
  EXPECT_THROW(c.validate(), Error);
}

TEST(LoadGraph, SingleUndirectedEdge) {
  TempDir dir;
  write_file(dir / "e.tsv", "0\t1\n");
  write_file(dir / "f.csv", "1.0,2.0\n3.0,4.0\n");
  write_file(dir / "l.csv", "0\n1\n");
  Graph g = load_graph(dir / "e.tsv", dir / "f.csv", dir / "l.csv", 2);
  ASSERT_EQ(g.num_nodes(), 2u);
  EXPECT_EQ(std::vector<NodeId>(g.adjacency().row(0).begin(), g.adjacency().row(0).end()),
            std::vector<NodeId>{1});
  EXPECT_EQ(std::vector<NodeId>(g.adjacency().row(1).begin(), g.adjacency().row(1).end()),
            std::vector<NodeId>{0});
  EXPECT_FLOAT_EQ(g.feature_row(1)[0], 3.0f);
}

TEST(LoadGraph, DuplicateEdgesCollapse) {
  TempDir dir;
  write_file(dir / "e.tsv", "# header comment\n0\t1\n0\t1\n");
  write_file(dir / "f.csv", "0\n0\n");
  write_file(dir / "l.csv", "0\n0\n");
  Graph g = load_graph(dir / "e.tsv", dir / "f.csv", dir / "l.csv", 2);
  EXPECT_EQ(g.num_edges(), 2u);
  EXPECT_EQ(g.adjacency().degree(0), 1u);
}

TEST(LoadGraph, PathGraphRowPointers) {
  TempDir dir;
  write_file(dir / "e.tsv", "0\t1\n1\t2\n2\t3\n3\t4\n4\t5\n");
  write_file(dir / "f.csv", "0\n0\n0\n0\n0\n0\n");
  write_file(dir / "l.csv", "0\n0\n0\n0\n0\n0\n");
  Graph g = load_graph(dir / "e.tsv", dir / "f.csv", dir / "l.csv", 6);
  // Hand-enumerated: endpoints have one neighbor, interior nodes two.
  EXPECT_EQ(g.adjacency().row_ptr, (std::vector<std::uint64_t>{0, 1, 3, 5, 7, 9, 10}));
}

TEST(LoadGraph, OutOfRangeIdReportsLine) {
  TempDir dir;
  write_file(dir / "e.tsv", "0\t1\n1\t7\n");
  write_file(dir / "f.csv", "0\n0\n");
  write_file(dir / "l.csv", "0\n0\n");
  try {
    load_graph(dir / "e.tsv", dir / "f.csv", dir / "l.csv", 2);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(LoadGraph, FeatureRowMismatchIsDimensionError) {
  TempDir dir;
  write_file(dir / "e.tsv", "0\t1\n");
  write_file(dir / "f.csv", "0\n");
  write_file(dir / "l.csv", "0\n0\n");
  EXPECT_THROW(load_graph(dir / "e.tsv", dir / "f.csv", dir / "l.csv", 2), DimensionError);
}

TEST(LoadGraph, LabelRowMismatchIsDimensionError) {
  TempDir dir;
  write_file(dir / "e.tsv", "0\t1\n");
  write_file(dir / "f.csv", "0\n0\n");
  write_file(dir / "l.csv", "0\n0\n1\n");
  EXPECT_THROW(load_graph(dir / "e.tsv", dir / "f.csv", dir / "l.csv", 2), DimensionError);
}

TEST(LoadGraph, SaveRoundTrip) {
  Graph g = spex::test::make_graph(7, spex::test::path_edges(7), 3, 2, 4,
                                   {Split::kTrain, Split::kVal, Split::kTest, Split::kTrain,
                                    Split::kTrain, Split::kVal, Split::kTest});
  TempDir dir;
  save_graph(g, dir / "e.tsv", dir / "f.csv", dir / "l.csv", dir / "s.txt");
  LoadOptions opt;
  opt.split_path = dir / "s.txt";
  opt.num_classes = 2;
  Graph h = load_graph(dir / "e.tsv", dir / "f.csv", dir / "l.csv", 7, opt);
  EXPECT_EQ(h.adjacency(), g.adjacency());
  EXPECT_TRUE(std::equal(g.labels().begin(), g.labels().end(), h.labels().begin()));
  EXPECT_TRUE(std::equal(g.split().begin(), g.split().end(), h.split().begin()));
  for (std::size_t i = 0; i < g.features().size(); ++i)
    EXPECT_NEAR(g.features()[i], h.features()[i], 1e-5);
}

TEST(Expander, SingleCycleOnSixNodesIsTwoRegular) {
  ExpanderOptions opt;
  opt.num_cycles = 1;
  opt.min_gap = 0.0;
  ExpanderGraph x = build_expander(6, opt);
  Csr a = x.adjacency();
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(a.degree(i), 2u);
  ASSERT_EQ(x.cycles.size(), 1u);
  std::vector<NodeId> sorted = x.cycles[0];
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<NodeId>{0, 1, 2, 3, 4, 5}));
}

TEST(Expander, SingleEvenCycleNeverReachesPositiveGap) {
  ExpanderOptions opt;
  opt.num_cycles = 1;
  opt.min_gap = 0.05;
  opt.max_retries = 8;
  try {
    build_expander(6, opt);
    FAIL() << "expected ConstructionError";
  } catch (const ConstructionError& e) {
    EXPECT_NEAR(e.best(), 0.0, 1e-9);
  }
}

TEST(Expander, ThreeCyclesOnHundredOneNodes) {
  ExpanderOptions opt;
  opt.num_cycles = 3;
  opt.min_gap = 0.05;
  ExpanderGraph x = build_expander(101, opt);
  Csr a = x.adjacency();
  for (std::size_t i = 0; i < 101; ++i) EXPECT_LE(a.degree(i), 6u);
  const double oracle = gap_oracle(a);
  EXPECT_GE(oracle, 0.05);
  EXPECT_NEAR(x.gap, oracle, 1e-8);
}

TEST(Expander, Deterministic) {
  ExpanderOptions opt;
  opt.seed = 42;
  EXPECT_EQ(build_expander(64, opt).cycles, build_expander(64, opt).cycles);
  ExpanderOptions other = opt;
  other.seed = 43;
  EXPECT_NE(build_expander(64, opt).cycles, build_expander(64, other).cycles);
}

TEST(Expander, RejectsTinyInputs) {
  ExpanderOptions opt;
  EXPECT_THROW(build_expander(2, opt), Error);
  opt.num_cycles = 0;
  EXPECT_THROW(build_expander(10, opt), Error);
}

TEST(Expander, JsonRoundTrip) {
  ExpanderOptions opt;
  opt.seed = 9;
  ExpanderGraph x = build_expander(30, opt);
  TempDir dir;
  save_expander(x, dir / "x.json");
  ExpanderGraph y = load_expander(dir / "x.json");
  EXPECT_EQ(y.n, x.n);
  EXPECT_EQ(y.seed, x.seed);
  EXPECT_EQ(y.cycles, x.cycles);
  EXPECT_NEAR(y.gap, x.gap, 1e-12);
}

TEST(SpectralGap, CompleteGraphK4) {
  EXPECT_NEAR(spectral_gap(complete(4)), 2.0 / 3.0, 1e-10);
  EXPECT_NEAR(gap_oracle(complete(4)), 2.0 / 3.0, 1e-10);
}

TEST(SpectralGap, FourCycleIsBipartite) { EXPECT_NEAR(spectral_gap(cycle(4)), 0.0, 1e-10); }

TEST(SpectralGap, TwoTrianglesDisconnected) {
  Csr c = Csr::from_edges(6, {{0, 1}, {1, 2}, {0, 2}, {3, 4}, {4, 5}, {3, 5}}, true);
  EXPECT_NEAR(spectral_gap(c), 0.0, 1e-10);
}

TEST(SpectralGap, MatchesJacobiOracleOnRandomGraphs) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ExpanderOptions opt;
    opt.seed = seed;
    opt.num_cycles = 2;
    opt.min_gap = 0.0;
    Csr a = build_expander(40, opt).adjacency();
    EXPECT_NEAR(spectral_gap(a), gap_oracle(a), 1e-8);
  }
}

TEST(SpectralGap, IterativeAgreesWithDense) {
  ExpanderOptions opt;
  opt.seed = 3;
  Csr a = build_expander(80, opt).adjacency();
  EXPECT_NEAR(spectral_gap_iterative(a, 1e-9), spectral_gap(a), 1e-4);
}

TEST(Augment, SingleEdgeWithoutExpander) {
  Graph g = spex::test::make_graph(2, {{0, 1}}, 1, 1, 0);
  AttentionPattern p = augment(g, ExpanderGraph{}, 2);
  ASSERT_EQ(p.num_layers(), 2u);
  const LayerPattern& l = p.layer(0);
  EXPECT_EQ(l.csr.row_ptr, (std::vector<std::uint64_t>{0, 2, 4}));
  EXPECT_EQ(l.csr.col_idx, (std::vector<NodeId>{0, 1, 0, 1}));
  EXPECT_EQ(l.types, (std::vector<EdgeType>{EdgeType::kSelfLoop, EdgeType::kGraph,
                                            EdgeType::kGraph, EdgeType::kSelfLoop}));
  EXPECT_EQ(p.layer(1), p.layer(0));
}

TEST(Augment, GraphTypeWinsOverExpander) {
  Graph g = spex::test::make_graph(3, {{0, 1}}, 1, 1, 0);
  ExpanderGraph x;
  x.n = 3;
  x.cycles = {{0, 1, 2}};
  AttentionPattern p = augment(g, x, 1);
  const LayerPattern& l = p.layer(0);
  EXPECT_EQ(l.types[l.csr.find(0, 1)], EdgeType::kGraph);
  EXPECT_EQ(l.types[l.csr.find(1, 0)], EdgeType::kGraph);
  EXPECT_EQ(l.types[l.csr.find(1, 2)], EdgeType::kExpander);
  EXPECT_EQ(l.types[l.csr.find(2, 0)], EdgeType::kExpander);
  EXPECT_EQ(l.types[l.csr.find(2, 2)], EdgeType::kSelfLoop);
}

TEST(Augment, PathPlusSixCycleEdgeCount) {
  Graph g = spex::test::make_graph(6, spex::test::path_edges(6), 1, 1, 0);
  ExpanderOptions opt;
  opt.num_cycles = 1;
  opt.min_gap = 0.0;
  opt.seed = 11;
  ExpanderGraph x = build_expander(6, opt);
  // Count directed cycle edges that coincide with path edges.
  std::set<std::pair<NodeId, NodeId>> path;
  for (auto [a, b] : spex::test::path_edges(6)) {
    path.insert({a, b});
    path.insert({b, a});
  }
  std::set<std::pair<NodeId, NodeId>> cyc;
  const auto& c = x.cycles[0];
  for (std::size_t i = 0; i < 6; ++i) {
    NodeId a = c[i], b = c[(i + 1) % 6];
    cyc.insert({a, b});
    cyc.insert({b, a});
  }
  std::size_t overlaps = 0;
  for (const auto& e : cyc) overlaps += path.count(e);
  AttentionPattern p = augment(g, x, 1);
  EXPECT_EQ(p.edges_per_layer(), 10 + (12 - overlaps) + 6);
}

TEST(Augment, SizeMismatchRejected) {
  Graph g = spex::test::make_graph(4, spex::test::path_edges(4), 1, 1, 0);
  ExpanderOptions opt;
  opt.min_gap = 0.0;
  EXPECT_THROW(augment(g, build_expander(5, opt), 1), Error);
}

TEST(Augment, PatternTextRoundTrip) {
  Graph g = spex::test::make_graph(10, spex::test::path_edges(10), 1, 1, 0);
  ExpanderOptions opt;
  opt.min_gap = 0.0;
  AttentionPattern p = augment(g, build_expander(10, opt), 1);
  TempDir dir;
  save_pattern(p.layer(0), dir / "p.tsv");
  EXPECT_EQ(load_pattern(dir / "p.tsv", 10), p.layer(0));
}
