#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "spex/datasets.hpp"
#include "spex/error.hpp"
#include "spex/expander.hpp"
#include "spex/pipeline.hpp"
#include "support.hpp"

using namespace spex;

namespace {

struct Fixture {
  Graph graph;
  AttentionPattern pattern;
};

Fixture small_sbm(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.generator = Generator::kHomophilySbm;
  spec.num_blocks = 3;
  spec.block_size = 14;
  spec.feature_dim = 4;
  spec.seed = seed;
  Graph g = generate(spec);
  ExpanderOptions eo;
  eo.seed = seed;
  eo.min_gap = 0.0;
  AttentionPattern p = augment(g, build_expander(g.num_nodes(), eo), 2);
  return {std::move(g), std::move(p)};
}

TrainConfig quick_estimator(std::size_t epochs) {
  TrainConfig c = TrainConfig::estimator_defaults();
  c.epochs = epochs;
  c.seed = 3;
  return c;
}

TrainConfig quick_final(std::size_t epochs, std::vector<std::size_t> degs) {
  TrainConfig c = TrainConfig::final_defaults();
  c.epochs = epochs;
  c.width = 8;
  c.seed = 5;
  c.degs = std::move(degs);
  c.batch_size = 8;
  return c;
}

ScoreLayer rows_of_lengths(const std::vector<std::size_t>& lengths) {
  ScoreLayer layer;
  for (std::size_t len : lengths) {
    for (std::size_t k = 0; k < len; ++k) {
      layer.csr.col_idx.push_back(static_cast<NodeId>(k));
      layer.scores.push_back(1.0f / static_cast<float>(len));
    }
    layer.csr.row_ptr.push_back(layer.csr.col_idx.size());
  }
  return layer;
}

}  // namespace

// ---- estimator ------------------------------------------------------------------------

TEST(Estimator, OneEpochScoresAreRowDistributionsOnPattern) {
  auto f = small_sbm(1);
  TrainResult r = train_estimator(f.graph, f.pattern, quick_estimator(1));
  ASSERT_EQ(r.scores.num_layers(), 2u);
  EXPECT_NO_THROW(r.scores.validate(1e-5));
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(r.scores.layers[l].csr, f.pattern.layer(l).csr);
    EXPECT_EQ(r.scores.layers[l].types, f.pattern.layer(l).types);
  }
  EXPECT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best_epoch, 1u);
  EXPECT_EQ(r.scores.estimator_width, 4u);
}

TEST(Estimator, SameSeedSameScores) {
  auto f = small_sbm(2);
  const auto cfg = quick_estimator(4);
  TrainResult a = train_estimator(f.graph, f.pattern, cfg);
  TrainResult b = train_estimator(f.graph, f.pattern, cfg);
  for (std::size_t l = 0; l < 2; ++l) EXPECT_EQ(a.scores.layers[l].scores, b.scores.layers[l].scores);
}

TEST(Estimator, PatternIsNotMutated) {
  auto f = small_sbm(3);
  const AttentionPattern before = f.pattern;
  train_estimator(f.graph, f.pattern, quick_estimator(2));
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(f.pattern.layer(l).csr, before.layer(l).csr);
    EXPECT_EQ(f.pattern.layer(l).types, before.layer(l).types);
  }
}

TEST(Estimator, ReturnsBestValidationEpoch) {
  auto f = small_sbm(4);
  TrainResult r = train_estimator(f.graph, f.pattern, quick_estimator(25));
  ASSERT_EQ(r.history.size(), 25u);
  double best = -1.0;
  for (const auto& rec : r.history) best = std::max(best, rec.val_metric);
  EXPECT_EQ(r.best_val_metric, best);
  const EpochRecord& chosen = r.history.at(r.best_epoch - 1);
  EXPECT_EQ(chosen.val_metric, best);
  EXPECT_EQ(chosen.temperature, r.best_temperature);
  for (const auto& rec : r.history)
    if (rec.val_metric == best) EXPECT_GE(rec.val_loss, chosen.val_loss);
}

TEST(Estimator, AnnealsTemperatureOnSchedule) {
  auto f = small_sbm(5);
  TrainConfig cfg = quick_estimator(12);
  cfg.temperature.lambda = 4;
  cfg.temperature.gamma = 0.9;
  cfg.temperature.floor = 0.5;
  TrainResult r = train_estimator(f.graph, f.pattern, cfg);
  for (const auto& rec : r.history) {
    const double t = static_cast<double>(rec.epoch);
    const double want = t <= 4 ? 1.0 : std::max(std::pow(0.9, t - 4), 0.5);
    EXPECT_DOUBLE_EQ(rec.temperature, want);
  }
  cfg.ablation = Ablation::kNoTemp;
  TrainResult flat = train_estimator(f.graph, f.pattern, cfg);
  for (const auto& rec : flat.history) EXPECT_EQ(rec.temperature, 1.0);
}

TEST(Estimator, RejectsWrongPhaseAndShapes) {
  auto f = small_sbm(6);
  TrainConfig wrong = TrainConfig::final_defaults();
  EXPECT_THROW(train_estimator(f.graph, f.pattern, wrong), ConfigError);
  TrainConfig three = quick_estimator(1);
  three.layers = 3;
  EXPECT_THROW(train_estimator(f.graph, f.pattern, three), ConfigError);
}

TEST(Estimator, BridgeTaskScoresFavorBridges) {
  SyntheticSpec spec;
  BridgeLayout layout;
  Graph g = gen_bridge_task(spec, &layout);
  ExpanderOptions eo;
  AttentionPattern pattern = augment(g, build_expander(g.num_nodes(), eo), 2);
  TrainResult r = train_estimator(g, pattern, TrainConfig::estimator_defaults());
  EXPECT_GT(r.best_val_metric, 0.9);
  double bridge_sum = 0.0, other_sum = 0.0;
  std::size_t bridge_n = 0, other_n = 0;
  for (const auto& [a, b] : layout.bridges) {
    for (auto [u, v] : {std::pair{a, b}, std::pair{b, a}}) {
      for (const auto& layer : r.scores.layers) {
        const auto row = layer.csr.row(u);
        const auto sc = layer.row_scores(u);
        for (std::size_t k = 0; k < row.size(); ++k) {
          const std::size_t e = layer.csr.row_ptr[u] + k;
          if (row[k] == v) {
            bridge_sum += sc[k];
            ++bridge_n;
          } else if (layer.types[e] == EdgeType::kGraph) {
            other_sum += sc[k];
            ++other_n;
          }
        }
      }
    }
  }
  ASSERT_GT(bridge_n, 0u);
  ASSERT_GT(other_n, 0u);
  EXPECT_GT(bridge_sum / double(bridge_n), other_sum / double(other_n));
}

// ---- final network --------------------------------------------------------------------

TEST(Final, ZeroEpochsReturnsInitialization) {
  auto f = small_sbm(7);
  ScoreSet s = uniform_scores(f.pattern);
  TrainConfig cfg = quick_final(0, {2, 2});
  TrainResult r = train_final(f.graph, s, cfg);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(r.best_epoch, 0u);
  Network<float> fresh(cfg.model_config(f.graph), derive_seed(cfg.seed, {0x1a17}));
  ASSERT_EQ(r.params.entries().size(), fresh.params().entries().size());
  for (std::size_t k = 0; k < r.params.entries().size(); ++k)
    EXPECT_EQ(r.params.entries()[k].value.storage(), fresh.params().entries()[k].value.storage());
}

TEST(Final, FullDegreeMatchesFullGraphTraining) {
  auto f = small_sbm(8);
  ScoreSet s = uniform_scores(f.pattern);
  TrainConfig cfg = quick_final(4, max_degrees(s));
  cfg.norm = NormKind::kLayer;
  cfg.dropout = 0.0;
  cfg.double_precision = true;
  TrainResult sampled = train_final(f.graph, s, cfg);
  cfg.full_graph_reference = true;
  TrainResult full = train_final(f.graph, s, cfg);
  ASSERT_EQ(sampled.history.size(), full.history.size());
  for (std::size_t e = 0; e < full.history.size(); ++e) {
    const double a = sampled.history[e].train_loss, b = full.history[e].train_loss;
    EXPECT_NEAR(a, b, 1e-4 * std::max(1.0, std::abs(b))) << "epoch " << e + 1;
  }
}

TEST(Final, DeterministicForSeed) {
  auto f = small_sbm(9);
  ScoreSet s = uniform_scores(f.pattern);
  TrainConfig cfg = quick_final(3, {3, 3});
  TrainResult a = train_final(f.graph, s, cfg);
  TrainResult b = train_final(f.graph, s, cfg);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
}

TEST(Final, PrefetchGivesSameRun) {
  auto f = small_sbm(10);
  ScoreSet s = uniform_scores(f.pattern);
  TrainConfig cfg = quick_final(3, {3, 3});
  TrainResult a = train_final(f.graph, s, cfg);
  cfg.prefetch = true;
  TrainResult b = train_final(f.graph, s, cfg);
  for (std::size_t e = 0; e < a.history.size(); ++e) EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
}

TEST(Final, AblationsRun) {
  auto f = small_sbm(11);
  ScoreSet s = train_estimator(f.graph, f.pattern, quick_estimator(3)).scores;
  for (Ablation a : {Ablation::kUniform, Ablation::kMax}) {
    TrainConfig cfg = quick_final(2, {2, 2});
    cfg.ablation = a;
    TrainResult r = train_final(f.graph, s, cfg);
    EXPECT_EQ(r.history.size(), 2u);
  }
}

TEST(Final, RejectsBadConfig) {
  auto f = small_sbm(12);
  ScoreSet s = uniform_scores(f.pattern);
  EXPECT_THROW(train_final(f.graph, s, quick_final(1, {2})), ConfigError);
  EXPECT_THROW(train_final(f.graph, s, quick_final(1, {2, 0})), ConfigError);
  EXPECT_THROW(train_final(f.graph, s, quick_estimator(1)), ConfigError);
}

TEST(Ablation, UniformEffectiveRowsAreUniform) {
  auto f = small_sbm(13);
  ScoreSet s = train_estimator(f.graph, f.pattern, quick_estimator(2)).scores;
  ScoreSet u = effective_scores(s, Ablation::kUniform);
  for (const auto& layer : u.layers)
    for (std::size_t i = 0; i < layer.csr.num_rows(); ++i)
      for (float v : layer.row_scores(i)) EXPECT_FLOAT_EQ(v, 1.0f / float(layer.csr.degree(i)));
  ScoreSet same = effective_scores(s, Ablation::kMax);
  EXPECT_EQ(same.layers[0].scores, s.layers[0].scores);
}

TEST(Ablation, NamesRoundTrip) {
  for (Ablation a : {Ablation::kNone, Ablation::kUniform, Ablation::kMax, Ablation::kNoTemp,
                     Ablation::kNoVnorm})
    EXPECT_EQ(ablation_from_string(to_string(a)), a);
  EXPECT_THROW(ablation_from_string("bogus"), ConfigError);
}

// ---- config ---------------------------------------------------------------------------

TEST(TrainConfigTest, Validation) {
  TrainConfig est = TrainConfig::estimator_defaults();
  EXPECT_NO_THROW(est.validate());
  EXPECT_EQ(est.heads, 1u);
  EXPECT_TRUE(est.width == 4 || est.width == 8);
  est.heads = 2;
  EXPECT_THROW(est.validate(), ConfigError);
  TrainConfig fin = TrainConfig::final_defaults();
  EXPECT_NO_THROW(fin.validate());
  fin.degs = {4};
  EXPECT_THROW(fin.validate(), ConfigError);
  fin.degs = {4, 4};
  fin.width = 30;
  fin.heads = 4;
  EXPECT_THROW(fin.validate(), ConfigError);
}

TEST(TrainConfigTest, JsonRoundTrip) {
  TrainConfig c = TrainConfig::final_defaults();
  c.degs = {3, 7};
  c.seed = 99;
  c.ablation = Ablation::kMax;
  c.temperature.gamma = 0.8;
  nlohmann::json j = c;
  TrainConfig d = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(d), j);
  EXPECT_THROW(nlohmann::json({{"phase", "middle"}}).get<TrainConfig>(), ConfigError);
}

TEST(TrainConfigTest, NormDefaultsPerPhase) {
  EXPECT_EQ(TrainConfig::estimator_defaults().resolved_norm(), NormKind::kLayer);
  EXPECT_EQ(TrainConfig::final_defaults().resolved_norm(), NormKind::kBatch);
  EXPECT_TRUE(TrainConfig::estimator_defaults().normalizes_v());
  EXPECT_FALSE(TrainConfig::final_defaults().normalizes_v());
  EXPECT_FALSE(TrainConfig::final_defaults().anneals());
}

// ---- prediction -----------------------------------------------------------------------

TEST(Predict, BatchSizeDoesNotChangeLogitsAtFullDegree) {
  auto f = small_sbm(14);
  ScoreSet s = uniform_scores(f.pattern);
  TrainConfig cfg = quick_final(2, {2, 2});
  TrainResult r = train_final(f.graph, s, cfg);
  const auto nodes = f.graph.nodes_in(Split::kTest);
  PredictOptions one;
  one.batch_size = 1;
  PredictOptions all;
  all.batch_size = nodes.size();
  const auto degs = max_degrees(s);
  Prediction a = predict(r.model, r.params, f.graph, s, degs, nodes, one);
  Prediction b = predict(r.model, r.params, f.graph, s, degs, nodes, all);
  for (std::size_t k = 0; k < a.logits.size(); ++k)
    EXPECT_NEAR(a.logits[k], b.logits[k], 1e-5 * std::max(1.0f, std::abs(b.logits[k])));
}

TEST(Predict, BatchSizeDoesNotChangeSampledLogits) {
  auto f = small_sbm(15);
  ScoreSet s = uniform_scores(f.pattern);
  TrainResult r = train_final(f.graph, s, quick_final(1, {2, 2}));
  std::vector<NodeId> nodes(f.graph.num_nodes());
  std::iota(nodes.begin(), nodes.end(), 0u);
  PredictOptions one;
  one.batch_size = 1;
  one.seed = 4;
  PredictOptions big = one;
  big.batch_size = 16;
  Prediction a = predict(r.model, r.params, f.graph, s, {2, 2}, nodes, one);
  Prediction b = predict(r.model, r.params, f.graph, s, {2, 2}, nodes, big);
  for (std::size_t k = 0; k < a.logits.size(); ++k)
    EXPECT_NEAR(a.logits[k], b.logits[k], 1e-5 * std::max(1.0f, std::abs(b.logits[k])));
}

TEST(Predict, AveragingSixteenSamplesQuartersStandardError) {
  auto f = small_sbm(16);
  ScoreSet s = uniform_scores(f.pattern);
  TrainConfig cfg = quick_final(0, {1, 1});
  cfg.norm = NormKind::kLayer;
  TrainResult r = train_final(f.graph, s, cfg);
  std::vector<NodeId> nodes(f.graph.num_nodes());
  std::iota(nodes.begin(), nodes.end(), 0u);
  const std::size_t reps = 60, classes = r.model.out_dim;
  auto mean_variance = [&](std::size_t samples) {
    std::vector<double> sum(nodes.size() * classes, 0.0), sq(nodes.size() * classes, 0.0);
    for (std::size_t rep = 0; rep < reps; ++rep) {
      PredictOptions o;
      o.batch_size = nodes.size();
      o.samples = samples;
      o.seed = 1000 * samples + rep;
      Prediction p = predict(r.model, r.params, f.graph, s, {1, 1}, nodes, o);
      for (std::size_t k = 0; k < sum.size(); ++k) {
        sum[k] += p.probs[k];
        sq[k] += double(p.probs[k]) * p.probs[k];
      }
    }
    double total = 0.0;
    for (std::size_t k = 0; k < sum.size(); ++k) {
      const double m = sum[k] / reps;
      total += (sq[k] - reps * m * m) / (reps - 1);
    }
    return total / static_cast<double>(sum.size());
  };
  const double v1 = mean_variance(1), v16 = mean_variance(16);
  ASSERT_GT(v1, 0.0);
  const double ratio = std::sqrt(v16 / v1);
  EXPECT_NEAR(ratio, 0.25, 0.05);
}

TEST(Predict, SelfLoopOnlyNodeDependsOnOwnFeatures) {
  // Node 0 is isolated and there is no expander, so its row is {0}.
  std::vector<std::pair<NodeId, NodeId>> edges{{1, 2}, {2, 3}, {3, 4}};
  Graph g1 = spex::test::make_graph(5, edges, 3, 2, 1);
  std::vector<float> feats(g1.features().begin(), g1.features().end());
  for (std::size_t k = 3; k < feats.size(); ++k) feats[k] += 5.0f;
  Graph g2(g1.adjacency(), feats, 3, {g1.labels().begin(), g1.labels().end()},
           {g1.split().begin(), g1.split().end()}, g1.task(), g1.num_classes());
  AttentionPattern p = augment(g1, ExpanderGraph{}, 2);
  ScoreSet s = uniform_scores(p);
  EXPECT_EQ(s.layers[0].csr.degree(0), 1u);
  TrainConfig cfg = quick_final(0, {2, 2});
  cfg.norm = NormKind::kLayer;
  TrainResult r = train_final(g1, s, cfg);
  Prediction a = predict(r.model, r.params, g1, s, {2, 2}, {0, 2}, {});
  Prediction b = predict(r.model, r.params, g2, s, {2, 2}, {0, 2}, {});
  for (std::size_t c = 0; c < r.model.out_dim; ++c) EXPECT_EQ(a.logits(0, c), b.logits(0, c));
  bool moved = false;
  for (std::size_t c = 0; c < r.model.out_dim; ++c) moved |= a.logits(1, c) != b.logits(1, c);
  EXPECT_TRUE(moved);
}

TEST(Predict, UnknownNodeRejected) {
  auto f = small_sbm(17);
  ScoreSet s = uniform_scores(f.pattern);
  TrainResult r = train_final(f.graph, s, quick_final(0, {2, 2}));
  EXPECT_THROW(predict(r.model, r.params, f.graph, s, {2, 2}, {9999}, {}), ContractViolation);
}

TEST(Predict, AccuracyCountsArgmax) {
  std::vector<std::pair<NodeId, NodeId>> edges{{0, 1}};
  Graph g = spex::test::make_graph(2, edges, 1, 2, 0);
  Prediction p;
  p.nodes = {0, 1};
  p.probs = Tensor<float>::matrix({{0.9f, 0.1f}, {0.8f, 0.2f}});
  EXPECT_DOUBLE_EQ(accuracy(g, p), 0.5);
}

// ---- edge percent ---------------------------------------------------------------------

TEST(EdgePercent, MaxDegreeKeepsEverything) {
  auto f = small_sbm(18);
  ScoreSet s = uniform_scores(f.pattern);
  const std::size_t m_aug = f.pattern.layer(0).csr.num_edges();
  EXPECT_EQ(edge_percent(s, max_degrees(s), m_aug), 1.0);
}

TEST(EdgePercent, OneOfTen) {
  ScoreSet s;
  s.layers.push_back(rows_of_lengths({10, 10, 10, 10}));
  EXPECT_EQ(edge_percent(s, {1}, 40), 0.1);
}

TEST(EdgePercent, MixedRows) {
  ScoreSet s;
  s.layers.push_back(rows_of_lengths({3, 5, 10}));
  EXPECT_EQ(edge_percent(s, {5}, 18), 13.0 / 18.0);
}

TEST(EdgePercent, Contracts) {
  ScoreSet s;
  s.layers.push_back(rows_of_lengths({3, 5, 10}));
  EXPECT_THROW(edge_percent(s, {5, 5}, 18), ContractViolation);
  EXPECT_THROW(edge_percent(s, {5}, 0), ContractViolation);
}

// ---- run directory --------------------------------------------------------------------

TEST(WriteRun, Layout) {
  auto f = small_sbm(19);
  TrainConfig cfg = quick_estimator(3);
  TrainResult r = train_estimator(f.graph, f.pattern, cfg);
  spex::test::TempDir dir;
  write_run(dir.path(), cfg, r, {{"note", 1}});
  for (const char* p : {"config.json", "history.csv", "metrics.json", "scores/scores.txt",
                        "scores/scores.bin", "ckpt/best.ckpt"})
    EXPECT_TRUE(std::filesystem::exists(dir / p)) << p;
  std::ifstream hist(dir / "history.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(hist, line);) ++lines;
  EXPECT_EQ(lines, 4u);
  std::ifstream mj(dir / "metrics.json");
  auto metrics = nlohmann::json::parse(mj);
  EXPECT_EQ(metrics.at("best_epoch").get<std::size_t>(), r.best_epoch);
  EXPECT_EQ(metrics.at("note").get<int>(), 1);
  std::ifstream cj(dir / "config.json");
  auto config = nlohmann::json::parse(cj);
  EXPECT_EQ(model_from_json(config.at("model")).width, r.model.width);
  ScoreSet back = load_scores_binary(dir / "scores/scores.bin");
  EXPECT_EQ(back.layers[1].scores, r.scores.layers[1].scores);
  auto ck = load_checkpoint(dir / "ckpt/best.ckpt");
  EXPECT_EQ(ck.size(), r.params.entries().size());
}
