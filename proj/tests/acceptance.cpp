// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "spex/analysis.hpp"
#include "spex/attention.hpp"
#include "spex/datasets.hpp"
#include "spex/expander.hpp"
#include "spex/pipeline.hpp"
#include "spex/sampler.hpp"

using namespace spex;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

struct BridgeSetup {
  Graph graph;
  BridgeLayout layout;
  AttentionPattern pattern;
};

BridgeSetup bridge_setup(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.seed = seed;
  BridgeSetup s;
  s.graph = gen_bridge_task(spec, &s.layout);
  ExpanderOptions eo;
  eo.seed = seed;
  s.pattern = augment(s.graph, build_expander(s.graph.num_nodes(), eo), 2);
  return s;
}

TrainConfig estimator_config(std::uint64_t seed) {
  TrainConfig c = TrainConfig::estimator_defaults();
  c.seed = seed;
  return c;
}

TrainConfig final_config(std::uint64_t seed) {
  TrainConfig c = TrainConfig::final_defaults();
  c.seed = seed;
  return c;
}

// 1. Sampled training at full degree tracks full-graph training.
Outcome full_degree_equivalence() {
  BridgeSetup b = bridge_setup(0);
  const ScoreSet scores = uniform_scores(b.pattern);
  TrainConfig cfg = final_config(1);
  cfg.epochs = 20;
  cfg.norm = NormKind::kLayer;
  cfg.dropout = 0.0;
  cfg.degs = max_degrees(scores);
  const TrainResult sampled = train_final(b.graph, scores, cfg);
  cfg.full_graph_reference = true;
  const TrainResult full = train_final(b.graph, scores, cfg);
  double worst = 0.0;
  for (std::size_t e = 0; e < full.history.size(); ++e) {
    const double ref = full.history[e].train_loss;
    worst = std::max(worst, std::abs(sampled.history[e].train_loss - ref) / std::abs(ref));
  }
  const bool same_len = sampled.history.size() == full.history.size() && !full.history.empty();
  return {same_len && worst <= 1e-4,
          fmt("n=%zu, %zu epochs, max relative loss difference %.3g (tol 1e-4)", b.graph.num_nodes(),
              full.history.size(), worst)};
}

// 2. Reverse-mode gradients against central differences in double precision.
Outcome gradient_check() {
  std::vector<std::pair<NodeId, NodeId>> edges{{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {0, 3}};
  Rng rng(11);
  std::vector<float> feats(6 * 3);
  for (auto& v : feats) v = static_cast<float>(rng.normal());
  Graph g(Csr::from_edges(6, edges, true), feats, 3, {0, 1, 2, 0, 1, 2},
          std::vector<Split>(6, Split::kTrain), TaskKind::kMulticlass, 3);
  ExpanderOptions eo;
  eo.num_cycles = 1;
  eo.min_gap = 0.0;
  eo.seed = 2;
  const AttentionPattern p = augment(g, build_expander(6, eo), 2);
  const auto x = feature_matrix<double>(g);
  const std::vector<std::uint32_t> rows{0, 1, 2, 3, 4, 5};
  const std::vector<std::int64_t> y(g.labels().begin(), g.labels().end());
  double worst = 0.0;
  std::size_t checked = 0;
  for (bool vnorm : {true, false}) {
    ModelConfig mc;
    mc.in_dim = 3;
    mc.width = 4;
    mc.layers = 2;
    mc.out_dim = 3;
    mc.norm = NormKind::kLayer;
    mc.normalize_v = vnorm;
    Network<double> net(mc, 5);
    ForwardOptions fo;
    fo.temperature = 0.7;
    const ParamStore<double> base = net.params();
    auto loss_of = [&](Network<double>& n, ad::Tape<double>& t, Network<double>::Bound& b) {
      auto r = n.forward_full(t, b, x, p, fo);
      return ad::cross_entropy(r.logits, std::span<const std::uint32_t>(rows), std::span<const std::int64_t>(y));
    };
    ad::Tape<double> tape;
    auto bound = net.bind(tape);
    auto loss = loss_of(net, tape, bound);
    tape.backward(loss);
    const auto grads = net.gradients(tape, bound);
    const double h = 1e-5;
    for (std::size_t k = 0; k < base.size(); ++k) {
      if (!base.entries()[k].trainable) continue;
      for (std::size_t i = 0; i < base.entries()[k].value.size(); ++i) {
        auto eval = [&](double delta) {
          Network<double> probe(mc, base);
          probe.params().entries()[k].value[i] += delta;
          ad::Tape<double> t;
          auto b = probe.bind(t);
          return loss_of(probe, t, b).value()[0];
        };
        const double fd = (eval(h) - eval(-h)) / (2 * h);
        const double an = grads[k][i];
        worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
        ++checked;
      }
    }
  }
  return {worst < 1e-3, fmt("%zu parameters, max relative error %.3g (tol 1e-3)", checked, worst)};
}

// 3. Weighted sampling law.
Outcome reservoir_law() {
  const std::vector<float> w1{0.9f, 0.05f, 0.05f};
  Rng rng(3);
  const int draws = 100000;
  std::array<int, 3> counts{};
  for (int t = 0; t < draws; ++t) ++counts[reservoir_sample(w1, 1, rng).at(0)];
  double worst_freq = 0.0, chi2 = 0.0;
  for (int j = 0; j < 3; ++j) {
    const double expect = w1[j] * draws;
    worst_freq = std::max(worst_freq, std::abs(counts[j] / double(draws) - w1[j]));
    chi2 += (counts[j] - expect) * (counts[j] - expect) / expect;
  }
  const double p_value = std::exp(-chi2 / 2.0);  // two degrees of freedom

  // Oracle: sequential weighted draws without replacement.
  const std::vector<double> w2{0.4, 0.3, 0.2, 0.1};
  const std::vector<float> w2f(w2.begin(), w2.end());
  const int big = 1000000;
  std::map<std::pair<int, int>, double> oracle, emp;
  Rng orng(4), srng(5);
  for (int t = 0; t < big; ++t) {
    std::vector<double> w = w2;
    int pick[2];
    for (int d = 0; d < 2; ++d) {
      double u = orng.uniform(0.0, std::accumulate(w.begin(), w.end(), 0.0));
      int j = 0;
      while (j < 3 && u >= w[j]) u -= w[j++];
      pick[d] = j;
      w[j] = 0.0;
    }
    oracle[{std::min(pick[0], pick[1]), std::max(pick[0], pick[1])}] += 1.0 / big;
    const auto s = reservoir_sample(w2f, 2, srng);
    emp[{int(s[0]), int(s[1])}] += 1.0 / big;
  }
  std::set<std::pair<int, int>> keys;
  for (auto& [k, v] : oracle) keys.insert(k);
  for (auto& [k, v] : emp) keys.insert(k);
  double tv = 0.0;
  for (const auto& k : keys) tv += std::abs(oracle[k] - emp[k]);
  tv *= 0.5;
  const bool pass = worst_freq <= 0.01 && p_value > 0.001 && tv < 0.02;
  return {pass, fmt("k=1 max |freq-w| %.4f (tol 0.01), chi2 p %.3g (> 0.001); k=2 TV %.4f (tol 0.02)",
                    worst_freq, p_value, tv)};
}

// 4. Temperature schedule values.
Outcome temperature_schedule() {
  TemperatureSchedule s;
  s.lambda = 5.0;
  s.gamma = 0.99;
  s.floor = 0.05;
  const double t5 = temperature_at(s, 5), t6 = temperature_at(s, 6), tinf = temperature_at(s, 1e7);
  return {t5 == 1.0 && t6 == 0.99 && tinf == 0.05,
          fmt("tau(5)=%.17g tau(6)=%.17g tau(1e7)=%.17g (exact 1, 0.99, 0.05)", t5, t6, tinf)};
}

// 5. Narrow estimators agree with the wide reference better than baselines.
Outcome consistency_direction() {
  BridgeSetup b = bridge_setup(0);
  ConsistencyConfig cc;
  cc.widths = {4, 32};
  cc.runs_per_width = 10;
  cc.base = estimator_config(0);
  cc.options.reference_width = 32;
  const ConsistencyReport rep = consistency_study(b.graph, b.pattern, cc);
  const auto w4 = rep.source_index("w4"), uni = rep.source_index("uniform"), rnd = rep.source_index("random");
  std::size_t cells = 0, ok = 0;
  for (std::size_t l = 0; l < rep.distances[w4].size(); ++l)
    for (std::size_t i = 0; i < rep.distances[w4][l].size(); ++i) {
      ++cells;
      const double d = rep.distances[w4][l][i];
      ok += d < rep.distances[uni][l][i] && d < rep.distances[rnd][l][i];
    }
  const double frac = double(ok) / double(cells);
  const bool pooled = rep.pooled_mean(w4) < rep.pooled_mean(uni) && rep.pooled_mean(w4) < rep.pooled_mean(rnd);
  return {frac >= 0.8 && pooled,
          fmt("pooled w4 %.4f, uniform %.4f, random %.4f; cells with w4 below both %.3f (>= 0.8)",
              rep.pooled_mean(w4), rep.pooled_mean(uni), rep.pooled_mean(rnd), frac)};
}

// 6. First-layer attention is smoother than second-layer attention.
Outcome entropy_ordering() {
  int ok = 0;
  std::string per;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    BridgeSetup b = bridge_setup(seed);
    const TrainResult r = train_estimator(b.graph, b.pattern, estimator_config(seed));
    const auto h = attention_entropy(r.scores);
    ok += h[0] >= h[1];
    per += fmt(" %llu:%.2f/%.2f", static_cast<unsigned long long>(seed), h[0], h[1]);
  }
  return {ok >= 8, fmt("%d/10 seeds with H1 >= H2 (need 8);%s", ok, per.c_str())};
}

// 7. Entry sampling error decays at rate s^-1/2 and preserves support.
Outcome spectral_sampling() {
  std::vector<double> xs, ys;
  bool support_ok = true;
  for (int e = 8; e <= 16; ++e) {
    std::vector<double> errs;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng mr(seed);
      const SparseMatrix a = random_score_matrix(64, 16, 2.0, mr);
      Rng sr(derive_seed(seed, {static_cast<std::uint64_t>(e)}));
      const SampledMatrix out = spectral_sample_check(a, std::size_t{1} << e, sr);
      errs.push_back(out.relative_error);
      for (std::size_t i = 0; i < 64; ++i)
        for (NodeId j : out.b.csr.row(i)) support_ok &= a.csr.find(i, j) != Csr::npos;
    }
    xs.push_back(std::ldexp(1.0, e));
    ys.push_back(median(errs));
  }
  const double slope = loglog_slope(xs, ys);
  return {support_ok && slope >= -0.65 && slope <= -0.35,
          fmt("slope %.3f (-0.5 +- 0.15), median error %.3f at 2^8 to %.4f at 2^16, support %s", slope,
              ys.front(), ys.back(), support_ok ? "contained" : "VIOLATED")};
}

// 8. Wider projections shrink the softmax ratio deviation.
Outcome jlt_trend() {
  const std::size_t n = 64, big_d = 512;
  Rng rng(5);
  Tensor<double> q(Shape{n, big_d}), k(Shape{n, big_d});
  for (auto* m : {&q, &k})
    for (std::size_t i = 0; i < n; ++i) {
      double norm = 0.0;
      for (std::size_t j = 0; j < big_d; ++j) norm += ((*m)(i, j) = rng.normal()) * (*m)(i, j);
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < big_d; ++j) (*m)(i, j) /= norm;
    }
  std::vector<std::pair<NodeId, NodeId>> e;
  for (NodeId i = 0; i < n; ++i)
    for (NodeId j = 0; j < n; ++j) e.emplace_back(i, j);
  const Csr full = Csr::from_edges(n, e, false);
  const double m16 = median(jlt_compress_check(q, k, full, 16, 50, 1));
  const double m256 = median(jlt_compress_check(q, k, full, 256, 50, 2));
  const double ratio = m256 / m16;
  return {ratio <= 0.5 * 1.3, fmt("median deviation d=16 %.4f, d=256 %.4f, ratio %.3f (<= 0.65)", m16, m256, ratio)};
}

struct SeedRun {
  BridgeSetup setup;
  TrainResult estimator;
};

// 9. Attention-guided sampling beats uniform sampling.
Outcome ablation_direction(SeedRun* keep) {
  int wins = 0;
  std::string per;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    BridgeSetup b = bridge_setup(seed);
    TrainResult est = train_estimator(b.graph, b.pattern, estimator_config(seed));
    TrainConfig f = final_config(seed);
    const TrainResult attn = train_final(b.graph, est.scores, f);
    f.ablation = Ablation::kUniform;
    const TrainResult uni = train_final(b.graph, est.scores, f);
    wins += attn.test_metric >= uni.test_metric + 0.05;
    per += fmt(" %llu:%.2f/%.2f", static_cast<unsigned long long>(seed), attn.test_metric, uni.test_metric);
    if (seed == 0 && keep) *keep = SeedRun{std::move(b), std::move(est)};
  }
  return {wins >= 8, fmt("%d/10 seeds with attention >= uniform + 0.05 (need 8);%s", wins, per.c_str())};
}

// 10. Inference does not depend on the batch size.
Outcome batch_invariance(const SeedRun* have) {
  SeedRun run;
  if (have && !have->estimator.scores.layers.empty()) {
    run = *have;
  } else {
    run.setup = bridge_setup(0);
    run.estimator = train_estimator(run.setup.graph, run.setup.pattern, estimator_config(0));
  }
  const Graph& g = run.setup.graph;
  const ScoreSet& s = run.estimator.scores;
  TrainConfig f = final_config(0);
  f.epochs = 10;
  const TrainResult r = train_final(g, s, f);
  const auto test = g.nodes_in(Split::kTest);
  const auto degs = max_degrees(s);
  PredictOptions one;
  one.batch_size = 1;
  PredictOptions all;
  all.batch_size = test.size();
  const Prediction a = predict(r.model, r.params, g, s, degs, test, one);
  const Prediction b = predict(r.model, r.params, g, s, degs, test, all);
  double worst = 0.0;
  for (std::size_t k = 0; k < a.logits.size(); ++k)
    worst = std::max(worst, std::abs(double(a.logits[k]) - b.logits[k]) / std::max(1.0, std::abs(double(b.logits[k]))));
  return {worst <= 1e-5, fmt("%zu test nodes, max logit difference %.3g (tol 1e-5)", test.size(), worst)};
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

// 11. Edge-percent arithmetic on fixtures.
Outcome edge_percent_fixtures() {
  ScoreSet a;
  a.layers.push_back(rows_of_lengths({3, 5, 10}));
  a.layers.push_back(rows_of_lengths({4, 4, 4}));
  const double full = edge_percent(a, max_degrees(a), 18);
  ScoreSet b;
  b.layers.push_back(rows_of_lengths({10, 10, 10, 10}));
  const double tenth = edge_percent(b, {1}, 40);
  ScoreSet c;
  c.layers.push_back(rows_of_lengths({3, 5, 10}));
  const double mixed = edge_percent(c, {5}, 18);
  ScoreSet one;
  one.layers.push_back(rows_of_lengths({3, 5, 10}));
  const double all = edge_percent(one, max_degrees(one), 18);
  const bool pass = all == 1.0 && tenth == 0.1 && mixed == 13.0 / 18.0 && full == (18.0 + 12.0) / (2.0 * 18.0);
  return {pass, fmt("max degree %.17g (1), one of ten %.17g (0.1), mixed %.17g (13/18), two layers %.17g (30/36)",
                    all, tenth, mixed, full)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  auto want = [&](int c) { return wanted.empty() || wanted.count(c) > 0; };

  SeedRun seed0;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"full-degree equivalence", full_degree_equivalence},
      {"gradient correctness", gradient_check},
      {"reservoir sampling law", reservoir_law},
      {"temperature schedule", temperature_schedule},
      {"consistency direction", consistency_direction},
      {"entropy ordering", entropy_ordering},
      {"spectral sampling rate", spectral_sampling},
      {"JLT compression trend", jlt_trend},
      {"ablation direction", [&] { return ablation_direction(&seed0); }},
      {"batch-size invariance", [&] { return batch_invariance(&seed0); }},
      {"edge-percent arithmetic", edge_percent_fixtures},
  };
  int failed = 0;
  for (std::size_t c = 0; c < criteria.size(); ++c) {
    const int id = static_cast<int>(c + 1);
    if (!want(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[c].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("criterion %2d %s  %s: %s [%.1fs]\n", id, o.pass ? "PASS" : "FAIL", criteria[c].first,
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
