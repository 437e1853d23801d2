#include <benchmark/benchmark.h>

#include <cmath>
#include <vector>

#include "spex/analysis.hpp"
#include "spex/attention.hpp"
#include "spex/datasets.hpp"
#include "spex/expander.hpp"
#include "spex/pattern.hpp"
#include "spex/sampler.hpp"

namespace {

using namespace spex;

std::vector<float> softmax_row(std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> row(len);
  double sum = 0.0;
  for (auto& x : row) sum += (x = static_cast<float>(std::exp(rng.uniform(-4.0, 4.0))));
  for (auto& x : row) x = static_cast<float>(x / sum);
  return row;
}

void BM_ReservoirSample(benchmark::State& state) {
  const auto row = softmax_row(static_cast<std::size_t>(state.range(0)), 1);
  const auto k = static_cast<std::size_t>(state.range(1));
  Rng rng(2);
  for (auto _ : state) benchmark::DoNotOptimize(reservoir_sample(row, k, rng));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ReservoirSample)->ArgsProduct({{16, 128, 1024, 8192}, {4, 16}});

void BM_TopKPositions(benchmark::State& state) {
  const auto row = softmax_row(static_cast<std::size_t>(state.range(0)), 3);
  for (auto _ : state) benchmark::DoNotOptimize(top_k_positions(row, 16));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TopKPositions)->Arg(128)->Arg(8192);

// Bridge task with a trained-size final network; scores uniform over the
// augmented pattern.
struct ForwardSetup {
  Graph graph;
  AttentionPattern pattern;
  ScoreSet scores;
  ModelConfig model;
  Tensor<float> x;

  ForwardSetup() {
    SyntheticSpec spec;
    graph = gen_bridge_task(spec);
    ExpanderOptions eo;
    pattern = augment(graph, build_expander(graph.num_nodes(), eo), 2);
    scores = uniform_scores(pattern);
    model.in_dim = graph.feature_dim();
    model.width = 32;
    model.out_dim = 1;
    model.norm = NormKind::kLayer;
    x = feature_matrix<float>(graph);
  }
};

const ForwardSetup& forward_setup() {
  static const ForwardSetup s;
  return s;
}

void BM_ForwardFull(benchmark::State& state) {
  const ForwardSetup& s = forward_setup();
  Network<float> net(s.model, 1);
  for (auto _ : state) {
    ad::Tape<float> tape;
    auto bound = net.bind(tape);
    benchmark::DoNotOptimize(net.forward_full(tape, bound, s.x, s.pattern, {}).logits.value());
  }
  state.counters["nodes"] = static_cast<double>(s.graph.num_nodes());
}
BENCHMARK(BM_ForwardFull)->Unit(benchmark::kMicrosecond);

// One batch of range(0) seeds at degree range(1) per layer, planning included.
void BM_ForwardPlan(benchmark::State& state) {
  const ForwardSetup& s = forward_setup();
  Network<float> net(s.model, 1);
  const auto batch = static_cast<std::size_t>(state.range(0));
  const std::vector<std::size_t> degs(2, static_cast<std::size_t>(state.range(1)));
  std::vector<NodeId> seeds(batch);
  for (std::size_t i = 0; i < batch; ++i) seeds[i] = static_cast<NodeId>(i * 5 % s.graph.num_nodes());
  std::uint64_t b = 0;
  for (auto _ : state) {
    const BatchPlan plan = sample_batch(seeds, s.scores, degs, {}, {0, 0, b++});
    ad::Tape<float> tape;
    auto bound = net.bind(tape);
    benchmark::DoNotOptimize(net.forward_plan(tape, bound, s.x, plan, {}).logits.value());
  }
}
BENCHMARK(BM_ForwardPlan)->ArgsProduct({{1, 32}, {4, 16}})->Unit(benchmark::kMicrosecond);

Csr expander_adjacency(std::size_t n) {
  ExpanderOptions eo;
  eo.seed = 7;
  return build_expander(n, eo).adjacency();
}

void BM_SpectralGapDense(benchmark::State& state) {
  const Csr a = expander_adjacency(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(spectral_gap(a));
}
BENCHMARK(BM_SpectralGapDense)->Arg(128)->Arg(512)->Arg(2048)->Unit(benchmark::kMillisecond);

void BM_SpectralGapIterative(benchmark::State& state) {
  const Csr a = expander_adjacency(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(spectral_gap_iterative(a));
}
BENCHMARK(BM_SpectralGapIterative)->Arg(512)->Arg(4096)->Arg(32768)->Unit(benchmark::kMillisecond);

void BM_EnergyDistance(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(9);
  std::vector<Sample> xs(n, Sample(4)), ys(n, Sample(4));
  for (auto& s : xs)
    for (auto& v : s) v = rng.normal();
  for (auto& s : ys)
    for (auto& v : s) v = rng.normal() + 0.5;
  for (auto _ : state) benchmark::DoNotOptimize(energy_distance(xs, ys));
}
BENCHMARK(BM_EnergyDistance)->Arg(100)->Arg(1000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
