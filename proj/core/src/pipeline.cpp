#include "spex/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <exception>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <thread>

#include "spex/error.hpp"
#include "spex/rng.hpp"

namespace spex {

const char* to_string(Phase p) noexcept {
  return p == Phase::kEstimator ? "estimator" : "final";
}

const char* to_string(Ablation a) noexcept {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kUniform: return "uniform";
    case Ablation::kMax: return "max";
    case Ablation::kNoTemp: return "no-temp";
    case Ablation::kNoVnorm: return "no-vnorm";
  }
  return "?";
}

Ablation ablation_from_string(const std::string& s) {
  for (Ablation a : {Ablation::kNone, Ablation::kUniform, Ablation::kMax, Ablation::kNoTemp,
                     Ablation::kNoVnorm}) {
    if (s == to_string(a)) return a;
  }
  throw ConfigError("unknown ablation '" + s + "'");
}

TrainConfig TrainConfig::estimator_defaults() {
  TrainConfig c;
  c.phase = Phase::kEstimator;
  c.width = 4;
  c.heads = 1;
  c.epochs = 300;
  c.lr = 1e-2;
  c.dropout = 0.0;
  return c;
}

TrainConfig TrainConfig::final_defaults() {
  TrainConfig c;
  c.phase = Phase::kFinal;
  c.width = 32;
  c.heads = 1;
  c.epochs = 60;
  c.lr = 5e-3;
  c.dropout = 0.1;
  c.batch_size = 32;
  c.degs = {4, 4};
  return c;
}

NormKind TrainConfig::resolved_norm() const {
  if (norm) return *norm;
  return phase == Phase::kEstimator ? NormKind::kLayer : NormKind::kBatch;
}

bool TrainConfig::anneals() const {
  return phase == Phase::kEstimator && ablation != Ablation::kNoTemp;
}

bool TrainConfig::normalizes_v() const {
  return phase == Phase::kEstimator && ablation != Ablation::kNoVnorm;
}

void TrainConfig::validate() const {
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw ConfigError("width must be a positive multiple of heads");
  }
  if (layers == 0) throw ConfigError("at least one layer is required");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be nonnegative");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  temperature.validate();
  if (phase == Phase::kFinal) {
    if (degs.size() != layers) {
      throw ConfigError("--degs has " + std::to_string(degs.size()) + " entries but the network has " +
                        std::to_string(layers) + " layers");
    }
    for (std::size_t d : degs) {
      if (d == 0) throw ConfigError("sampling degrees must be positive");
    }
  } else if (heads != 1) {
    throw ConfigError("the estimator uses a single attention head");
  }
  if (sampler.tail_eps < 0.0) throw ConfigError("tail_eps must be nonnegative");
}

ModelConfig TrainConfig::model_config(const Graph& g) const {
  ModelConfig m;
  m.in_dim = g.feature_dim();
  m.width = width;
  m.heads = heads;
  m.layers = layers;
  m.out_dim = g.task() == TaskKind::kBinary ? 1 : g.num_classes();
  m.norm = resolved_norm();
  m.normalize_v = normalizes_v();
  m.dropout = dropout;
  return m;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"phase", to_string(c.phase)},
                     {"width", c.width},
                     {"heads", c.heads},
                     {"layers", c.layers},
                     {"epochs", c.epochs},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"dropout", c.dropout},
                     {"warmup_epochs", c.warmup_epochs},
                     {"lambda", c.temperature.lambda},
                     {"gamma", c.temperature.gamma},
                     {"temperature_floor", c.temperature.floor},
                     {"degs", c.degs},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"ablation", to_string(c.ablation)},
                     {"norm", to_string(c.resolved_norm())},
                     {"full_graph_reference", c.full_graph_reference},
                     {"double_precision", c.double_precision},
                     {"prefetch", c.prefetch},
                     {"k_prime", c.sampler.k_prime},
                     {"tail_eps", c.sampler.tail_eps}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const std::string phase = j.value("phase", std::string("estimator"));
  if (phase == "estimator") {
    c = TrainConfig::estimator_defaults();
  } else if (phase == "final") {
    c = TrainConfig::final_defaults();
  } else {
    throw ConfigError("unknown phase '" + phase + "'");
  }
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("width", c.width);
  opt("heads", c.heads);
  opt("layers", c.layers);
  opt("epochs", c.epochs);
  opt("lr", c.lr);
  opt("weight_decay", c.weight_decay);
  opt("dropout", c.dropout);
  opt("warmup_epochs", c.warmup_epochs);
  opt("lambda", c.temperature.lambda);
  opt("gamma", c.temperature.gamma);
  opt("temperature_floor", c.temperature.floor);
  opt("degs", c.degs);
  opt("batch_size", c.batch_size);
  opt("seed", c.seed);
  opt("full_graph_reference", c.full_graph_reference);
  opt("double_precision", c.double_precision);
  opt("prefetch", c.prefetch);
  opt("k_prime", c.sampler.k_prime);
  opt("tail_eps", c.sampler.tail_eps);
  if (j.contains("ablation")) c.ablation = ablation_from_string(j.at("ablation").get<std::string>());
  if (j.contains("norm") && !j.at("norm").is_null()) {
    c.norm = norm_from_string(j.at("norm").get<std::string>());
  }
}

nlohmann::json model_to_json(const ModelConfig& m) {
  return nlohmann::json{{"in_dim", m.in_dim},     {"width", m.width},
                        {"heads", m.heads},       {"layers", m.layers},
                        {"out_dim", m.out_dim},   {"ffn_mult", m.ffn_mult},
                        {"norm", to_string(m.norm)}, {"normalize_v", m.normalize_v},
                        {"clip", m.clip},         {"dropout", m.dropout},
                        {"v_eps", m.v_eps},       {"norm_eps", m.norm_eps},
                        {"bn_momentum", m.bn_momentum}};
}

ModelConfig model_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.in_dim = j.at("in_dim").get<std::size_t>();
  m.width = j.at("width").get<std::size_t>();
  m.heads = j.at("heads").get<std::size_t>();
  m.layers = j.at("layers").get<std::size_t>();
  m.out_dim = j.at("out_dim").get<std::size_t>();
  m.ffn_mult = j.value("ffn_mult", m.ffn_mult);
  m.norm = norm_from_string(j.at("norm").get<std::string>());
  m.normalize_v = j.at("normalize_v").get<bool>();
  m.clip = j.value("clip", m.clip);
  m.dropout = j.value("dropout", m.dropout);
  m.v_eps = j.value("v_eps", m.v_eps);
  m.norm_eps = j.value("norm_eps", m.norm_eps);
  m.bn_momentum = j.value("bn_momentum", m.bn_momentum);
  m.validate();
  return m;
}

std::vector<std::size_t> max_degrees(const ScoreSet& scores) {
  std::vector<std::size_t> out;
  for (const auto& layer : scores.layers) out.push_back(layer.csr.max_degree());
  return out;
}

AttentionPattern pattern_from_scores(const ScoreSet& scores) {
  std::vector<LayerPattern> layers;
  for (const auto& layer : scores.layers) {
    if (layer.types.size() != layer.csr.num_edges()) {
      throw ContractViolation("score set has no edge types; attach the pattern first");
    }
    layers.push_back(LayerPattern{layer.csr, layer.types});
  }
  return AttentionPattern(std::move(layers));
}

ScoreSet effective_scores(const ScoreSet& scores, Ablation ablation) {
  return ablation == Ablation::kUniform ? uniformized(scores) : scores;
}

double edge_percent(const ScoreSet& scores, const std::vector<std::size_t>& degs,
                    std::size_t m_aug) {
  if (degs.size() != scores.num_layers()) throw ContractViolation("one degree per layer required");
  if (m_aug == 0) throw ContractViolation("augmented edge count must be positive");
  std::size_t kept = 0;
  for (std::size_t l = 0; l < scores.num_layers(); ++l) {
    const Csr& csr = scores.layers[l].csr;
    for (std::size_t i = 0; i < csr.num_rows(); ++i) kept += std::min(degs[l], csr.degree(i));
  }
  return static_cast<double>(kept) /
         (static_cast<double>(scores.num_layers()) * static_cast<double>(m_aug));
}

namespace {

// ---- losses and metrics ------------------------------------------------------------------

template <typename T>
Tensor<T> binary_targets(const Graph& g, std::span<const NodeId> nodes, std::size_t cols) {
  Tensor<T> t(Shape{nodes.size(), cols});
  for (std::size_t r = 0; r < nodes.size(); ++r) {
    const std::int64_t y = g.labels()[nodes[r]];
    if (g.task() == TaskKind::kBinary) {
      t(r, 0) = y != 0 ? T{1} : T{0};
    } else {
      for (std::size_t c = 0; c < cols; ++c) t(r, c) = (y >> c) & 1 ? T{1} : T{0};
    }
  }
  return t;
}

template <typename T>
ad::Var<T> task_loss(const Graph& g, ad::Var<T> logits, std::span<const std::uint32_t> rows,
                     std::span<const NodeId> nodes) {
  if (g.task() == TaskKind::kMulticlass) {
    std::vector<std::int64_t> y(nodes.size());
    for (std::size_t r = 0; r < nodes.size(); ++r) y[r] = g.labels()[nodes[r]];
    return ad::cross_entropy(logits, rows, std::span<const std::int64_t>(y));
  }
  return ad::bce_with_logits(logits, rows, binary_targets<T>(g, nodes, logits.value().dim(1)));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Row r of logits belongs to nodes[r].
template <typename T>
std::pair<double, double> loss_and_accuracy(const Graph& g, const Tensor<T>& logits,
                                            std::span<const NodeId> nodes) {
  if (nodes.empty()) return {0.0, 0.0};
  const std::size_t cols = logits.dim(1);
  double loss = 0.0, correct = 0.0;
  for (std::size_t r = 0; r < nodes.size(); ++r) {
    const std::int64_t y = g.labels()[nodes[r]];
    if (g.task() == TaskKind::kMulticlass) {
      double top = -std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double z = static_cast<double>(logits(r, c));
        if (z > top) {
          top = z;
          arg = c;
        }
      }
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) total += std::exp(static_cast<double>(logits(r, c)) - top);
      loss += std::log(total) + top - static_cast<double>(logits(r, static_cast<std::size_t>(y)));
      correct += arg == static_cast<std::size_t>(y) ? 1.0 : 0.0;
    } else {
      double row_correct = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double z = static_cast<double>(logits(r, c));
        const double t = g.task() == TaskKind::kBinary ? (y != 0 ? 1.0 : 0.0)
                                                       : static_cast<double>((y >> c) & 1);
        loss += (std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)))) /
                static_cast<double>(cols);
        row_correct += (z > 0.0) == (t > 0.5) ? 1.0 : 0.0;
      }
      correct += row_correct / static_cast<double>(cols);
    }
  }
  const auto m = static_cast<double>(nodes.size());
  return {loss / m, correct / m};
}

// ---- plan prefetching ----------------------------------------------------------------------

// Produces plans 0..count-1 in order; with a worker thread at most two plans
// wait in the queue.
class PlanSource {
 public:
  PlanSource(std::function<BatchPlan(std::size_t)> make, std::size_t count, bool threaded)
      : make_(std::move(make)), count_(count) {
    if (threaded && count > 0) worker_ = std::thread([this] { produce(); });
  }
  ~PlanSource() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }
  PlanSource(const PlanSource&) = delete;
  PlanSource& operator=(const PlanSource&) = delete;

  BatchPlan next() {
    if (!worker_.joinable()) return make_(served_++);
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !queue_.empty() || error_; });
    if (queue_.empty() && error_) std::rethrow_exception(error_);
    BatchPlan p = std::move(queue_.front());
    queue_.pop_front();
    ++served_;
    cv_.notify_all();
    return p;
  }

 private:
  static constexpr std::size_t kCapacity = 2;

  void produce() {
    for (std::size_t b = 0; b < count_; ++b) {
      BatchPlan p;
      try {
        p = make_(b);
      } catch (...) {
        std::lock_guard lock(mu_);
        error_ = std::current_exception();
        cv_.notify_all();
        return;
      }
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return queue_.size() < kCapacity || stop_; });
      if (stop_) return;
      queue_.push_back(std::move(p));
      cv_.notify_all();
    }
  }

  std::function<BatchPlan(std::size_t)> make_;
  std::size_t count_;
  std::size_t served_ = 0;
  std::thread worker_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<BatchPlan> queue_;
  std::exception_ptr error_;
  bool stop_ = false;
};

// ---- training ------------------------------------------------------------------------------

template <typename T>
struct Route {
  const AttentionPattern* pattern = nullptr;  // full route when set
  const ScoreSet* scores = nullptr;           // sampled route otherwise
  std::vector<std::size_t> degs;
  SamplerOptions sampler;
};

// Inference logits for `nodes`, rows aligned with nodes.
template <typename T>
Tensor<T> infer_logits(Network<T>& net, const Tensor<T>& features, const Route<T>& route,
                       std::span<const NodeId> nodes, std::size_t batch_size, StreamKey key,
                       double temperature, SampleStats* stats) {
  const std::size_t out_dim = net.config().out_dim;
  Tensor<T> out(Shape{nodes.size(), out_dim});
  ForwardOptions fo;
  fo.temperature = temperature;
  if (route.pattern) {
    ad::Tape<T> tape;
    auto bound = net.bind(tape);
    auto res = net.forward_full(tape, bound, features, *route.pattern, fo);
    for (std::size_t r = 0; r < nodes.size(); ++r) {
      std::copy_n(res.logits.value().data() + static_cast<std::size_t>(nodes[r]) * out_dim, out_dim,
                  out.data() + r * out_dim);
    }
    return out;
  }
  const std::size_t bs = batch_size == 0 ? nodes.size() : batch_size;
  for (std::size_t b = 0; b < nodes.size(); b += bs) {
    const std::size_t e = std::min(nodes.size(), b + bs);
    const auto chunk = nodes.subspan(b, e - b);
    const BatchPlan plan = sample_batch(chunk, *route.scores, route.degs, route.sampler, key, stats);
    ad::Tape<T> tape;
    auto bound = net.bind(tape);
    auto res = net.forward_plan(tape, bound, features, plan, fo);
    std::copy_n(res.logits.value().data(), chunk.size() * out_dim, out.data() + b * out_dim);
  }
  return out;
}

template <typename T>
TrainResult run_training(const Graph& g, const TrainConfig& cfg, const Route<T>& route) {
  const ModelConfig mc = cfg.model_config(g);
  Network<T> net(mc, derive_seed(cfg.seed, {0x1a17}));
  const Tensor<T> features = feature_matrix<T>(g);
  const auto train = g.nodes_in(Split::kTrain);
  const auto val = g.nodes_in(Split::kVal);
  const auto test = g.nodes_in(Split::kTest);
  if (train.empty()) throw ConfigError("no training nodes");
  const std::size_t bs = cfg.batch_size == 0 ? train.size() : cfg.batch_size;
  const CosineSchedule sched{cfg.epochs, cfg.warmup_epochs, 0.01};
  AdamW<T> opt(AdamWConfig{cfg.lr, cfg.weight_decay, 0.9, 0.999, 1e-8});
  const StreamKey eval_key{derive_seed(cfg.seed, {0xe7a1}), 0, 0};

  TrainResult result;
  result.model = mc;
  ParamStore<T> best = net.params();
  bool have_best = false;

  for (std::size_t t = 1; t <= cfg.epochs; ++t) {
    const double tau = cfg.anneals() ? temperature_at(cfg.temperature, static_cast<double>(t)) : 1.0;
    const double lr = cfg.lr * sched.factor(t - 1);
    const auto batches = epoch_batches(train, bs, cfg.seed, t);
    PlanSource plans(
        [&](std::size_t b) {
          return sample_batch(batches[b], *route.scores, route.degs, route.sampler,
                              StreamKey{cfg.seed, t, b}, &result.sample_stats);
        },
        route.pattern ? 0 : batches.size(), cfg.prefetch);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      ForwardOptions fo;
      fo.temperature = tau;
      fo.training = true;
      fo.dropout_seed = derive_seed(cfg.seed, {0xd0, t, b});
      ad::Tape<T> tape;
      auto bound = net.bind(tape);
      ad::Var<T> loss;
      if (route.pattern) {
        auto res = net.forward_full(tape, bound, features, *route.pattern, fo);
        std::vector<std::uint32_t> rows(batch.begin(), batch.end());
        loss = task_loss<T>(g, res.logits, rows, batch);
      } else {
        const BatchPlan plan = plans.next();
        auto res = net.forward_plan(tape, bound, features, plan, fo);
        std::vector<std::uint32_t> rows(batch.size());
        std::iota(rows.begin(), rows.end(), 0u);
        loss = task_loss<T>(g, res.logits, rows, batch);
      }
      const double lv = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(lv)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(t) + ", batch " +
                           std::to_string(b));
      }
      tape.backward(loss);
      try {
        opt.step(net.params(), net.gradients(tape, bound), lr);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(t) + ")");
      }
      loss_sum += lv * static_cast<double>(batch.size());
    }

    EpochRecord rec;
    rec.epoch = t;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.temperature = tau;
    rec.lr = lr;
    if (!val.empty()) {
      const auto logits = infer_logits(net, features, route, val, bs, eval_key, tau, nullptr);
      std::tie(rec.val_loss, rec.val_metric) = loss_and_accuracy(g, logits, val);
    }
    result.history.push_back(rec);
    const bool better = !have_best || rec.val_metric > result.best_val_metric ||
                        (rec.val_metric == result.best_val_metric && rec.val_loss < result.best_val_loss);
    if (better) {
      have_best = true;
      best = net.params();
      result.best_epoch = t;
      result.best_val_metric = rec.val_metric;
      result.best_val_loss = rec.val_loss;
      result.best_temperature = tau;
    }
  }

  net.params() = best;
  if (!test.empty()) {
    const auto logits =
        infer_logits(net, features, route, test, bs, eval_key, result.best_temperature, nullptr);
    result.test_metric = loss_and_accuracy(g, logits, test).second;
  }
  result.params = net.params().template cast<float>();
  return result;
}

}  // namespace

ScoreSet extract_scores(Network<float>& net, const Graph& g, const AttentionPattern& pattern,
                        double temperature) {
  ad::Tape<float> tape;
  auto bound = net.bind(tape);
  ForwardOptions fo;
  fo.temperature = temperature;
  auto res = net.forward_full(tape, bound, feature_matrix<float>(g), pattern, fo);
  ScoreSet out;
  out.estimator_width = net.config().width;
  for (std::size_t l = 0; l < pattern.num_layers(); ++l) {
    const LayerPattern& p = pattern.layer(l);
    out.layers.push_back(ScoreLayer{p.csr, std::move(res.scores[l]), p.types});
  }
  return out;
}

TrainResult train_estimator(const Graph& g, const AttentionPattern& pattern,
                            const TrainConfig& config) {
  if (config.phase != Phase::kEstimator) throw ConfigError("train_estimator needs phase=estimator");
  config.validate();
  if (pattern.num_layers() != config.layers || pattern.num_nodes() != g.num_nodes()) {
    throw ConfigError("pattern does not match the graph or layer count");
  }
  TrainResult result;
  if (config.double_precision) {
    Route<double> route;
    route.pattern = &pattern;
    result = run_training<double>(g, config, route);
  } else {
    Route<float> route;
    route.pattern = &pattern;
    result = run_training<float>(g, config, route);
  }
  Network<float> net(result.model, result.params);
  result.scores = extract_scores(net, g, pattern, result.best_temperature);
  result.scores.best_epoch = static_cast<std::int64_t>(result.best_epoch);
  return result;
}

TrainResult train_final(const Graph& g, const ScoreSet& scores, const TrainConfig& config) {
  if (config.phase != Phase::kFinal) throw ConfigError("train_final needs phase=final");
  config.validate();
  if (scores.num_layers() != config.layers || scores.num_nodes() != g.num_nodes()) {
    throw ConfigError("score set does not match the graph or layer count");
  }
  const ScoreSet eff = effective_scores(scores, config.ablation);
  const AttentionPattern full = pattern_from_scores(eff);
  SamplerOptions sampler = config.sampler;
  if (config.ablation == Ablation::kMax) sampler.policy = SamplingPolicy::kTopScore;
  auto run = [&](auto tag) {
    using T = decltype(tag);
    Route<T> route;
    if (config.full_graph_reference) {
      route.pattern = &full;
    } else {
      route.scores = &eff;
    }
    route.degs = config.degs;
    route.sampler = sampler;
    return run_training<T>(g, config, route);
  };
  if (config.epochs == 0) {
    TrainResult r;
    r.model = config.model_config(g);
    r.params = Network<float>(r.model, derive_seed(config.seed, {0x1a17})).params();
    return r;
  }
  return config.double_precision ? run(double{}) : run(float{});
}

Prediction predict(const ModelConfig& model, const ParamStore<float>& params, const Graph& g,
                   const ScoreSet& scores, const std::vector<std::size_t>& degs,
                   const std::vector<NodeId>& nodes, const PredictOptions& options) {
  if (options.samples == 0) throw ConfigError("need at least one sample");
  for (NodeId v : nodes) {
    if (v >= g.num_nodes()) throw ContractViolation("unknown node id " + std::to_string(v));
  }
  Network<float> net(model, params);
  const Tensor<float> features = feature_matrix<float>(g);
  Route<float> route;
  route.scores = &scores;
  route.degs = degs;
  route.sampler = options.sampler;
  Prediction out;
  out.nodes = nodes;
  const std::size_t cols = model.out_dim;
  Tensor<double> logit_sum(Shape{nodes.size(), cols}), prob_sum(Shape{nodes.size(), cols});
  for (std::size_t s = 0; s < options.samples; ++s) {
    const auto logits = infer_logits(net, features, route, nodes, options.batch_size,
                                     StreamKey{options.seed, s, 0}, 1.0, nullptr);
    for (std::size_t r = 0; r < nodes.size(); ++r) {
      if (g.task() == TaskKind::kMulticlass) {
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) top = std::max(top, static_cast<double>(logits(r, c)));
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) total += std::exp(static_cast<double>(logits(r, c)) - top);
        for (std::size_t c = 0; c < cols; ++c) {
          prob_sum(r, c) += std::exp(static_cast<double>(logits(r, c)) - top) / total;
        }
      } else {
        for (std::size_t c = 0; c < cols; ++c) prob_sum(r, c) += sigmoid(static_cast<double>(logits(r, c)));
      }
      for (std::size_t c = 0; c < cols; ++c) logit_sum(r, c) += static_cast<double>(logits(r, c));
    }
  }
  const double inv = 1.0 / static_cast<double>(options.samples);
  out.logits = Tensor<float>(Shape{nodes.size(), cols});
  out.probs = Tensor<float>(Shape{nodes.size(), cols});
  for (std::size_t k = 0; k < out.logits.size(); ++k) {
    out.logits[k] = static_cast<float>(logit_sum[k] * inv);
    out.probs[k] = static_cast<float>(prob_sum[k] * inv);
  }
  return out;
}

double accuracy(const Graph& g, const Prediction& p) {
  if (p.nodes.empty()) return 0.0;
  const std::size_t cols = p.probs.dim(1);
  double correct = 0.0;
  for (std::size_t r = 0; r < p.nodes.size(); ++r) {
    const std::int64_t y = g.labels()[p.nodes[r]];
    if (g.task() == TaskKind::kMulticlass) {
      std::size_t arg = 0;
      for (std::size_t c = 1; c < cols; ++c) {
        if (p.probs(r, c) > p.probs(r, arg)) arg = c;
      }
      correct += arg == static_cast<std::size_t>(y) ? 1.0 : 0.0;
    } else if (g.task() == TaskKind::kBinary) {
      correct += (p.probs(r, 0) > 0.5f) == (y != 0) ? 1.0 : 0.0;
    } else {
      double ok = 0.0;
      for (std::size_t c = 0; c < cols; ++c) ok += (p.probs(r, c) > 0.5f) == (((y >> c) & 1) != 0) ? 1.0 : 0.0;
      correct += ok / static_cast<double>(cols);
    }
  }
  return correct / static_cast<double>(p.nodes.size());
}

void write_run(const std::filesystem::path& dir, const TrainConfig& config,
               const TrainResult& result, const nlohmann::json& extra_metrics) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "scores");
  fs::create_directories(dir / "ckpt");
  {
    nlohmann::json cfg = config;
    cfg["model"] = model_to_json(result.model);
    std::ofstream out(dir / "config.json");
    out << cfg.dump(2) << '\n';
    if (!out) throw FormatError("cannot write config.json");
  }
  {
    std::ofstream out(dir / "history.csv");
    out << "epoch,train_loss,val_loss,val_metric,temperature,lr\n";
    char buf[256];
    for (const auto& r : result.history) {
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.train_loss,
                    r.val_loss, r.val_metric, r.temperature, r.lr);
      out << buf;
    }
    if (!out) throw FormatError("cannot write history.csv");
  }
  if (!result.scores.layers.empty()) {
    save_scores_text(result.scores, dir / "scores" / "scores.txt");
    save_scores_binary(result.scores, dir / "scores" / "scores.bin");
  }
  save_checkpoint(result.params, dir / "ckpt" / "best.ckpt");
  nlohmann::json metrics{{"phase", to_string(config.phase)},
                         {"ablation", to_string(config.ablation)},
                         {"best_epoch", result.best_epoch},
                         {"best_val_metric", result.best_val_metric},
                         {"best_val_loss", result.best_val_loss},
                         {"best_temperature", result.best_temperature},
                         {"accuracy", result.test_metric},
                         {"num_parameters", result.params.num_parameters()},
                         {"uniform_fallbacks", result.sample_stats.uniform_fallbacks},
                         {"prefilter_flagged", result.sample_stats.prefilter_flagged}};
  if (!result.history.empty()) metrics["final_train_loss"] = result.history.back().train_loss;
  for (const auto& [k, v] : extra_metrics.items()) metrics[k] = v;
  std::ofstream out(dir / "metrics.json");
  out << metrics.dump(2) << '\n';
  if (!out) throw FormatError("cannot write metrics.json");
}

}  // namespace spex
