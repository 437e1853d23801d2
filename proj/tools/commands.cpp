#include "commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include "cli_support.hpp"
#include "spex/analysis.hpp"
#include "spex/datasets.hpp"
#include "spex/error.hpp"
#include "spex/expander.hpp"
#include "spex/optim.hpp"
#include "spex/pipeline.hpp"

namespace spex::cli {

namespace {

struct OutputFlags {
  std::string out;
  bool force = false;
};

void add_output_flags(CLI::App* sub, OutputFlags& o) {
  sub->add_option("--out", o.out, "Output directory")->required();
  sub->add_flag("--force", o.force, "Replace an existing output directory");
}

bool given(const CLI::Option* opt) { return opt != nullptr && opt->count() > 0; }

template <typename T>
void override_if(const CLI::Option* opt, T& dst, const T& value) {
  if (given(opt)) dst = value;
}

struct ExpanderFlags {
  std::size_t cycles = ExpanderOptions{}.num_cycles;
  double min_gap = ExpanderOptions{}.min_gap;
  std::size_t max_retries = ExpanderOptions{}.max_retries;
  CLI::Option* cycles_opt = nullptr;
  CLI::Option* min_gap_opt = nullptr;
  CLI::Option* retries_opt = nullptr;
};

void add_expander_flags(CLI::App* sub, ExpanderFlags& e) {
  e.cycles_opt = sub->add_option("--cycles", e.cycles, "Hamiltonian cycles in the expander")
                     ->check(CLI::PositiveNumber);
  e.min_gap_opt = sub->add_option("--min-gap", e.min_gap, "Required two-sided spectral gap")
                      ->check(CLI::Range(0.0, 1.0));
  e.retries_opt = sub->add_option("--max-retries", e.max_retries, "Expander construction retries")
                      ->check(CLI::PositiveNumber);
}

ExpanderOptions resolve_expander(const ExpanderFlags& e, const nlohmann::json& file,
                                 std::uint64_t seed) {
  ExpanderOptions o;
  o.num_cycles = file.value("cycles", o.num_cycles);
  o.min_gap = file.value("min_gap", o.min_gap);
  o.max_retries = file.value("max_retries", o.max_retries);
  o.seed = seed;
  override_if(e.cycles_opt, o.num_cycles, e.cycles);
  override_if(e.min_gap_opt, o.min_gap, e.min_gap);
  override_if(e.retries_opt, o.max_retries, e.max_retries);
  return o;
}

nlohmann::json expander_json(const ExpanderOptions& o) {
  return {{"cycles", o.num_cycles},
          {"min_gap", o.min_gap},
          {"max_retries", o.max_retries},
          {"seed", o.seed}};
}

nlohmann::json pattern_summary(const ExpanderGraph& x, const LayerPattern& p) {
  std::array<std::size_t, kNumEdgeTypes> counts{};
  for (EdgeType t : p.types) ++counts[static_cast<std::size_t>(t)];
  return {{"n", x.n},
          {"cycles", x.cycles.size()},
          {"expander_degree", x.degree()},
          {"spectral_gap", x.gap},
          {"seed", x.seed},
          {"edges", p.csr.num_edges()},
          {"graph_edges", counts[0]},
          {"expander_edges", counts[1]},
          {"self_loops", counts[2]}};
}

// Writes expander.txt, pattern.tsv and augment.json into dir.
void write_augmentation(const fs::path& dir, const ExpanderGraph& x, const AttentionPattern& p) {
  save_expander(x, dir / "expander.txt");
  save_pattern(p.layer(0), dir / "pattern.tsv");
  write_json(dir / "augment.json", pattern_summary(x, p.layer(0)));
}

AttentionPattern replicate(const LayerPattern& layer, std::size_t layers) {
  return AttentionPattern(std::vector<LayerPattern>(layers, layer));
}

AttentionPattern load_augmentation(const fs::path& dir, const Graph& g, std::size_t layers) {
  const fs::path file = fs::is_directory(dir) ? dir / "pattern.tsv" : dir;
  return replicate(load_pattern(file, g.num_nodes()), layers);
}

nlohmann::json config_file(const std::string& path) {
  return path.empty() ? nlohmann::json::object() : read_json(path);
}

// ---- gen ---------------------------------------------------------------------------------

struct GenOpts {
  OutputFlags out;
  std::string spec_path;
  std::uint64_t seed = 0;
  std::string generator;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* gen_opt = nullptr;
};

void run_gen(const GenOpts& o, const Context& ctx) {
  RunOutput run("gen", o.out.out, o.out.force, ctx.argv);
  SyntheticSpec spec;
  if (!o.spec_path.empty()) {
    run.input("spec", o.spec_path);
    try {
      spec = read_json(o.spec_path).get<SyntheticSpec>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(o.spec_path + ": " + e.what());
    }
  }
  override_if(o.seed_opt, spec.seed, o.seed);
  if (given(o.gen_opt)) spec.generator = generator_from_string(o.generator);
  spec.validate();
  run.config(spec);
  run.seed(spec.seed);
  run.create();

  const Graph g = generate(spec);
  write_dataset(g, spec, run.dir());
  run.finish();
  std::printf("dataset %s: %zu nodes, %zu directed edges, homophily %.3f\n", run.dir().c_str(),
              g.num_nodes(), g.num_edges(), homophily_ratio(g));
}

// ---- augment -----------------------------------------------------------------------------

struct AugmentOpts {
  OutputFlags out;
  std::string dataset;
  std::string config;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  ExpanderFlags expander;
};

void run_augment(const AugmentOpts& o, const Context& ctx) {
  RunOutput run("augment", o.out.out, o.out.force, ctx.argv);
  run.input("dataset", o.dataset);
  if (!o.config.empty()) run.input("config", o.config);
  const nlohmann::json file = config_file(o.config);
  std::uint64_t seed = file.value("seed", std::uint64_t{0});
  override_if(o.seed_opt, seed, o.seed);
  const ExpanderOptions eo = resolve_expander(o.expander, file, seed);
  run.config(expander_json(eo));
  run.seed(seed);
  run.create();

  const Graph g = read_dataset(o.dataset);
  const ExpanderGraph x = build_expander(g.num_nodes(), eo);
  const AttentionPattern p = augment(g, x, 1);
  write_augmentation(run.dir(), x, p);
  run.finish();
  std::printf("expander: %zu cycles, gap %.4f; pattern: %zu edges per layer\n", x.cycles.size(),
              x.gap, p.edges_per_layer());
}

// ---- shared training flags ---------------------------------------------------------------

struct TrainFlags {
  std::string config;
  std::size_t width = 0, heads = 0, layers = 0, epochs = 0, batch_size = 0;
  double lr = 0.0, weight_decay = 0.0, dropout = 0.0, lambda = 0.0, gamma = 0.0, floor = 0.0;
  std::uint64_t seed = 0;
  std::string ablation, norm;
  bool verbose = false;
  std::map<std::string, CLI::Option*> opts;
};

void add_train_flags(CLI::App* sub, TrainFlags& f, bool final_phase) {
  sub->add_option("--config", f.config, "JSON file with training settings")
      ->check(CLI::ExistingFile);
  f.opts["width"] = sub->add_option("--width", f.width, "Hidden width")->check(CLI::PositiveNumber);
  f.opts["heads"] = sub->add_option("--heads", f.heads, "Attention heads")->check(CLI::PositiveNumber);
  f.opts["epochs"] = sub->add_option("--epochs", f.epochs, "Training epochs");
  f.opts["lr"] = sub->add_option("--lr", f.lr, "Peak learning rate")->check(CLI::PositiveNumber);
  f.opts["weight_decay"] =
      sub->add_option("--weight-decay", f.weight_decay, "AdamW weight decay")->check(CLI::NonNegativeNumber);
  f.opts["dropout"] = sub->add_option("--dropout", f.dropout, "Dropout rate")->check(CLI::Range(0.0, 0.99));
  f.opts["seed"] = sub->add_option("--seed", f.seed, "Random seed");
  f.opts["norm"] = sub->add_option("--norm", f.norm, "Normalization")
                       ->check(CLI::IsMember({"layer", "batch", "none"}));
  sub->add_flag("-v,--verbose", f.verbose, "Print one line per epoch");
  if (final_phase) {
    f.opts["layers"] = sub->add_option("--layers", f.layers, "Attention layers (must match the scores)")
                           ->check(CLI::PositiveNumber);
    f.opts["batch_size"] =
        sub->add_option("--batch-size", f.batch_size, "Seed nodes per batch (0: all)");
    f.opts["ablation"] = sub->add_option("--ablation", f.ablation, "Ablation mode")
                             ->check(CLI::IsMember({"none", "uniform", "max", "no-temp", "no-vnorm"}));
  } else {
    f.opts["layers"] = sub->add_option("--layers", f.layers, "Attention layers")->check(CLI::PositiveNumber);
    f.opts["lambda"] = sub->add_option("--lambda", f.lambda, "Epochs at temperature 1");
    f.opts["gamma"] = sub->add_option("--gamma", f.gamma, "Temperature decay per epoch")
                          ->check(CLI::Range(0.0, 1.0));
    f.opts["temperature_floor"] =
        sub->add_option("--tau-floor", f.floor, "Lowest temperature")->check(CLI::PositiveNumber);
    f.opts["ablation"] = sub->add_option("--ablation", f.ablation, "Ablation mode")
                             ->check(CLI::IsMember({"none", "no-temp", "no-vnorm"}));
  }
}

// Defaults, then the config file, then explicit flags.
TrainConfig resolve_train(const TrainFlags& f, Phase phase) {
  nlohmann::json j = config_file(f.config);
  j["phase"] = phase == Phase::kEstimator ? "estimator" : "final";
  TrainConfig c;
  try {
    from_json(j, c);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(f.config + ": " + e.what());
  }
  auto opt = [&](const char* key) { return f.opts.count(key) ? f.opts.at(key) : nullptr; };
  override_if(opt("width"), c.width, f.width);
  override_if(opt("heads"), c.heads, f.heads);
  override_if(opt("layers"), c.layers, f.layers);
  override_if(opt("epochs"), c.epochs, f.epochs);
  override_if(opt("lr"), c.lr, f.lr);
  override_if(opt("weight_decay"), c.weight_decay, f.weight_decay);
  override_if(opt("dropout"), c.dropout, f.dropout);
  override_if(opt("seed"), c.seed, f.seed);
  override_if(opt("batch_size"), c.batch_size, f.batch_size);
  override_if(opt("lambda"), c.temperature.lambda, f.lambda);
  override_if(opt("gamma"), c.temperature.gamma, f.gamma);
  override_if(opt("temperature_floor"), c.temperature.floor, f.floor);
  if (given(opt("ablation"))) c.ablation = ablation_from_string(f.ablation);
  if (given(opt("norm"))) c.norm = norm_from_string(f.norm);
  if (!j.contains("prefetch") && thread_count() > 1) c.prefetch = true;
  return c;
}

void print_history(const TrainResult& r) {
  for (const auto& e : r.history) {
    std::fprintf(stderr, "epoch %4zu  train %.5f  val %.5f  metric %.4f  tau %.6g  lr %.3g\n",
                 e.epoch, e.train_loss, e.val_loss, e.val_metric, e.temperature, e.lr);
  }
}

// ---- train-estimator ---------------------------------------------------------------------

struct EstimatorOpts {
  OutputFlags out;
  std::string dataset;
  std::string pattern;
  TrainFlags train;
  ExpanderFlags expander;
};

void run_train_estimator(const EstimatorOpts& o, const Context& ctx) {
  RunOutput run("train-estimator", o.out.out, o.out.force, ctx.argv);
  run.input("dataset", o.dataset);
  if (!o.pattern.empty()) run.input("pattern", o.pattern);
  if (!o.train.config.empty()) run.input("config", o.train.config);
  TrainConfig cfg = resolve_train(o.train, Phase::kEstimator);
  cfg.validate();
  const ExpanderOptions eo = resolve_expander(o.expander, config_file(o.train.config), cfg.seed);
  nlohmann::json resolved = cfg;
  if (o.pattern.empty()) resolved["expander"] = expander_json(eo);
  run.config(resolved);
  run.seed(cfg.seed);
  run.create();

  const Graph g = read_dataset(o.dataset);
  AttentionPattern pattern;
  if (o.pattern.empty()) {
    const ExpanderGraph x = build_expander(g.num_nodes(), eo);
    pattern = augment(g, x, cfg.layers);
    write_augmentation(run.dir(), x, pattern);
  } else {
    pattern = load_augmentation(o.pattern, g, cfg.layers);
  }
  const TrainResult r = train_estimator(g, pattern, cfg);
  if (o.train.verbose) print_history(r);
  nlohmann::json extra{{"edges_per_layer", pattern.edges_per_layer()},
                       {"mean_entropy", attention_entropy(r.scores)}};
  write_run(run.dir(), cfg, r, extra);
  run.finish();
  std::printf("estimator: best epoch %zu (tau %.4g), val %.4f, test %.4f\n", r.best_epoch,
              r.best_temperature, r.best_val_metric, r.test_metric);
}

// ---- train-final -------------------------------------------------------------------------

struct FinalOpts {
  OutputFlags out;
  std::string dataset;
  std::string scores;
  std::string degs;
  std::string k_prime;
  double tail_eps = 0.05;
  CLI::Option* degs_opt = nullptr;
  CLI::Option* k_prime_opt = nullptr;
  CLI::Option* tail_opt = nullptr;
  TrainFlags train;
};

// Estimator settings for the ablations that retrain it: the scores' own run
// configuration when available, estimator defaults otherwise.
TrainConfig retrain_config(const fs::path& scores_arg, const TrainConfig& final_cfg) {
  const fs::path run_cfg = scores_arg / "config.json";
  TrainConfig est = TrainConfig::estimator_defaults();
  est.seed = final_cfg.seed;
  est.layers = final_cfg.layers;
  if (fs::is_directory(scores_arg) && fs::is_regular_file(run_cfg)) {
    nlohmann::json j = read_json(run_cfg);
    j["phase"] = "estimator";
    from_json(j, est);
  }
  est.ablation = final_cfg.ablation;
  return est;
}

void run_train_final(const FinalOpts& o, const Context& ctx) {
  RunOutput run("train-final", o.out.out, o.out.force, ctx.argv);
  run.input("dataset", o.dataset);
  run.input("scores", resolve_scores_path(o.scores));
  if (!o.train.config.empty()) run.input("config", o.train.config);
  TrainConfig cfg = resolve_train(o.train, Phase::kFinal);
  ScoreSet scores = load_scores(o.scores);
  if (given(o.train.opts.at("layers")) && cfg.layers != scores.num_layers()) {
    throw ConfigError("--layers " + std::to_string(cfg.layers) + " does not match the " +
                      std::to_string(scores.num_layers()) + " score layers");
  }
  cfg.layers = scores.num_layers();
  if (given(o.degs_opt)) {
    cfg.degs = o.degs == "max" ? max_degrees(scores) : parse_size_list(o.degs, "--degs");
  }
  if (cfg.degs.size() != cfg.layers) {
    throw ConfigError("--degs lists " + std::to_string(cfg.degs.size()) + " degrees but the network has " +
                      std::to_string(cfg.layers) + " layers");
  }
  if (given(o.k_prime_opt)) {
    cfg.sampler.k_prime = o.k_prime == "auto" ? 0 : parse_size_list(o.k_prime, "--k-prime").at(0);
  }
  override_if(o.tail_opt, cfg.sampler.tail_eps, o.tail_eps);
  cfg.validate();
  const bool retrain = cfg.ablation == Ablation::kNoTemp || cfg.ablation == Ablation::kNoVnorm;
  std::optional<TrainConfig> est_cfg;
  if (retrain) {
    est_cfg = retrain_config(o.scores, cfg);
    est_cfg->validate();
  }
  nlohmann::json resolved = cfg;
  if (est_cfg) resolved["retrained_estimator"] = *est_cfg;
  run.config(resolved);
  run.seed(cfg.seed);
  run.create();

  const Graph g = read_dataset(o.dataset);
  nlohmann::json extra = nlohmann::json::object();
  if (est_cfg) {
    const TrainResult est = train_estimator(g, pattern_from_scores(scores), *est_cfg);
    write_run(run.dir() / "estimator", *est_cfg, est);
    scores = est.scores;
    extra["estimator_accuracy"] = est.test_metric;
  }
  TrainResult r = train_final(g, scores, cfg);
  if (o.train.verbose) print_history(r);
  extra["edge_percent"] = edge_percent(scores, cfg.degs, scores.layers.front().csr.num_edges());
  extra["degs"] = cfg.degs;
  r.scores = effective_scores(scores, cfg.ablation);
  write_run(run.dir(), cfg, r, extra);
  run.finish();
  std::printf("final (%s): best epoch %zu, val %.4f, test accuracy %.4f, edge percent %.4f\n",
              to_string(cfg.ablation), r.best_epoch, r.best_val_metric, r.test_metric,
              extra["edge_percent"].get<double>());
}

// ---- predict -----------------------------------------------------------------------------

struct PredictOpts {
  OutputFlags out;
  std::string run_dir;
  std::string dataset;
  std::string nodes = "all-test";
  std::size_t batch_size = 1;
  std::size_t samples = 1;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

std::vector<NodeId> read_node_file(const fs::path& path, std::size_t n) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read node file " + path.string());
  std::vector<NodeId> nodes;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    long long v = 0;
    if (!(ss >> v)) continue;
    if (v < 0 || static_cast<std::size_t>(v) >= n) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": node " +
                        std::to_string(v) + " out of range");
    }
    nodes.push_back(static_cast<NodeId>(v));
  }
  if (nodes.empty()) throw ConfigError("node file " + path.string() + " lists no nodes");
  return nodes;
}

fs::path dataset_of_run(const fs::path& run_dir) {
  const fs::path manifest = run_dir / "manifest.json";
  if (fs::is_regular_file(manifest)) {
    const nlohmann::json m = read_json(manifest);
    if (m.contains("inputs") && m["inputs"].contains("dataset")) {
      return m["inputs"]["dataset"]["path"].get<std::string>();
    }
  }
  throw ConfigError("run " + run_dir.string() + " records no dataset; pass --dataset");
}

void write_predictions(const fs::path& path, const Graph& g, const Prediction& p) {
  std::ofstream out(path);
  const std::size_t c = p.probs.shape()[1];
  out << "node,label,pred";
  for (std::size_t k = 0; k < c; ++k) out << ",prob_" << k;
  for (std::size_t k = 0; k < c; ++k) out << ",logit_" << k;
  out << '\n';
  char buf[64];
  for (std::size_t r = 0; r < p.nodes.size(); ++r) {
    long long pred = 0;
    if (g.task() == TaskKind::kMulticlass) {
      for (std::size_t k = 1; k < c; ++k) {
        if (p.probs(r, k) > p.probs(r, static_cast<std::size_t>(pred))) pred = static_cast<long long>(k);
      }
    } else {
      for (std::size_t k = 0; k < c; ++k) pred |= static_cast<long long>(p.probs(r, k) >= 0.5f) << k;
    }
    out << p.nodes[r] << ',' << g.labels()[p.nodes[r]] << ',' << pred;
    for (std::size_t k = 0; k < c; ++k) {
      std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(p.probs(r, k)));
      out << buf;
    }
    for (std::size_t k = 0; k < c; ++k) {
      std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(p.logits(r, k)));
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw FormatError("cannot write " + path.string());
}

void run_predict(const PredictOpts& o, const Context& ctx) {
  RunOutput run("predict", o.out.out, o.out.force, ctx.argv);
  const fs::path run_dir = o.run_dir;
  const fs::path dataset = o.dataset.empty() ? dataset_of_run(run_dir) : fs::path(o.dataset);
  run.input("run", run_dir);
  run.input("dataset", dataset);
  if (o.nodes != "all-test") run.input("nodes", o.nodes);
  nlohmann::json run_cfg = read_json(run_dir / "config.json");
  if (run_cfg.value("phase", std::string()) != "final") {
    throw ConfigError(run_dir.string() + " is not a final-network run");
  }
  TrainConfig cfg;
  from_json(run_cfg, cfg);
  const ModelConfig model = model_from_json(run_cfg.at("model"));
  if (o.batch_size == 0) throw ConfigError("--batch-size must be positive");
  if (o.samples == 0) throw ConfigError("--samples must be positive");
  PredictOptions po;
  po.batch_size = o.batch_size;
  po.samples = o.samples;
  po.seed = given(o.seed_opt) ? o.seed : cfg.seed;
  po.sampler = cfg.sampler;
  if (cfg.ablation == Ablation::kMax) po.sampler.policy = SamplingPolicy::kTopScore;
  run.config({{"run", run_dir.string()},
              {"dataset", dataset.string()},
              {"nodes", o.nodes},
              {"batch_size", po.batch_size},
              {"samples", po.samples},
              {"seed", po.seed},
              {"degs", cfg.degs}});
  run.seed(po.seed);
  run.create();

  const Graph g = read_dataset(dataset);
  const ScoreSet scores = load_scores(run_dir);
  Network<float> net(model, 0);
  net.params().assign(load_checkpoint(run_dir / "ckpt" / "best.ckpt"));
  const std::vector<NodeId> nodes =
      o.nodes == "all-test" ? g.nodes_in(Split::kTest) : read_node_file(o.nodes, g.num_nodes());
  const Prediction p = predict(model, net.params(), g, scores, cfg.degs, nodes, po);
  write_predictions(run.dir() / "predictions.csv", g, p);
  const double acc = accuracy(g, p);
  write_json(run.dir() / "metrics.json", {{"accuracy", acc},
                                          {"nodes", nodes.size()},
                                          {"batch_size", po.batch_size},
                                          {"samples", po.samples},
                                          {"seed", po.seed}});
  run.finish();
  std::printf("predicted %zu nodes, accuracy %.4f\n", nodes.size(), acc);
}

}  // namespace

void add_gen(CLI::App& app, Context& ctx) {
  auto o = std::make_shared<GenOpts>();
  CLI::App* sub = app.add_subcommand("gen", "Generate a synthetic dataset");
  sub->add_option("spec", o->spec_path, "Generator settings (JSON)")->check(CLI::ExistingFile);
  add_output_flags(sub, o->out);
  o->seed_opt = sub->add_option("--seed", o->seed, "Override the generator seed");
  o->gen_opt = sub->add_option("--generator", o->generator, "Override the generator")
                   ->check(CLI::IsMember({"bridge_components", "homophily_sbm", "heterophily_sbm"}));
  sub->callback([o, &ctx] { ctx.action = [o, &ctx] { run_gen(*o, ctx); }; });
}

void add_augment(CLI::App& app, Context& ctx) {
  auto o = std::make_shared<AugmentOpts>();
  CLI::App* sub = app.add_subcommand("augment", "Build an expander and the augmented attention pattern");
  sub->add_option("dataset", o->dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  add_output_flags(sub, o->out);
  sub->add_option("--config", o->config, "JSON with cycles, min_gap, max_retries, seed")
      ->check(CLI::ExistingFile);
  o->seed_opt = sub->add_option("--seed", o->seed, "Expander seed");
  add_expander_flags(sub, o->expander);
  sub->callback([o, &ctx] { ctx.action = [o, &ctx] { run_augment(*o, ctx); }; });
}

void add_train_estimator(CLI::App& app, Context& ctx) {
  auto o = std::make_shared<EstimatorOpts>();
  CLI::App* sub = app.add_subcommand("train-estimator", "Train the narrow score estimator");
  sub->add_option("dataset", o->dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  add_output_flags(sub, o->out);
  sub->add_option("--pattern", o->pattern, "Output of augment (built from the seed if absent)")
      ->check(CLI::ExistingPath);
  add_train_flags(sub, o->train, false);
  add_expander_flags(sub, o->expander);
  sub->callback([o, &ctx] { ctx.action = [o, &ctx] { run_train_estimator(*o, ctx); }; });
}

void add_train_final(CLI::App& app, Context& ctx) {
  auto o = std::make_shared<FinalOpts>();
  CLI::App* sub = app.add_subcommand("train-final", "Train the wide network on sampled attention");
  sub->add_option("dataset", o->dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  add_output_flags(sub, o->out);
  sub->add_option("--scores", o->scores, "Estimator run directory or score file")
      ->required()
      ->check(CLI::ExistingPath);
  o->degs_opt = sub->add_option("--degs", o->degs, "Per-layer degrees \"d1,d2,...\" or \"max\"");
  o->k_prime_opt = sub->add_option("--k-prime", o->k_prime, "Prefilter size or \"auto\"");
  o->tail_opt = sub->add_option("--tail-eps", o->tail_eps, "Prefilter tail mass bound")
                    ->check(CLI::NonNegativeNumber);
  add_train_flags(sub, o->train, true);
  sub->callback([o, &ctx] { ctx.action = [o, &ctx] { run_train_final(*o, ctx); }; });
}

void add_predict(CLI::App& app, Context& ctx) {
  auto o = std::make_shared<PredictOpts>();
  CLI::App* sub = app.add_subcommand("predict", "Predict with a trained final network");
  sub->add_option("run", o->run_dir, "train-final output directory")->required()->check(CLI::ExistingDirectory);
  add_output_flags(sub, o->out);
  sub->add_option("--dataset", o->dataset, "Dataset directory (default: the run's dataset)")
      ->check(CLI::ExistingDirectory);
  sub->add_option("--nodes", o->nodes, "Node id file or all-test")->capture_default_str();
  sub->add_option("--batch-size", o->batch_size, "Nodes per inference batch")->capture_default_str();
  sub->add_option("--samples", o->samples, "Sampled plans averaged per node")->capture_default_str();
  o->seed_opt = sub->add_option("--seed", o->seed, "Sampling seed (default: the run's seed)");
  sub->callback([o, &ctx] { ctx.action = [o, &ctx] { run_predict(*o, ctx); }; });
}

}  // namespace spex::cli
