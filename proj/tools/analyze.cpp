#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <optional>

#include "cli_support.hpp"
#include "commands.hpp"
#include "spex/analysis.hpp"
#include "spex/datasets.hpp"
#include "spex/error.hpp"
#include "spex/expander.hpp"

namespace spex::cli {

namespace {

struct CommonOpts {
  std::string out;
  bool force = false;
  std::string scores;
};

CLI::App* add_mode(CLI::App* analyze, const char* name, const char* help, CommonOpts& c,
                   bool needs_scores) {
  CLI::App* sub = analyze->add_subcommand(name, help);
  sub->add_option("--out", c.out, "Output directory")->required();
  sub->add_flag("--force", c.force, "Replace an existing output directory");
  if (needs_scores) {
    sub->add_option("--scores", c.scores, "Estimator run directory or score file")
        ->required()
        ->check(CLI::ExistingPath);
  }
  return sub;
}

class Csv {
 public:
  Csv(const fs::path& path, const std::string& header) : path_(path), out_(path) {
    out_ << header << '\n';
  }
  void close() {
    out_.close();
    if (!out_) throw FormatError("cannot write " + path_.string());
  }
  Csv& field(const std::string& s) { return sep() << s, *this; }
  Csv& field(std::size_t v) { return sep() << v, *this; }
  Csv& field(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return sep() << buf, *this;
  }
  void end() {
    out_ << '\n';
    first_ = true;
  }

 private:
  std::ofstream& sep() {
    if (!first_) out_ << ',';
    first_ = false;
    return out_;
  }
  fs::path path_;
  std::ofstream out_;
  bool first_ = true;
};

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

// ---- score statistics --------------------------------------------------------------------

void run_entropy(const CommonOpts& c, const Context& ctx) {
  RunOutput run("analyze entropy", c.out, c.force, ctx.argv);
  run.input("scores", resolve_scores_path(c.scores));
  run.create();
  const std::vector<double> h = attention_entropy(load_scores(c.scores));
  {
    Csv csv(run / "entropy.csv", "layer,mean_entropy");
    for (std::size_t l = 0; l < h.size(); ++l) {
      csv.field(l + 1).field(h[l]);
      csv.end();
    }
    csv.close();
  }
  bool nonincreasing = true;
  for (std::size_t l = 1; l < h.size(); ++l) nonincreasing &= h[l] <= h[l - 1];
  write_json(run / "summary.json", {{"mean_entropy", h}, {"nonincreasing", nonincreasing}});
  run.finish();
  for (std::size_t l = 0; l < h.size(); ++l) std::printf("layer %zu: mean entropy %.4f\n", l + 1, h[l]);
}

struct TopkOpts {
  CommonOpts c;
  std::size_t k_max = 8;
};

void run_topk(const TopkOpts& o, const Context& ctx) {
  RunOutput run("analyze topk", o.c.out, o.c.force, ctx.argv);
  run.input("scores", resolve_scores_path(o.c.scores));
  run.config({{"k_max", o.k_max}});
  run.create();
  const auto stats = topk_mass(load_scores(o.c.scores), o.k_max);
  Csv csv(run / "topk.csv", "layer,k,mean,median,q1,q3");
  for (std::size_t l = 0; l < stats.size(); ++l) {
    for (const TopkStat& s : stats[l]) {
      csv.field(l + 1).field(s.k).field(s.mean).field(s.median).field(s.q1).field(s.q3);
      csv.end();
    }
  }
  csv.close();
  run.finish();
  std::printf("top-k mass for k = 1..%zu over %zu layers\n", o.k_max, stats.size());
}

void run_edge_types(const CommonOpts& c, const Context& ctx) {
  RunOutput run("analyze edge-types", c.out, c.force, ctx.argv);
  run.input("scores", resolve_scores_path(c.scores));
  run.create();
  const ScoreSet scores = load_scores(c.scores);
  const EdgeTypeAttribution a = edge_type_attribution(scores, pattern_from_scores(scores));
  {
    Csv csv(run / "edge_types.csv", "layer,graph,expander,self_loop");
    auto row = [&](const std::string& label, const TypeMass& m) {
      csv.field(label).field(m[0]).field(m[1]).field(m[2]);
      csv.end();
    };
    for (std::size_t l = 0; l < a.per_layer.size(); ++l) row(std::to_string(l + 1), a.per_layer[l]);
    row("all", a.overall);
    csv.close();
  }
  run.finish();
  std::printf("overall mass: graph %.4f, expander %.4f, self-loop %.4f\n", a.overall[0],
              a.overall[1], a.overall[2]);
}

// ---- consistency -------------------------------------------------------------------------

struct ConsistencyOpts {
  CommonOpts c;
  std::string dataset;
  std::string pattern;
  std::string config;
  std::string widths = "4,32";
  std::size_t runs = 10;
  std::size_t reference_width = 32;
  std::size_t random_samples = 10;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  CLI::Option* epochs_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
};

void run_consistency(const ConsistencyOpts& o, const Context& ctx) {
  RunOutput run("analyze consistency", o.c.out, o.c.force, ctx.argv);
  run.input("dataset", o.dataset);
  if (!o.pattern.empty()) run.input("pattern", o.pattern);
  if (!o.config.empty()) run.input("config", o.config);
  ConsistencyConfig cc;
  if (!o.config.empty()) {
    nlohmann::json j = read_json(o.config);
    j["phase"] = "estimator";
    from_json(j, cc.base);
  }
  if (o.epochs_opt->count()) cc.base.epochs = o.epochs;
  if (o.seed_opt->count()) cc.base.seed = o.seed;
  cc.widths = parse_size_list(o.widths, "--widths");
  if (std::find(cc.widths.begin(), cc.widths.end(), o.reference_width) == cc.widths.end()) {
    throw ConfigError("--reference-width must be one of --widths");
  }
  if (o.runs < 4) throw ConfigError("--runs must be at least 4 (the reference is split in halves)");
  cc.runs_per_width = o.runs;
  cc.options.reference_width = o.reference_width;
  cc.options.random_samples = o.random_samples;
  cc.options.seed = cc.base.seed;
  cc.base.validate();
  nlohmann::json base = cc.base;
  run.config({{"base", base},
              {"widths", cc.widths},
              {"runs", cc.runs_per_width},
              {"reference_width", o.reference_width},
              {"random_samples", o.random_samples}});
  run.seed(cc.base.seed);
  run.create();

  const Graph g = read_dataset(o.dataset);
  AttentionPattern pattern;
  if (o.pattern.empty()) {
    ExpanderOptions eo;
    eo.seed = cc.base.seed;
    pattern = augment(g, build_expander(g.num_nodes(), eo), cc.base.layers);
  } else {
    const fs::path file = fs::is_directory(o.pattern) ? fs::path(o.pattern) / "pattern.tsv" : fs::path(o.pattern);
    pattern = AttentionPattern(
        std::vector<LayerPattern>(cc.base.layers, load_pattern(file, g.num_nodes())));
  }
  const ConsistencyReport r = consistency_study(g, pattern, cc);
  {
    Csv csv(run / "consistency.csv", "source,layer,node,distance");
    for (std::size_t s = 0; s < r.sources.size(); ++s)
      for (std::size_t l = 0; l < r.distances[s].size(); ++l)
        for (std::size_t i = 0; i < r.distances[s][l].size(); ++i) {
          csv.field(r.sources[s]).field(l + 1).field(i).field(r.distances[s][l][i]);
          csv.end();
        }
    csv.close();
  }
  nlohmann::json sources = nlohmann::json::object();
  const std::size_t uni = r.source_index("uniform");
  const std::size_t rnd = r.source_index("random");
  for (std::size_t s = 0; s < r.sources.size(); ++s) {
    nlohmann::json layer_means = nlohmann::json::array();
    for (std::size_t l = 0; l < r.distances[s].size(); ++l) layer_means.push_back(r.layer_mean(s, l));
    nlohmann::json e{{"pooled_mean", r.pooled_mean(s)}, {"layer_means", layer_means}};
    if (s != uni && s != rnd) {
      e["fraction_below_uniform"] = r.fraction_below(s, uni);
      e["fraction_below_random"] = r.fraction_below(s, rnd);
    }
    sources[r.sources[s]] = e;
    std::printf("%-8s pooled energy distance %.5f\n", r.sources[s].c_str(), r.pooled_mean(s));
  }
  write_json(run / "summary.json", {{"sources", sources}});
  run.finish();
}

// ---- theory checks -----------------------------------------------------------------------

struct JltOpts {
  CommonOpts c;
  std::size_t n = 64;
  std::size_t dim = 512;
  std::string dims = "16,32,64,128,256";
  std::size_t trials = 50;
  std::uint64_t seed = 0;
};

void run_jlt(const JltOpts& o, const Context& ctx) {
  RunOutput run("analyze jlt", o.c.out, o.c.force, ctx.argv);
  const std::vector<std::size_t> dims = parse_size_list(o.dims, "--dims");
  if (o.n == 0 || o.dim == 0 || o.trials == 0) throw ConfigError("--n, --dim and --trials must be positive");
  for (std::size_t d : dims) {
    if (d == 0) throw ConfigError("--dims entries must be positive");
  }
  run.config({{"n", o.n}, {"dim", o.dim}, {"dims", dims}, {"trials", o.trials}});
  run.seed(o.seed);
  run.create();

  // Unit-norm Gaussian queries and keys, dense pattern.
  Rng rng(o.seed);
  Tensor<double> q(Shape{o.n, o.dim}), k(Shape{o.n, o.dim});
  for (auto* m : {&q, &k})
    for (std::size_t i = 0; i < o.n; ++i) {
      double norm = 0.0;
      for (std::size_t j = 0; j < o.dim; ++j) norm += ((*m)(i, j) = rng.normal()) * (*m)(i, j);
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < o.dim; ++j) (*m)(i, j) /= norm;
    }
  std::vector<std::pair<NodeId, NodeId>> edges;
  for (NodeId i = 0; i < o.n; ++i)
    for (NodeId j = 0; j < o.n; ++j) edges.emplace_back(i, j);
  const Csr full = Csr::from_edges(o.n, edges, false);

  std::vector<double> xs, medians;
  {
    Csv csv(run / "jlt.csv", "d,trial,deviation");
    for (std::size_t d : dims) {
      const std::vector<double> dev =
          jlt_compress_check(q, k, full, d, o.trials, derive_seed(o.seed, {d}));
      for (std::size_t t = 0; t < dev.size(); ++t) {
        csv.field(d).field(t).field(dev[t]);
        csv.end();
      }
      xs.push_back(static_cast<double>(d));
      medians.push_back(median(dev));
      std::printf("d = %4zu: median max-ratio deviation %.5f\n", d, medians.back());
    }
    csv.close();
  }
  nlohmann::json summary{{"dims", dims}, {"median_deviation", medians}};
  if (dims.size() >= 2) summary["loglog_slope"] = loglog_slope(xs, medians);
  write_json(run / "summary.json", summary);
  run.finish();
}

struct SpectralOpts {
  CommonOpts c;
  std::size_t n = 64;
  std::size_t row_nnz = 16;
  double spread = 2.0;
  std::size_t log2_min = 8;
  std::size_t log2_max = 16;
  std::size_t seeds = 20;
  std::uint64_t seed = 0;
  std::size_t layer = 1;
};

void run_spectral(const SpectralOpts& o, const Context& ctx) {
  RunOutput run("analyze spectral", o.c.out, o.c.force, ctx.argv);
  if (!o.c.scores.empty()) run.input("scores", resolve_scores_path(o.c.scores));
  if (o.log2_min > o.log2_max || o.log2_max > 40) throw ConfigError("need --log2-min <= --log2-max <= 40");
  if (o.seeds == 0) throw ConfigError("--seeds must be positive");
  nlohmann::json cfg{{"log2_min", o.log2_min}, {"log2_max", o.log2_max}, {"seeds", o.seeds}};
  std::optional<SparseMatrix> fixed;
  if (!o.c.scores.empty()) {
    const ScoreSet s = load_scores(o.c.scores);
    if (o.layer == 0 || o.layer > s.num_layers()) throw ConfigError("--layer out of range");
    const ScoreLayer& sl = s.layers[o.layer - 1];
    // Stored scores are single precision; renormalize rows in double.
    fixed = SparseMatrix{sl.csr, std::vector<double>(sl.scores.begin(), sl.scores.end())};
    for (std::size_t i = 0; i < sl.csr.num_rows(); ++i) {
      const std::size_t b = sl.csr.row_ptr[i], e = sl.csr.row_ptr[i + 1];
      double sum = 0.0;
      for (std::size_t p = b; p < e; ++p) sum += fixed->values[p];
      for (std::size_t p = b; p < e; ++p) fixed->values[p] /= sum;
    }
    cfg["layer"] = o.layer;
  } else {
    if (o.row_nnz == 0 || o.row_nnz > o.n) throw ConfigError("need 0 < --row-nnz <= --n");
    cfg.update({{"n", o.n}, {"row_nnz", o.row_nnz}, {"spread", o.spread}});
  }
  run.config(cfg);
  run.seed(o.seed);
  run.create();

  std::vector<double> xs, medians;
  bool support_ok = true;
  {
    Csv csv(run / "spectral.csv", "s,seed,relative_error,nnz");
    for (std::size_t e = o.log2_min; e <= o.log2_max; ++e) {
      std::vector<double> errs;
      for (std::uint64_t k = 0; k < o.seeds; ++k) {
        const std::uint64_t seed = o.seed + k;
        Rng mr(seed);
        const SparseMatrix a = fixed ? *fixed : random_score_matrix(o.n, o.row_nnz, o.spread, mr);
        Rng sr(derive_seed(seed, {static_cast<std::uint64_t>(e)}));
        const std::size_t s = std::size_t{1} << e;
        const SampledMatrix out = spectral_sample_check(a, s, sr);
        for (std::size_t i = 0; i < a.csr.num_rows(); ++i)
          for (NodeId j : out.b.csr.row(i)) support_ok &= a.csr.find(i, j) != Csr::npos;
        errs.push_back(out.relative_error);
        csv.field(s).field(static_cast<std::size_t>(seed)).field(out.relative_error).field(out.b.csr.num_edges());
        csv.end();
      }
      xs.push_back(std::ldexp(1.0, static_cast<int>(e)));
      medians.push_back(median(errs));
    }
    csv.close();
  }
  nlohmann::json summary{{"s", xs}, {"median_relative_error", medians}, {"support_contained", support_ok}};
  if (xs.size() >= 2) summary["loglog_slope"] = loglog_slope(xs, medians);
  write_json(run / "summary.json", summary);
  run.finish();
  if (xs.size() >= 2) std::printf("log-log slope %.4f\n", summary["loglog_slope"].get<double>());
  std::printf("support %s\n", support_ok ? "contained" : "VIOLATED");
}

}  // namespace

void add_analyze(CLI::App& app, Context& ctx) {
  CLI::App* analyze = app.add_subcommand("analyze", "Score and theory analyses");
  analyze->require_subcommand(1);

  {
    auto c = std::make_shared<CommonOpts>();
    add_mode(analyze, "entropy", "Mean attention entropy per layer", *c, true)
        ->callback([c, &ctx] { ctx.action = [c, &ctx] { run_entropy(*c, ctx); }; });
  }
  {
    auto o = std::make_shared<TopkOpts>();
    CLI::App* sub = add_mode(analyze, "topk", "Top-k attention mass per layer", o->c, true);
    sub->add_option("--k-max", o->k_max, "Largest k")->check(CLI::PositiveNumber)->capture_default_str();
    sub->callback([o, &ctx] { ctx.action = [o, &ctx] { run_topk(*o, ctx); }; });
  }
  {
    auto c = std::make_shared<CommonOpts>();
    add_mode(analyze, "edge-types", "Attention mass per edge type", *c, true)
        ->callback([c, &ctx] { ctx.action = [c, &ctx] { run_edge_types(*c, ctx); }; });
  }
  {
    auto o = std::make_shared<ConsistencyOpts>();
    CLI::App* sub = add_mode(analyze, "consistency", "Energy distances between estimator widths", o->c, false);
    sub->add_option("dataset", o->dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    sub->add_option("--pattern", o->pattern, "Output of augment")->check(CLI::ExistingPath);
    sub->add_option("--config", o->config, "Estimator settings (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--widths", o->widths, "Estimator widths")->capture_default_str();
    sub->add_option("--runs", o->runs, "Runs per width")->capture_default_str();
    sub->add_option("--reference-width", o->reference_width, "Reference width")->capture_default_str();
    sub->add_option("--random-samples", o->random_samples, "Random-logit baseline draws")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    o->epochs_opt = sub->add_option("--epochs", o->epochs, "Estimator epochs");
    o->seed_opt = sub->add_option("--seed", o->seed, "Base seed");
    sub->callback([o, &ctx] { ctx.action = [o, &ctx] { run_consistency(*o, ctx); }; });
  }
  {
    auto o = std::make_shared<JltOpts>();
    CLI::App* sub = add_mode(analyze, "jlt", "Softmax ratio deviation under random projection", o->c, false);
    sub->add_option("--n", o->n, "Points")->capture_default_str();
    sub->add_option("--dim", o->dim, "Ambient dimension")->capture_default_str();
    sub->add_option("--dims", o->dims, "Projected dimensions")->capture_default_str();
    sub->add_option("--trials", o->trials, "Projections per dimension")->capture_default_str();
    sub->add_option("--seed", o->seed, "Seed")->capture_default_str();
    sub->callback([o, &ctx] { ctx.action = [o, &ctx] { run_jlt(*o, ctx); }; });
  }
  {
    auto o = std::make_shared<SpectralOpts>();
    CLI::App* sub = add_mode(analyze, "spectral", "Spectral error of entry sampling", o->c, false);
    sub->add_option("--scores", o->c.scores, "Use one layer of a score set as the matrix")
        ->check(CLI::ExistingPath);
    sub->add_option("--layer", o->layer, "Score layer (1-based)")->capture_default_str();
    sub->add_option("--n", o->n, "Rows of the random matrix")->capture_default_str();
    sub->add_option("--row-nnz", o->row_nnz, "Entries per row")->capture_default_str();
    sub->add_option("--spread", o->spread, "Logit range")->capture_default_str();
    sub->add_option("--log2-min", o->log2_min, "Smallest log2 sample count")->capture_default_str();
    sub->add_option("--log2-max", o->log2_max, "Largest log2 sample count")->capture_default_str();
    sub->add_option("--seeds", o->seeds, "Seeds per sample count")->capture_default_str();
    sub->add_option("--seed", o->seed, "First seed")->capture_default_str();
    sub->callback([o, &ctx] { ctx.action = [o, &ctx] { run_spectral(*o, ctx); }; });
  }
}

}  // namespace spex::cli
