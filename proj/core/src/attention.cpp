#include "spex/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "spex/error.hpp"
#include "spex/rng.hpp"

namespace spex {

void TemperatureSchedule::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("temperature gamma must lie in (0, 1)");
  if (!(floor > 0.0)) throw ConfigError("temperature floor must be positive");
  if (lambda < 0.0) throw ConfigError("temperature lambda must be nonnegative");
}

double temperature_at(const TemperatureSchedule& sched, double epoch) {
  if (epoch <= sched.lambda) return 1.0;
  return std::max(std::pow(sched.gamma, epoch - sched.lambda), sched.floor);
}

template <typename T>
Tensor<T> normalize_v(const Tensor<T>& v, T s, T eps) {
  if (v.rank() != 2) throw DimensionError("normalize_v expects a matrix");
  Tensor<T> out(v.shape());
  const std::size_t rows = v.dim(0), cols = v.dim(1);
  for (std::size_t i = 0; i < rows; ++i) {
    T nrm = 0;
    for (std::size_t j = 0; j < cols; ++j) nrm += v(i, j) * v(i, j);
    const T denom = std::max(std::sqrt(nrm), eps);
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = s * v(i, j) / denom;
  }
  return out;
}

template Tensor<float> normalize_v(const Tensor<float>&, float, float);
template Tensor<double> normalize_v(const Tensor<double>&, double, double);

const char* to_string(NormKind k) noexcept {
  switch (k) {
    case NormKind::kLayer: return "layer";
    case NormKind::kBatch: return "batch";
    case NormKind::kNone: return "none";
  }
  return "?";
}

NormKind norm_from_string(const std::string& s) {
  if (s == "layer") return NormKind::kLayer;
  if (s == "batch") return NormKind::kBatch;
  if (s == "none") return NormKind::kNone;
  throw ConfigError("unknown norm kind '" + s + "'");
}

void ModelConfig::validate() const {
  if (in_dim == 0) throw ConfigError("input dimension must be positive");
  if (width == 0 || heads == 0) throw ConfigError("width and heads must be positive");
  if (width % heads != 0) throw ConfigError("width must be divisible by the head count");
  if (layers == 0) throw ConfigError("at least one layer is required");
  if (out_dim == 0) throw ConfigError("output dimension must be positive");
  if (ffn_mult == 0) throw ConfigError("ffn multiplier must be positive");
  if (!(clip > 0.0)) throw ConfigError("clip must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

namespace {

template <typename T>
Tensor<T> glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> w(Shape{fan_in, fan_out});
  for (auto& x : w.values()) x = static_cast<T>(rng.uniform(-a, a));
  return w;
}

template <typename T>
Tensor<T> normal(Shape shape, Rng& rng) {
  Tensor<T> w(shape);
  for (auto& x : w.values()) x = static_cast<T>(rng.normal());
  return w;
}

std::string layer_prefix(std::size_t l) { return "layer" + std::to_string(l) + "."; }

// One attention output plus the head-averaged scores.
template <typename T>
struct Attended {
  ad::Var<T> out;
  std::vector<float> scores;
};

template <typename T>
void accumulate_scores(std::vector<float>& acc, const Tensor<T>& s, std::size_t heads) {
  if (acc.empty()) acc.assign(s.size(), 0.0f);
  const double w = 1.0 / static_cast<double>(heads);
  for (std::size_t e = 0; e < s.size(); ++e) {
    acc[e] += static_cast<float>(static_cast<double>(s[e]) * w);
  }
}

// Edge-list attention over CSR rows.
template <typename T>
Attended<T> attend_csr(ad::Var<T> q, ad::Var<T> k, ad::Var<T> v, ad::Var<T> etab,
                       ad::Var<T> btab, const LayerPattern& layer, std::size_t heads, T tau,
                       T clip) {
  const Csr& csr = layer.csr;
  const std::size_t m = csr.num_edges();
  std::vector<std::uint32_t> src(csr.col_idx.begin(), csr.col_idx.end());
  std::vector<std::uint32_t> dst(m), type(m);
  for (std::size_t i = 0; i < csr.num_rows(); ++i) {
    for (std::size_t e = csr.row_ptr[i]; e < csr.row_ptr[i + 1]; ++e) {
      dst[e] = static_cast<std::uint32_t>(i);
      type[e] = static_cast<std::uint32_t>(layer.types[e]);
    }
  }
  const std::size_t d = q.value().dim(1), dh = d / heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
  Attended<T> res;
  std::vector<ad::Var<T>> parts;
  for (std::size_t j = 0; j < heads; ++j) {
    auto qj = heads == 1 ? q : ad::slice_cols(q, j * dh, (j + 1) * dh);
    auto kj = heads == 1 ? k : ad::slice_cols(k, j * dh, (j + 1) * dh);
    auto vj = heads == 1 ? v : ad::slice_cols(v, j * dh, (j + 1) * dh);
    auto ej = heads == 1 ? etab : ad::slice_cols(etab, j * dh, (j + 1) * dh);
    auto bj = ad::slice_cols(btab, j, j + 1);
    auto ek = ad::mul(ad::gather_rows(ej, std::span<const std::uint32_t>(type)),
                      ad::gather_rows(kj, std::span<const std::uint32_t>(src)));
    auto dot = ad::row_sum(ad::mul(ek, ad::gather_rows(qj, std::span<const std::uint32_t>(dst))));
    auto logits = ad::add(ad::scale(dot, inv_sqrt),
                          ad::gather_rows(bj, std::span<const std::uint32_t>(type)));
    auto s = ad::segment_softmax(logits, std::span<const std::uint64_t>(csr.row_ptr), tau, clip);
    accumulate_scores(res.scores, s.value(), heads);
    parts.push_back(ad::segment_sum(
        ad::scale_rows(ad::gather_rows(vj, std::span<const std::uint32_t>(src)), s),
        std::span<const std::uint64_t>(csr.row_ptr)));
  }
  res.out = heads == 1 ? parts.front() : ad::concat_cols<T>(parts);
  return res;
}

// Fixed-degree attention: every query has plan.degree key slots, so the
// logits and the aggregation are regular batched products.
template <typename T>
Attended<T> attend_fixed(ad::Var<T> q, ad::Var<T> k, ad::Var<T> v, ad::Var<T> etab,
                         ad::Var<T> btab, const LayerPlan& plan, std::size_t heads, T tau,
                         T clip) {
  const std::size_t nq = plan.num_queries, deg = plan.degree;
  const std::size_t d = q.value().dim(1), dh = d / heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
  Tensor<T> mask(Shape{nq, deg});
  for (std::size_t e = 0; e < nq * deg; ++e) mask[e] = static_cast<T>(plan.mask[e]);
  const std::span<const std::uint32_t> keys(plan.key_local);
  const std::span<const std::uint32_t> types(plan.key_type);
  Attended<T> res;
  std::vector<ad::Var<T>> parts;
  for (std::size_t j = 0; j < heads; ++j) {
    auto qj = heads == 1 ? q : ad::slice_cols(q, j * dh, (j + 1) * dh);
    auto kj = heads == 1 ? k : ad::slice_cols(k, j * dh, (j + 1) * dh);
    auto vj = heads == 1 ? v : ad::slice_cols(v, j * dh, (j + 1) * dh);
    auto ej = heads == 1 ? etab : ad::slice_cols(etab, j * dh, (j + 1) * dh);
    auto bj = ad::slice_cols(btab, j, j + 1);
    auto ek = ad::reshape(ad::mul(ad::gather_rows(kj, keys), ad::gather_rows(ej, types)),
                          Shape{nq, deg, dh});
    auto dot = ad::reshape(ad::batched_matmul(ek, ad::reshape(qj, Shape{nq, dh, 1})),
                           Shape{nq, deg});
    auto logits = ad::add(ad::scale(dot, inv_sqrt),
                          ad::reshape(ad::gather_rows(bj, types), Shape{nq, deg}));
    auto s = ad::masked_softmax(logits, mask, tau, clip);
    accumulate_scores(res.scores, s.value(), heads);
    auto vg = ad::reshape(ad::gather_rows(vj, keys), Shape{nq, deg, dh});
    parts.push_back(ad::reshape(ad::batched_matmul(ad::reshape(s, Shape{nq, 1, deg}), vg),
                                Shape{nq, dh}));
  }
  res.out = heads == 1 ? parts.front() : ad::concat_cols<T>(parts);
  return res;
}

}  // namespace

template <typename T>
struct Network<T>::LayerVars {
  ad::Var<T> wq, wk, wv, edge_emb, we, wb, v_scale, w1, b1, w2, b2;
};

template <typename T>
Network<T>::Network(ModelConfig config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(init_seed, {0x1417}));
  const std::size_t d = config_.width, ff = config_.ffn_mult * config_.width;
  params_.add("embed.W", glorot<T>(config_.in_dim, d, rng));
  params_.add("embed.b", Tensor<T>(Shape{d}));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = layer_prefix(l);
    params_.add(p + "Wq", glorot<T>(d, d, rng));
    params_.add(p + "Wk", glorot<T>(d, d, rng));
    params_.add(p + "Wv", glorot<T>(d, d, rng));
    params_.add(p + "edge_emb", normal<T>(Shape{kNumEdgeTypes, d}, rng));
    params_.add(p + "We", glorot<T>(d, d, rng));
    params_.add(p + "Wb", glorot<T>(d, config_.heads, rng));
    params_.add(p + "v_scale", Tensor<T>::scalar(T{1}));
    params_.add(p + "W1", glorot<T>(d, ff, rng));
    params_.add(p + "b1", Tensor<T>(Shape{ff}));
    params_.add(p + "W2", glorot<T>(ff, d, rng));
    params_.add(p + "b2", Tensor<T>(Shape{d}));
    for (const char* n : {"norm1.", "norm2."}) {
      if (config_.norm == NormKind::kNone) continue;
      params_.add(p + n + "gamma", Tensor<T>(Shape{d}, T{1}));
      params_.add(p + n + "beta", Tensor<T>(Shape{d}));
      if (config_.norm == NormKind::kBatch) {
        params_.add(p + n + "mean", Tensor<T>(Shape{d}), false);
        params_.add(p + n + "var", Tensor<T>(Shape{d}, T{1}), false);
      }
    }
  }
  params_.add("head.W", glorot<T>(d, config_.out_dim, rng));
  params_.add("head.b", Tensor<T>(Shape{config_.out_dim}));
}

template <typename T>
Network<T>::Network(ModelConfig config, ParamStore<T> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  Network<T> shape_ref(config_, 0);
  if (shape_ref.params_.size() != params_.size()) {
    throw DimensionError("parameter set does not match the model configuration");
  }
  for (const auto& e : shape_ref.params_.entries()) {
    if (!(params_.at(e.name).shape() == e.value.shape())) {
      throw DimensionError("parameter " + e.name + " has the wrong shape");
    }
  }
}

template <typename T>
typename Network<T>::Bound Network<T>::bind(ad::Tape<T>& tape) const {
  Bound b;
  b.vars.reserve(params_.size());
  for (const auto& e : params_.entries()) {
    b.vars.push_back(e.trainable ? tape.parameter(e.value) : tape.constant(e.value));
  }
  return b;
}

template <typename T>
std::vector<Tensor<T>> Network<T>::gradients(const ad::Tape<T>& tape, const Bound& bound) const {
  std::vector<Tensor<T>> out(params_.size());
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (params_.entries()[k].trainable) out[k] = tape.grad(bound.vars[k]);
  }
  return out;
}

template <typename T>
typename Network<T>::LayerVars Network<T>::layer_vars(const Bound& bound, std::size_t l) const {
  const std::string p = layer_prefix(l);
  auto v = [&](const char* n) { return bound.vars[params_.index_of(p + n)]; };
  return LayerVars{v("Wq"), v("Wk"), v("Wv"), v("edge_emb"), v("We"), v("Wb"),
                   v("v_scale"), v("W1"), v("b1"), v("W2"), v("b2")};
}

template <typename T>
ad::Var<T> Network<T>::norm(ad::Tape<T>&, const Bound& bound, std::size_t l, int which,
                            ad::Var<T> x, bool training) {
  if (config_.norm == NormKind::kNone) return x;
  const std::string p = layer_prefix(l) + (which == 1 ? "norm1." : "norm2.");
  auto gamma = bound.vars[params_.index_of(p + "gamma")];
  auto beta = bound.vars[params_.index_of(p + "beta")];
  if (config_.norm == NormKind::kLayer) {
    return ad::layer_norm(x, gamma, beta, static_cast<T>(config_.norm_eps));
  }
  ad::BatchNormState<T> state{&params_.at(p + "mean"), &params_.at(p + "var")};
  return ad::batch_norm(x, gamma, beta, state, training, static_cast<T>(config_.bn_momentum),
                        static_cast<T>(config_.norm_eps));
}

template <typename T>
ad::Var<T> Network<T>::dropout(ad::Tape<T>&, ad::Var<T> x, const ForwardOptions& options,
                               std::size_t l, std::uint64_t site) {
  if (!options.training || config_.dropout <= 0.0) return x;
  Rng rng(derive_seed(options.dropout_seed, {l, site}));
  const T keep = static_cast<T>(1.0 / (1.0 - config_.dropout));
  Tensor<T> mask(x.shape());
  for (auto& m : mask.values()) m = rng.bernoulli(config_.dropout) ? T{0} : keep;
  return ad::apply_mask(x, mask);
}

template <typename T>
ad::Var<T> Network<T>::block_tail(ad::Tape<T>& tape, const Bound& bound, std::size_t l,
                                  ad::Var<T> hq, ad::Var<T> attn, const ForwardOptions& options) {
  const LayerVars lv = layer_vars(bound, l);
  attn = dropout(tape, attn, options, l, 1);
  auto hmid = norm(tape, bound, l, 1, ad::add(hq, attn), options.training);
  auto f = ad::relu(ad::add_bias(ad::matmul(hmid, lv.w1), lv.b1));
  f = dropout(tape, f, options, l, 2);
  f = ad::add_bias(ad::matmul(f, lv.w2), lv.b2);
  return norm(tape, bound, l, 2, ad::add(hmid, f), options.training);
}

template <typename T>
ForwardResult<T> Network<T>::forward_full(ad::Tape<T>& tape, const Bound& bound,
                                          const Tensor<T>& features,
                                          const AttentionPattern& pattern,
                                          const ForwardOptions& options) {
  if (pattern.num_layers() != config_.layers) {
    throw DimensionError("pattern has " + std::to_string(pattern.num_layers()) +
                         " layers, model has " + std::to_string(config_.layers));
  }
  if (features.rank() != 2 || features.dim(0) != pattern.num_nodes() ||
      features.dim(1) != config_.in_dim) {
    throw DimensionError("feature matrix does not match the pattern / model input");
  }
  const T tau = static_cast<T>(options.temperature);
  const T clip = static_cast<T>(config_.clip);
  ForwardResult<T> res;
  auto x = tape.constant(features);
  auto h = ad::add_bias(ad::matmul(x, bound.vars[params_.index_of("embed.W")]),
                        bound.vars[params_.index_of("embed.b")]);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const LayerVars lv = layer_vars(bound, l);
    auto q = ad::matmul(h, lv.wq);
    auto k = ad::matmul(h, lv.wk);
    auto v = ad::matmul(h, lv.wv);
    if (config_.normalize_v) v = ad::normalize_rows(v, lv.v_scale, static_cast<T>(config_.v_eps));
    auto etab = ad::matmul(lv.edge_emb, lv.we);
    auto btab = ad::matmul(lv.edge_emb, lv.wb);
    auto att = attend_csr(q, k, v, etab, btab, pattern.layer(l), config_.heads, tau, clip);
    res.scores.push_back(std::move(att.scores));
    h = block_tail(tape, bound, l, h, att.out, options);
  }
  res.logits = ad::add_bias(ad::matmul(h, bound.vars[params_.index_of("head.W")]),
                            bound.vars[params_.index_of("head.b")]);
  return res;
}

template <typename T>
ForwardResult<T> Network<T>::forward_plan(ad::Tape<T>& tape, const Bound& bound,
                                          const Tensor<T>& features, const BatchPlan& plan,
                                          const ForwardOptions& options) {
  if (plan.layers.size() != config_.layers) {
    throw DimensionError("plan has " + std::to_string(plan.layers.size()) +
                         " layers, model has " + std::to_string(config_.layers));
  }
  if (features.rank() != 2 || features.dim(1) != config_.in_dim) {
    throw DimensionError("feature matrix does not match the model input");
  }
  const T tau = static_cast<T>(options.temperature);
  const T clip = static_cast<T>(config_.clip);
  const auto& input = plan.input_nodes();
  Tensor<T> xin(Shape{input.size(), config_.in_dim});
  for (std::size_t r = 0; r < input.size(); ++r) {
    if (input[r] >= features.dim(0)) throw DimensionError("plan node outside the feature matrix");
    std::copy_n(features.data() + static_cast<std::size_t>(input[r]) * config_.in_dim,
                config_.in_dim, xin.data() + r * config_.in_dim);
  }
  ForwardResult<T> res;
  auto h = ad::add_bias(ad::matmul(tape.constant(std::move(xin)),
                                   bound.vars[params_.index_of("embed.W")]),
                        bound.vars[params_.index_of("embed.b")]);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const LayerPlan& lp = plan.layers[l];
    if (h.value().dim(0) != lp.nodes.size()) {
      throw DimensionError("plan layer " + std::to_string(l) + " does not chain");
    }
    const LayerVars lv = layer_vars(bound, l);
    std::vector<std::uint32_t> qrows(lp.num_queries);
    std::iota(qrows.begin(), qrows.end(), 0u);
    auto hq = lp.num_queries == lp.nodes.size()
                  ? h
                  : ad::gather_rows(h, std::span<const std::uint32_t>(qrows));
    auto q = ad::matmul(hq, lv.wq);
    auto k = ad::matmul(h, lv.wk);
    auto v = ad::matmul(h, lv.wv);
    if (config_.normalize_v) v = ad::normalize_rows(v, lv.v_scale, static_cast<T>(config_.v_eps));
    auto etab = ad::matmul(lv.edge_emb, lv.we);
    auto btab = ad::matmul(lv.edge_emb, lv.wb);
    auto att = attend_fixed(q, k, v, etab, btab, lp, config_.heads, tau, clip);
    res.scores.push_back(std::move(att.scores));
    h = block_tail(tape, bound, l, hq, att.out, options);
  }
  res.logits = ad::add_bias(ad::matmul(h, bound.vars[params_.index_of("head.W")]),
                            bound.vars[params_.index_of("head.b")]);
  return res;
}

template <typename T>
Tensor<T> feature_matrix(const Graph& g) {
  const auto f = g.features();
  return Tensor<T>(Shape{g.num_nodes(), g.feature_dim()}, std::vector<T>(f.begin(), f.end()));
}

template <typename T>
Tensor<T> feature_rows(const Graph& g, std::span<const NodeId> nodes) {
  Tensor<T> out(Shape{nodes.size(), g.feature_dim()});
  for (std::size_t r = 0; r < nodes.size(); ++r) {
    const auto row = g.feature_row(nodes[r]);
    std::copy(row.begin(), row.end(), out.data() + r * g.feature_dim());
  }
  return out;
}

template class Network<float>;
template class Network<double>;
template Tensor<float> feature_matrix<float>(const Graph&);
template Tensor<double> feature_matrix<double>(const Graph&);
template Tensor<float> feature_rows<float>(const Graph&, std::span<const NodeId>);
template Tensor<double> feature_rows<double>(const Graph&, std::span<const NodeId>);

}  // namespace spex
