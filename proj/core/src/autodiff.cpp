#include "spex/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace spex::ad {

// ---- tape -------------------------------------------------------------------

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::parameter(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> parents, Backward backward) {
  return record(std::move(value), std::span<const Var<T>>(parents.begin(), parents.size()),
                std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::span<const Var<T>> parents, Backward backward) {
  bool needs = false;
  for (const auto& p : parents) {
    if (&p.tape() != this) throw ContractViolation("autodiff: mixing vars from different tapes");
    needs = needs || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : Backward{}, needs});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
Tensor<T>* Tape<T>::grad_sink(Var<T> v) {
  Node& n = nodes_.at(v.id());
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return &n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (&loss.tape() != this) throw ContractViolation("backward: loss from another tape");
  Node& root = nodes_.at(loss.id());
  if (!root.requires_grad) throw ContractViolation("backward on untracked graph");
  if (root.value.size() != 1) throw ContractViolation("backward: loss must be a scalar");
  for (auto& n : nodes_) n.grad = Tensor<T>();
  root.grad = Tensor<T>(root.value.shape(), T{1});
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

namespace {

template <typename T, typename Fn>
void accumulate(Tape<T>& t, Var<T> v, Fn&& fn) {
  if (Tensor<T>* g = t.grad_sink(v)) fn(*g);
}

template <typename T>
void require_matrix(const Var<T>& a, const char* op) {
  if (a.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expects a matrix, got " + a.shape().to_string());
  }
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (!(a.shape() == b.shape())) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape().to_string() + " vs " +
                         b.shape().to_string());
  }
}

}  // namespace

// ---- linear algebra ------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tensor<T> out = spex::matmul(a.value(), b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, [&](Tensor<T>& ga) {
      const Tensor<T> d = spex::matmul(g, spex::transpose(b.value()));
      for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i];
    });
    accumulate(t, b, [&](Tensor<T>& gb) {
      const Tensor<T> d = spex::matmul(spex::transpose(a.value()), g);
      for (std::size_t i = 0; i < d.size(); ++i) gb[i] += d[i];
    });
  });
}

template <typename T>
Var<T> batched_matmul(Var<T> a, Var<T> b) {
  Tensor<T> out = spex::batched_matmul(a.value(), b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    const std::size_t batch = av.dim(0), p = av.dim(1), q = av.dim(2), r = bv.dim(2);
    accumulate(t, a, [&](Tensor<T>& ga) {
      // dA_s = G_s B_s^T
      for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t i = 0; i < p; ++i) {
          for (std::size_t k = 0; k < q; ++k) {
            T acc = 0;
            for (std::size_t j = 0; j < r; ++j) acc += g(s, i, j) * bv(s, k, j);
            ga(s, i, k) += acc;
          }
        }
      }
    });
    accumulate(t, b, [&](Tensor<T>& gb) {
      // dB_s = A_s^T G_s
      for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t i = 0; i < p; ++i) {
          for (std::size_t k = 0; k < q; ++k) {
            const T aik = av(s, i, k);
            for (std::size_t j = 0; j < r; ++j) gb(s, k, j) += aik * g(s, i, j);
          }
        }
      }
    });
  });
}

// ---- elementwise -----------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, [&](Tensor<T>& ga) { for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; });
    accumulate(t, b, [&](Tensor<T>& gb) { for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i]; });
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, [&](Tensor<T>& ga) { for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; });
    accumulate(t, b, [&](Tensor<T>& gb) { for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i]; });
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.value()[i];
    });
    accumulate(t, b, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.value()[i];
    });
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  return a.tape().record(std::move(out), {a}, [a, factor](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    });
  });
}

template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  require_matrix(a, "add_bias");
  const std::size_t rows = a.value().dim(0), cols = a.value().dim(1);
  if (bias.value().size() != cols) throw DimensionError("add_bias: bias length != columns");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out(i, j) += bias.value()[j];
  }
  return a.tape().record(std::move(out), {a, bias},
                         [a, bias, rows, cols](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, [&](Tensor<T>& ga) { for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; });
    accumulate(t, bias, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) gb[j] += g(i, j);
      }
    });
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  return a.tape().record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (a.value()[i] > T{0}) ga[i] += g[i];
      }
    });
  });
}

template <typename T>
Var<T> abs(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::abs(v);
  return a.tape().record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T x = a.value()[i];
        ga[i] += x > T{0} ? g[i] : (x < T{0} ? -g[i] : T{0});
      }
    });
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(shape);
  return a.tape().record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, [&](Tensor<T>& ga) { for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; });
  });
}

template <typename T>
Var<T> apply_mask(Var<T> x, const Tensor<T>& mask) {
  if (!(x.shape() == mask.shape())) throw DimensionError("apply_mask: shape mismatch");
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape().record(std::move(out), {x}, [x, mask](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, x, [&](Tensor<T>& gx) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  });
}

// ---- structural ----------------------------------------------------------------------

template <typename T>
Var<T> gather_rows(Var<T> a, std::span<const std::uint32_t> index) {
  require_matrix(a, "gather_rows");
  const std::size_t rows = a.value().dim(0), cols = a.value().dim(1);
  std::vector<std::uint32_t> idx(index.begin(), index.end());
  Tensor<T> out(Shape{idx.size(), cols});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= rows) throw DimensionError("gather_rows: index out of range");
    std::copy_n(a.value().data() + idx[r] * cols, cols, out.data() + r * cols);
  }
  return a.tape().record(std::move(out), {a},
                         [a, idx = std::move(idx), cols](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, [&](Tensor<T>& ga) {
      for (std::size_t r = 0; r < idx.size(); ++r) {
        T* dst = ga.data() + idx[r] * cols;
        const T* src = g.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
      }
    });
  });
}

template <typename T>
Var<T> row_sum(Var<T> a) {
  require_matrix(a, "row_sum");
  const std::size_t rows = a.value().dim(0), cols = a.value().dim(1);
  Tensor<T> out(Shape{rows, 1});
  for (std::size_t i = 0; i < rows; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < cols; ++j) acc += a.value()(i, j);
    out[i] = acc;
  }
  return a.tape().record(std::move(out), {a}, [a, rows, cols](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) ga(i, j) += g[i];
      }
    });
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_cols");
  const std::size_t rows = a.value().dim(0), cols = a.value().dim(1);
  if (begin >= end || end > cols) throw DimensionError("slice_cols: bad column range");
  const std::size_t w = end - begin;
  Tensor<T> out(Shape{rows, w});
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(a.value().data() + i * cols + begin, w, out.data() + i * w);
  }
  return a.tape().record(std::move(out), {a},
                         [a, rows, cols, begin, w](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < w; ++j) ga[i * cols + begin + j] += g[i * w + j];
      }
    });
  });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts.front().value().dim(0);
  std::vector<std::size_t> offsets{0};
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.value().dim(0) != rows) throw DimensionError("concat_cols: row counts differ");
    offsets.push_back(offsets.back() + p.value().dim(1));
  }
  const std::size_t cols = offsets.back();
  Tensor<T> out(Shape{rows, cols});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].value().dim(1);
    for (std::size_t i = 0; i < rows; ++i) {
      std::copy_n(parts[k].value().data() + i * w, w, out.data() + i * cols + offsets[k]);
    }
  }
  std::vector<Var<T>> saved(parts.begin(), parts.end());
  return parts.front().tape().record(
      std::move(out), parts, [saved, offsets, rows, cols](Tape<T>& t, const Tensor<T>& g) {
        for (std::size_t k = 0; k < saved.size(); ++k) {
          const std::size_t w = offsets[k + 1] - offsets[k];
          accumulate(t, saved[k], [&](Tensor<T>& gp) {
            for (std::size_t i = 0; i < rows; ++i) {
              for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * cols + offsets[k] + j];
            }
          });
        }
      });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T acc = 0;
  for (T v : a.value().values()) acc += v;
  return a.tape().record(Tensor<T>::scalar(acc), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, [&](Tensor<T>& ga) { for (auto& v : ga.values()) v += g[0]; });
  });
}

// ---- softmax family -------------------------------------------------------------------

namespace {

// d logits from d scores for one softmax row; clipped entries get no gradient.
template <typename T>
void softmax_row_backward(const T* logits, const T* scores, const T* g, const T* mask,
                          std::size_t k, T temperature, T clip, T* out) {
  T dot = 0;
  for (std::size_t j = 0; j < k; ++j) {
    if (!mask || mask[j] != T{0}) dot += scores[j] * g[j];
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (mask && mask[j] == T{0}) continue;
    if (!(std::abs(logits[j]) < clip)) continue;
    out[j] += scores[j] * (g[j] - dot) / temperature;
  }
}

}  // namespace

template <typename T>
Var<T> masked_softmax(Var<T> logits, const Tensor<T>& mask, T temperature, T clip) {
  Tensor<T> out = spex::masked_softmax(logits.value(), mask, temperature, clip);
  Tensor<T> scores = out;
  return logits.tape().record(
      std::move(out), {logits},
      [logits, mask, scores = std::move(scores), temperature, clip](Tape<T>& t, const Tensor<T>& g) {
        accumulate(t, logits, [&](Tensor<T>& gl) {
          const std::size_t rows = scores.dim(0), k = scores.dim(1);
          for (std::size_t i = 0; i < rows; ++i) {
            softmax_row_backward(logits.value().data() + i * k, scores.data() + i * k,
                                 g.data() + i * k, mask.data() + i * k, k, temperature, clip,
                                 gl.data() + i * k);
          }
        });
      });
}

template <typename T>
Var<T> segment_softmax(Var<T> logits, std::span<const std::uint64_t> row_ptr, T temperature,
                       T clip) {
  const Tensor<T>& lv = logits.value();
  if (row_ptr.empty() || lv.size() != row_ptr.back()) {
    throw DimensionError("segment_softmax: logits do not match the segment layout");
  }
  if (!(temperature > T{0})) throw ContractViolation("segment_softmax: temperature must be > 0");
  Tensor<T> out(lv.shape());
  const std::size_t segments = row_ptr.size() - 1;
  for (std::size_t i = 0; i < segments; ++i) {
    const std::size_t b = row_ptr[i], e = row_ptr[i + 1];
    if (b == e) throw ContractViolation("segment_softmax: empty row " + std::to_string(i));
    softmax_row<T>(std::span<const T>(lv.data() + b, e - b), temperature, clip,
                   std::span<T>(out.data() + b, e - b));
  }
  std::vector<std::uint64_t> ptr(row_ptr.begin(), row_ptr.end());
  Tensor<T> scores = out;
  return logits.tape().record(
      std::move(out), {logits},
      [logits, ptr = std::move(ptr), scores = std::move(scores), temperature, clip](
          Tape<T>& t, const Tensor<T>& g) {
        accumulate(t, logits, [&](Tensor<T>& gl) {
          for (std::size_t i = 0; i + 1 < ptr.size(); ++i) {
            const std::size_t b = ptr[i], k = ptr[i + 1] - ptr[i];
            softmax_row_backward<T>(logits.value().data() + b, scores.data() + b, g.data() + b,
                                    nullptr, k, temperature, clip, gl.data() + b);
          }
        });
      });
}

template <typename T>
Var<T> scale_rows(Var<T> x, Var<T> w) {
  require_matrix(x, "scale_rows");
  const std::size_t rows = x.value().dim(0), cols = x.value().dim(1);
  if (w.value().size() != rows) throw DimensionError("scale_rows: weight count != rows");
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out(i, j) *= w.value()[i];
  }
  return x.tape().record(std::move(out), {x, w}, [x, w, rows, cols](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, x, [&](Tensor<T>& gx) {
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) gx(i, j) += g(i, j) * w.value()[i];
      }
    });
    accumulate(t, w, [&](Tensor<T>& gw) {
      for (std::size_t i = 0; i < rows; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < cols; ++j) acc += g(i, j) * x.value()(i, j);
        gw[i] += acc;
      }
    });
  });
}

template <typename T>
Var<T> segment_sum(Var<T> x, std::span<const std::uint64_t> row_ptr) {
  require_matrix(x, "segment_sum");
  const std::size_t cols = x.value().dim(1);
  if (row_ptr.empty() || x.value().dim(0) != row_ptr.back()) {
    throw DimensionError("segment_sum: rows do not match the segment layout");
  }
  const std::size_t segments = row_ptr.size() - 1;
  Tensor<T> out(Shape{segments, cols});
  for (std::size_t i = 0; i < segments; ++i) {
    for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) {
      for (std::size_t j = 0; j < cols; ++j) out(i, j) += x.value()(e, j);
    }
  }
  std::vector<std::uint64_t> ptr(row_ptr.begin(), row_ptr.end());
  return x.tape().record(std::move(out), {x}, [x, ptr = std::move(ptr), cols](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, x, [&](Tensor<T>& gx) {
      for (std::size_t i = 0; i + 1 < ptr.size(); ++i) {
        for (std::size_t e = ptr[i]; e < ptr[i + 1]; ++e) {
          for (std::size_t j = 0; j < cols; ++j) gx(e, j) += g(i, j);
        }
      }
    });
  });
}

// ---- normalization ----------------------------------------------------------------------

template <typename T>
Var<T> normalize_rows(Var<T> v, Var<T> s, T eps) {
  require_matrix(v, "normalize_rows");
  if (s.value().size() != 1) throw DimensionError("normalize_rows: scale must be a scalar");
  const std::size_t rows = v.value().dim(0), cols = v.value().dim(1);
  const T sv = s.value()[0];
  Tensor<T> out(v.shape());
  std::vector<T> denom(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    T nrm = 0;
    for (std::size_t j = 0; j < cols; ++j) nrm += v.value()(i, j) * v.value()(i, j);
    denom[i] = std::max(std::sqrt(nrm), eps);
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = sv * v.value()(i, j) / denom[i];
  }
  return v.tape().record(std::move(out), {v, s},
                         [v, s, denom = std::move(denom), rows, cols, eps](Tape<T>& t, const Tensor<T>& g) {
    const T sv = s.value()[0];
    accumulate(t, v, [&](Tensor<T>& gv) {
      for (std::size_t i = 0; i < rows; ++i) {
        const T d = denom[i];
        if (d > eps) {
          // Projection onto the tangent space of the unit sphere.
          T dot = 0;
          for (std::size_t j = 0; j < cols; ++j) dot += g(i, j) * v.value()(i, j);
          dot /= d * d;
          for (std::size_t j = 0; j < cols; ++j) {
            gv(i, j) += sv / d * (g(i, j) - dot * v.value()(i, j));
          }
        } else {
          for (std::size_t j = 0; j < cols; ++j) gv(i, j) += sv * g(i, j) / d;
        }
      }
    });
    accumulate(t, s, [&](Tensor<T>& gs) {
      T acc = 0;
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) acc += g(i, j) * v.value()(i, j) / denom[i];
      }
      gs[0] += acc;
    });
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  require_matrix(x, "layer_norm");
  const std::size_t rows = x.value().dim(0), cols = x.value().dim(1);
  if (gamma.value().size() != cols || beta.value().size() != cols) {
    throw DimensionError("layer_norm: affine parameters must match columns");
  }
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    T mean = 0;
    for (std::size_t j = 0; j < cols; ++j) mean += x.value()(i, j);
    mean /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      const T d = x.value()(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) {
      xhat(i, j) = (x.value()(i, j) - mean) * inv_std[i];
      out(i, j) = gamma.value()[j] * xhat(i, j) + beta.value()[j];
    }
  }
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](
          Tape<T>& t, const Tensor<T>& g) {
        accumulate(t, gamma, [&](Tensor<T>& gg) {
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) gg[j] += g(i, j) * xhat(i, j);
          }
        });
        accumulate(t, beta, [&](Tensor<T>& gb) {
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) gb[j] += g(i, j);
          }
        });
        accumulate(t, x, [&](Tensor<T>& gx) {
          const T inv_c = T{1} / static_cast<T>(cols);
          for (std::size_t i = 0; i < rows; ++i) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < cols; ++j) {
              const T d = g(i, j) * gamma.value()[j];
              mean_d += d;
              mean_dx += d * xhat(i, j);
            }
            mean_d *= inv_c;
            mean_dx *= inv_c;
            for (std::size_t j = 0; j < cols; ++j) {
              const T d = g(i, j) * gamma.value()[j];
              gx(i, j) += inv_std[i] * (d - mean_d - xhat(i, j) * mean_dx);
            }
          }
        });
      });
}

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T> state, bool training,
                  T momentum, T eps) {
  require_matrix(x, "batch_norm");
  Tensor<T>& run_mean = *state.running_mean;
  Tensor<T>& run_var = *state.running_var;
  const std::size_t rows = x.value().dim(0), cols = x.value().dim(1);
  if (gamma.value().size() != cols || beta.value().size() != cols ||
      run_mean.size() != cols || run_var.size() != cols) {
    throw DimensionError("batch_norm: parameter widths must match columns");
  }
  std::vector<T> mean(cols, T{0}), inv_std(cols);
  if (training) {
    if (rows < 2) throw ContractViolation("batch_norm: training needs at least two rows");
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) mean[j] += x.value()(i, j);
    }
    for (auto& m : mean) m /= static_cast<T>(rows);
    std::vector<T> var(cols, T{0});
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        const T d = x.value()(i, j) - mean[j];
        var[j] += d * d;
      }
    }
    for (std::size_t j = 0; j < cols; ++j) {
      const T biased = var[j] / static_cast<T>(rows);
      inv_std[j] = T{1} / std::sqrt(biased + eps);
      const T unbiased = var[j] / static_cast<T>(rows - 1);
      run_mean[j] = (T{1} - momentum) * run_mean[j] + momentum * mean[j];
      run_var[j] = (T{1} - momentum) * run_var[j] + momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < cols; ++j) {
      mean[j] = run_mean[j];
      inv_std[j] = T{1} / std::sqrt(run_var[j] + eps);
    }
  }
  Tensor<T> xhat(x.shape()), out(x.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      xhat(i, j) = (x.value()(i, j) - mean[j]) * inv_std[j];
      out(i, j) = gamma.value()[j] * xhat(i, j) + beta.value()[j];
    }
  }
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols,
       training](Tape<T>& t, const Tensor<T>& g) {
        accumulate(t, gamma, [&](Tensor<T>& gg) {
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) gg[j] += g(i, j) * xhat(i, j);
          }
        });
        accumulate(t, beta, [&](Tensor<T>& gb) {
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) gb[j] += g(i, j);
          }
        });
        accumulate(t, x, [&](Tensor<T>& gx) {
          if (!training) {
            for (std::size_t i = 0; i < rows; ++i) {
              for (std::size_t j = 0; j < cols; ++j) gx(i, j) += g(i, j) * gamma.value()[j] * inv_std[j];
            }
            return;
          }
          const T inv_n = T{1} / static_cast<T>(rows);
          for (std::size_t j = 0; j < cols; ++j) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t i = 0; i < rows; ++i) {
              const T d = g(i, j) * gamma.value()[j];
              mean_d += d;
              mean_dx += d * xhat(i, j);
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t i = 0; i < rows; ++i) {
              const T d = g(i, j) * gamma.value()[j];
              gx(i, j) += inv_std[j] * (d - mean_d - xhat(i, j) * mean_dx);
            }
          }
        });
      });
}

// ---- losses -------------------------------------------------------------------------------

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::uint32_t> rows,
                     std::span<const std::int64_t> labels) {
  require_matrix(logits, "cross_entropy");
  if (rows.size() != labels.size() || rows.empty()) {
    throw DimensionError("cross_entropy: need one label per selected row");
  }
  const std::size_t classes = logits.value().dim(1);
  const Tensor<T>& z = logits.value();
  Tensor<T> probs(Shape{rows.size(), classes});
  T loss = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t i = rows[r];
    if (i >= z.dim(0)) throw DimensionError("cross_entropy: row out of range");
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw DimensionError("cross_entropy: label out of range");
    }
    T top = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < classes; ++c) top = std::max(top, z(i, c));
    T total = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs(r, c) = std::exp(z(i, c) - top);
      total += probs(r, c);
    }
    for (std::size_t c = 0; c < classes; ++c) probs(r, c) /= total;
    loss += std::log(total) + top - z(i, static_cast<std::size_t>(labels[r]));
  }
  const T inv_n = T{1} / static_cast<T>(rows.size());
  std::vector<std::uint32_t> rv(rows.begin(), rows.end());
  std::vector<std::int64_t> lv(labels.begin(), labels.end());
  return logits.tape().record(
      Tensor<T>::scalar(loss * inv_n), {logits},
      [logits, probs = std::move(probs), rv = std::move(rv), lv = std::move(lv), classes, inv_n](
          Tape<T>& t, const Tensor<T>& g) {
        accumulate(t, logits, [&](Tensor<T>& gl) {
          for (std::size_t r = 0; r < rv.size(); ++r) {
            for (std::size_t c = 0; c < classes; ++c) {
              const T target = static_cast<std::size_t>(lv[r]) == c ? T{1} : T{0};
              gl(rv[r], c) += g[0] * inv_n * (probs(r, c) - target);
            }
          }
        });
      });
}

template <typename T>
Var<T> bce_with_logits(Var<T> logits, std::span<const std::uint32_t> rows,
                       const Tensor<T>& targets) {
  require_matrix(logits, "bce_with_logits");
  const std::size_t cols = logits.value().dim(1);
  if (rows.empty() || targets.rank() != 2 || targets.dim(0) != rows.size() || targets.dim(1) != cols) {
    throw DimensionError("bce_with_logits: targets must be (rows x outputs)");
  }
  const Tensor<T>& z = logits.value();
  T loss = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= z.dim(0)) throw DimensionError("bce_with_logits: row out of range");
    for (std::size_t c = 0; c < cols; ++c) {
      const T x = z(rows[r], c), y = targets(r, c);
      loss += std::max(x, T{0}) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
  }
  const T inv_n = T{1} / static_cast<T>(rows.size() * cols);
  std::vector<std::uint32_t> rv(rows.begin(), rows.end());
  return logits.tape().record(
      Tensor<T>::scalar(loss * inv_n), {logits},
      [logits, targets, rv = std::move(rv), cols, inv_n](Tape<T>& t, const Tensor<T>& g) {
        accumulate(t, logits, [&](Tensor<T>& gl) {
          for (std::size_t r = 0; r < rv.size(); ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
              const T x = logits.value()(rv[r], c);
              const T sig = T{1} / (T{1} + std::exp(-x));
              gl(rv[r], c) += g[0] * inv_n * (sig - targets(r, c));
            }
          }
        });
      });
}

// ---- instantiation -----------------------------------------------------------------------------

#define SPEX_AD_INSTANTIATE(T)                                                                     \
  template class Tape<T>;                                                                          \
  template Var<T> matmul(Var<T>, Var<T>);                                                          \
  template Var<T> batched_matmul(Var<T>, Var<T>);                                                  \
  template Var<T> add(Var<T>, Var<T>);                                                             \
  template Var<T> sub(Var<T>, Var<T>);                                                             \
  template Var<T> mul(Var<T>, Var<T>);                                                             \
  template Var<T> scale(Var<T>, T);                                                                \
  template Var<T> add_bias(Var<T>, Var<T>);                                                        \
  template Var<T> relu(Var<T>);                                                                    \
  template Var<T> abs(Var<T>);                                                                     \
  template Var<T> reshape(Var<T>, Shape);                                                          \
  template Var<T> apply_mask(Var<T>, const Tensor<T>&);                                            \
  template Var<T> gather_rows(Var<T>, std::span<const std::uint32_t>);                             \
  template Var<T> row_sum(Var<T>);                                                                 \
  template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                                    \
  template Var<T> concat_cols(std::span<const Var<T>>);                                            \
  template Var<T> sum(Var<T>);                                                                     \
  template Var<T> masked_softmax(Var<T>, const Tensor<T>&, T, T);                                  \
  template Var<T> segment_softmax(Var<T>, std::span<const std::uint64_t>, T, T);                   \
  template Var<T> scale_rows(Var<T>, Var<T>);                                                      \
  template Var<T> segment_sum(Var<T>, std::span<const std::uint64_t>);                             \
  template Var<T> normalize_rows(Var<T>, Var<T>, T);                                               \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                           \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, BatchNormState<T>, bool, T, T);             \
  template Var<T> cross_entropy(Var<T>, std::span<const std::uint32_t>,                            \
                                std::span<const std::int64_t>);                                    \
  template Var<T> bce_with_logits(Var<T>, std::span<const std::uint32_t>, const Tensor<T>&);

SPEX_AD_INSTANTIATE(float)
SPEX_AD_INSTANTIATE(double)
#undef SPEX_AD_INSTANTIATE

}  // namespace spex::ad
