#include "spex/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace spex {

Shape::Shape(std::initializer_list<std::size_t> dims) {
  if (dims.size() == 0 || dims.size() > 3) throw DimensionError("tensor rank must be 1..3");
  rank_ = dims.size();
  std::copy(dims.begin(), dims.end(), dims_.begin());
}

std::size_t Shape::numel() const noexcept {
  if (rank_ == 0) return 0;
  std::size_t n = 1;
  for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
  return n;
}

std::string Shape::to_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < rank_; ++i) {
    if (i) s += "x";
    s += std::to_string(dims_[i]);
  }
  return s + "]";
}

namespace {

template <typename T>
void gemm_accumulate(const T* a, const T* b, T* c, std::size_t p, std::size_t q, std::size_t r) {
  for (std::size_t i = 0; i < p; ++i) {
    T* ci = c + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const T aik = a[i * q + k];
      const T* bk = b + k * r;
      for (std::size_t j = 0; j < r; ++j) ci[j] += aik * bk[j];
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + a.shape().to_string() + " and " +
                         b.shape().to_string());
  }
  Tensor<T> c(Shape{a.dim(0), b.dim(1)});
  gemm_accumulate(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw DimensionError("batched_matmul: incompatible shapes " + a.shape().to_string() +
                         " and " + b.shape().to_string());
  }
  const std::size_t batch = a.dim(0), p = a.dim(1), q = a.dim(2), r = b.dim(2);
  Tensor<T> c(Shape{batch, p, r});
  for (std::size_t s = 0; s < batch; ++s) {
    gemm_accumulate(a.data() + s * p * q, b.data() + s * q * r, c.data() + s * p * r, p, q, r);
  }
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expects a matrix");
  Tensor<T> t(Shape{a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < a.dim(1); ++j) t(j, i) = a(i, j);
  }
  return t;
}

template <typename T>
void softmax_row(std::span<const T> logits, T temperature, T clip, std::span<T> out) {
  T top = -std::numeric_limits<T>::infinity();
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::clamp(logits[k], -clip, clip) / temperature;
    top = std::max(top, out[k]);
  }
  T total = 0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp(out[k] - top);
    total += out[k];
  }
  for (std::size_t k = 0; k < logits.size(); ++k) out[k] /= total;
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const Tensor<T>& mask, T temperature, T clip) {
  if (logits.rank() != 2 || !(logits.shape() == mask.shape())) {
    throw DimensionError("masked_softmax: logits and mask must be equal-shape matrices");
  }
  if (!(temperature > T{0})) throw ContractViolation("masked_softmax: temperature must be > 0");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    T top = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < k; ++j) {
      if (mask(i, j) == T{0}) continue;
      any = true;
      out(i, j) = std::clamp(logits(i, j), -clip, clip) / temperature;
      top = std::max(top, out(i, j));
    }
    if (!any) throw ContractViolation("masked_softmax: row " + std::to_string(i) + " fully masked");
    T total = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (mask(i, j) == T{0}) {
        out(i, j) = 0;
        continue;
      }
      out(i, j) = std::exp(out(i, j) - top);
      total += out(i, j);
    }
    for (std::size_t j = 0; j < k; ++j) out(i, j) /= total;
  }
  return out;
}

#define SPEX_INSTANTIATE(T)                                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> batched_matmul(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> transpose(const Tensor<T>&);                                         \
  template void softmax_row(std::span<const T>, T, T, std::span<T>);                      \
  template Tensor<T> masked_softmax(const Tensor<T>&, const Tensor<T>&, T, T);

SPEX_INSTANTIATE(float)
SPEX_INSTANTIATE(double)
#undef SPEX_INSTANTIATE

}  // namespace spex
