#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "spex/error.hpp"

namespace spex {

// Up to three dimensions, row-major.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims);

  std::size_t rank() const noexcept { return rank_; }
  std::size_t operator[](std::size_t i) const noexcept { return dims_[i]; }
  std::size_t numel() const noexcept;
  std::string to_string() const;

  friend bool operator==(const Shape& a, const Shape& b) noexcept {
    return a.rank_ == b.rank_ && a.dims_ == b.dims_;
  }

 private:
  std::array<std::size_t, 3> dims_{};
  std::size_t rank_ = 0;
};

// Dense row-major tensor; float for training, double for gradient checks.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.to_string());
    }
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data));
  }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.rank(); }
  std::size_t dim(std::size_t i) const noexcept { return shape_[i]; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept {
    return data_[i * shape_[1] + j];
  }
  T& operator()(std::size_t b, std::size_t i, std::size_t j) noexcept {
    return data_[(b * shape_[1] + i) * shape_[2] + j];
  }
  const T& operator()(std::size_t b, std::size_t i, std::size_t j) const noexcept {
    return data_[(b * shape_[1] + i) * shape_[2] + j];
  }

  // Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const {
    if (shape.numel() != shape_.numel()) {
      throw DimensionError("cannot reshape " + shape_.to_string() + " to " + shape.to_string());
    }
    return Tensor(shape, data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  Shape shape_;
  std::vector<T> data_;
};

// Plain kernels. The autodiff ops are built on these.

// (p x q) * (q x r) -> (p x r)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// (B x p x q) * (B x q x r) -> (B x p x r), one independent product per slice.
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

// Row-wise softmax over entries with mask != 0. Logits are clamped to
// [-clip, clip] and then divided by temperature. Throws ContractViolation on
// a fully masked row or a nonpositive temperature.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const Tensor<T>& mask, T temperature, T clip);

// Softmax of one row (no mask); helper shared with the sparse kernels.
template <typename T>
void softmax_row(std::span<const T> logits, T temperature, T clip, std::span<T> out);

}  // namespace spex
