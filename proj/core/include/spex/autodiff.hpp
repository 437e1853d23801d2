#pragma once

// Tape-based reverse-mode differentiation over the small op set the attention
// networks need. Each op computes its value eagerly and records a closure
// that propagates the output gradient to its inputs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "spex/tensor.hpp"

namespace spex::ad {

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const noexcept { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  // Receives the tape and the gradient of the recorded output.
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> parameter(Tensor<T> value);
  // Records an op output. requires_grad is inherited from the parents.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, Backward backward);
  Var<T> record(Tensor<T> value, std::span<const Var<T>> parents, Backward backward);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient accumulated by the last backward(); zeros when untouched.
  Tensor<T> grad(Var<T> v) const;

  // Buffer to accumulate into, or nullptr when v does not need a gradient.
  Tensor<T>* grad_sink(Var<T> v);

  // Seeds d loss / d loss = 1 and runs the recorded closures in reverse.
  // Throws ContractViolation when the loss is not a tracked scalar.
  void backward(Var<T> loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// ---- ops ------------------------------------------------------------------

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// (B x p x q) * (B x q x r)
template <typename T> Var<T> batched_matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
// (n x c) + bias broadcast over rows; bias has c elements.
template <typename T> Var<T> add_bias(Var<T> a, Var<T> bias);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> abs(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
// Rows of a (n x c) selected by index, repeats allowed.
template <typename T> Var<T> gather_rows(Var<T> a, std::span<const std::uint32_t> index);
// (n x c) -> (n x 1)
template <typename T> Var<T> row_sum(Var<T> a);
template <typename T> Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
// Scalar sum of all entries.
template <typename T> Var<T> sum(Var<T> a);

// Row-wise masked softmax with logit clipping then temperature division.
template <typename T>
Var<T> masked_softmax(Var<T> logits, const Tensor<T>& mask, T temperature, T clip);

// Softmax over the CSR segments of an (m x 1) edge-logit column.
template <typename T>
Var<T> segment_softmax(Var<T> logits, std::span<const std::uint64_t> row_ptr, T temperature,
                       T clip);
// Multiplies row r of x (m x c) by w[r] (w is m x 1).
template <typename T> Var<T> scale_rows(Var<T> x, Var<T> w);
// Sums the rows of x (m x c) within each CSR segment -> (segments x c).
template <typename T>
Var<T> segment_sum(Var<T> x, std::span<const std::uint64_t> row_ptr);

// Each row r -> s * r / max(||r||, eps). s is a one-element tensor.
template <typename T> Var<T> normalize_rows(Var<T> v, Var<T> s, T eps);

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps);

// Running statistics owned elsewhere (typically non-trainable parameters).
template <typename T>
struct BatchNormState {
  Tensor<T>* running_mean;
  Tensor<T>* running_var;
};

// Training: normalizes with the column statistics of x and updates the
// running estimates. Inference: uses the running estimates.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T> state, bool training,
                  T momentum, T eps);

// Multiplies by a fixed mask (entries 0 or 1/(1-p)).
template <typename T> Var<T> apply_mask(Var<T> x, const Tensor<T>& mask);

// Mean softmax cross-entropy of the selected rows against class ids.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::uint32_t> rows,
                     std::span<const std::int64_t> labels);

// Mean binary cross-entropy with logits over the selected rows; targets is
// (rows.size() x c) in {0, 1}.
template <typename T>
Var<T> bce_with_logits(Var<T> logits, std::span<const std::uint32_t> rows,
                       const Tensor<T>& targets);

}  // namespace spex::ad
