#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "spex/tensor.hpp"

namespace spex {

// Named tensors in insertion order. Non-trainable entries hold buffers such
// as batch-norm running statistics.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
  };

  void add(std::string name, Tensor<T> value, bool trainable = true);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  // Number of trainable scalars.
  std::size_t num_parameters() const;

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.trainable);
    return out;
  }

  // Overwrites values by name; shapes must match. Unknown names are an error.
  void assign(const std::map<std::string, Tensor<T>>& values);

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

struct AdamWConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Cosine decay over total_epochs with optional linear warmup; the factor
// never drops below min_ratio.
struct CosineSchedule {
  std::size_t total_epochs = 1;
  std::size_t warmup_epochs = 0;
  double min_ratio = 0.01;

  double factor(std::size_t epoch) const;
};

template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  std::uint64_t step = 0;
};

// Decoupled weight decay Adam. Gradients are aligned with params.entries();
// an empty tensor means "no gradient" for that entry.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  // Applies one update at learning rate base * schedule factor (passed in as
  // lr). Throws NumericError, leaving params untouched, when any gradient is
  // not finite.
  void step(ParamStore<T>& params, const std::vector<Tensor<T>>& grads, double lr);

  const AdamWConfig& config() const noexcept { return config_; }
  const OptimizerState<T>& state() const noexcept { return state_; }

 private:
  AdamWConfig config_;
  OptimizerState<T> state_;
};

// Binary checkpoint: "SPXC" magic, u32 version, u32 tensor count, then per
// tensor u32 name length, name bytes, u32 rank, u64 dims, float32 LE data.
void save_checkpoint(const ParamStore<float>& params, const std::filesystem::path& path);
std::map<std::string, Tensor<float>> load_checkpoint(const std::filesystem::path& path);

}  // namespace spex
