#include "spex/optim.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "spex/error.hpp"

namespace spex {

template <typename T>
void ParamStore<T>::add(std::string name, Tensor<T> value, bool trainable) {
  if (index_.count(name)) throw ContractViolation("duplicate parameter " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{std::move(name), std::move(value), trainable});
}

template <typename T>
std::size_t ParamStore<T>::index_of(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ContractViolation("unknown parameter " + name);
  return it->second;
}

template <typename T>
Tensor<T>& ParamStore<T>::at(const std::string& name) {
  return entries_[index_of(name)].value;
}

template <typename T>
const Tensor<T>& ParamStore<T>::at(const std::string& name) const {
  return entries_[index_of(name)].value;
}

template <typename T>
std::size_t ParamStore<T>::num_parameters() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.value.size();
  }
  return n;
}

template <typename T>
void ParamStore<T>::assign(const std::map<std::string, Tensor<T>>& values) {
  for (const auto& [name, value] : values) {
    Tensor<T>& dst = at(name);
    if (!(dst.shape() == value.shape())) {
      throw DimensionError("parameter " + name + " has shape " + dst.shape().to_string() +
                           ", checkpoint has " + value.shape().to_string());
    }
    dst = value;
  }
}

double CosineSchedule::factor(std::size_t epoch) const {
  if (epoch < warmup_epochs) {
    return static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
  }
  const double span = static_cast<double>(std::max<std::size_t>(total_epochs, warmup_epochs + 1) -
                                          warmup_epochs);
  const double progress = std::min(1.0, static_cast<double>(epoch - warmup_epochs) / span);
  return std::max(0.5 * (1.0 + std::cos(std::numbers::pi * progress)), min_ratio);
}

template <typename T>
void AdamW<T>::step(ParamStore<T>& params, const std::vector<Tensor<T>>& grads, double lr) {
  auto& entries = params.entries();
  if (grads.size() != entries.size()) throw DimensionError("AdamW: one gradient slot per parameter");
  for (std::size_t k = 0; k < entries.size(); ++k) {
    if (grads[k].empty()) continue;
    if (!(grads[k].shape() == entries[k].value.shape())) {
      throw DimensionError("AdamW: gradient shape mismatch for " + entries[k].name);
    }
    for (T g : grads[k].values()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in " + entries[k].name + " at step " +
                           std::to_string(state_.step + 1));
      }
    }
  }
  if (state_.first_moment.size() != entries.size()) {
    state_.first_moment.clear();
    state_.second_moment.clear();
    for (const auto& e : entries) {
      state_.first_moment.emplace_back(e.value.shape());
      state_.second_moment.emplace_back(e.value.shape());
    }
  }
  ++state_.step;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double bias1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
  const double bias2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    if (!entries[k].trainable || grads[k].empty()) continue;
    auto& p = entries[k].value;
    auto& m = state_.first_moment[k];
    auto& v = state_.second_moment[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = static_cast<double>(grads[k][i]);
      double w = static_cast<double>(p[i]);
      w *= 1.0 - lr * config_.weight_decay;
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * g;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      w -= lr * (mi / bias1) / (std::sqrt(vi / bias2) + config_.eps);
      p[i] = static_cast<T>(w);
    }
  }
}

template class ParamStore<float>;
template class ParamStore<double>;
template class AdamW<float>;
template class AdamW<double>;

namespace {

constexpr char kMagic[4] = {'S', 'P', 'X', 'C'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& in) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!in) throw FormatError("truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const ParamStore<float>& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d = 0; d < e.value.rank(); ++d) put<std::uint64_t>(out, e.value.dim(d));
    out.write(reinterpret_cast<const char*>(e.value.data()),
              static_cast<std::streamsize>(e.value.size() * sizeof(float)));
  }
}

std::map<std::string, Tensor<float>> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint file");
  if (get<std::uint32_t>(in) != kVersion) throw FormatError("unsupported checkpoint version");
  const auto count = get<std::uint32_t>(in);
  std::map<std::string, Tensor<float>> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = get<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rank = get<std::uint32_t>(in);
    if (rank < 1 || rank > 3) throw FormatError("bad tensor rank in checkpoint");
    std::size_t dims[3] = {1, 1, 1};
    for (std::uint32_t d = 0; d < rank; ++d) dims[d] = get<std::uint64_t>(in);
    Shape shape = rank == 1 ? Shape{dims[0]} : rank == 2 ? Shape{dims[0], dims[1]}
                                                         : Shape{dims[0], dims[1], dims[2]};
    std::vector<float> data(shape.numel());
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!in) throw FormatError("truncated checkpoint");
    out.emplace(std::move(name), Tensor<float>(shape, std::move(data)));
  }
  return out;
}

}  // namespace spex
