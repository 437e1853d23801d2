#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "spex/expander.hpp"
#include "spex/graph.hpp"

namespace spex {

// Lower value wins when an (i, j) pair arises from several sources.
enum class EdgeType : std::uint8_t { kGraph = 0, kExpander = 1, kSelfLoop = 2 };
inline constexpr std::size_t kNumEdgeTypes = 3;

const char* to_string(EdgeType t) noexcept;

// One layer's attention graph. Row i holds the keys node i attends to.
struct LayerPattern {
  Csr csr;
  std::vector<EdgeType> types;  // parallel to csr.col_idx

  std::span<const EdgeType> row_types(std::size_t i) const noexcept {
    return {types.data() + csr.row_ptr[i], csr.degree(i)};
  }
  friend bool operator==(const LayerPattern&, const LayerPattern&) = default;
};

class AttentionPattern {
 public:
  AttentionPattern() = default;
  AttentionPattern(std::vector<LayerPattern> layers);

  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::size_t num_nodes() const noexcept {
    return layers_.empty() ? 0 : layers_.front().csr.num_rows();
  }
  const LayerPattern& layer(std::size_t l) const { return layers_.at(l); }
  // Directed edges of one layer (all layers share it before sparsification).
  std::size_t edges_per_layer() const noexcept {
    return layers_.empty() ? 0 : layers_.front().csr.num_edges();
  }

 private:
  std::vector<LayerPattern> layers_;
};

// Graph edges, expander edges (both directions) and one self-loop per node,
// deduplicated with priority GRAPH > EXPANDER > SELF_LOOP, replicated over
// `layers` layers. An empty expander (n == 0) contributes nothing.
AttentionPattern augment(const Graph& g, const ExpanderGraph& x, std::size_t layers);

// Text form: "i<TAB>j<TAB>type" per edge of the shared layer pattern.
void save_pattern(const LayerPattern& p, const std::filesystem::path& path);
LayerPattern load_pattern(const std::filesystem::path& path, std::size_t n);

}  // namespace spex
