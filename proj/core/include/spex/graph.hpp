#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

namespace spex {

using NodeId = std::uint32_t;

// Compressed sparse row adjacency. Row i lists the neighbors of i in strictly
// increasing order.
struct Csr {
  std::vector<std::uint64_t> row_ptr{0};
  std::vector<NodeId> col_idx;

  std::size_t num_rows() const noexcept { return row_ptr.size() - 1; }
  std::size_t num_edges() const noexcept { return col_idx.size(); }
  std::size_t degree(std::size_t i) const noexcept {
    return static_cast<std::size_t>(row_ptr[i + 1] - row_ptr[i]);
  }
  std::size_t max_degree() const noexcept;
  std::span<const NodeId> row(std::size_t i) const noexcept {
    return {col_idx.data() + row_ptr[i], degree(i)};
  }
  // Position of (i, j) in col_idx, or npos.
  std::size_t find(std::size_t i, NodeId j) const noexcept;
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  // Sorts and deduplicates; optionally adds the reverse of every edge.
  static Csr from_edges(std::size_t n, std::vector<std::pair<NodeId, NodeId>> edges,
                        bool symmetrize);

  // Throws DimensionError / FormatError when an invariant does not hold.
  void validate() const;

  friend bool operator==(const Csr&, const Csr&) = default;
};

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };

enum class TaskKind : std::uint8_t {
  kMulticlass,  // labels are class ids in [0, num_classes)
  kBinary,      // labels in {0, 1}, single logit
  kMultilabel,  // labels are bitmasks over num_classes labels
};

// Immutable input graph with node features, labels and split tags.
class Graph {
 public:
  Graph() = default;
  Graph(Csr adjacency, std::vector<float> features, std::size_t feature_dim,
        std::vector<std::int64_t> labels, std::vector<Split> split, TaskKind task,
        std::size_t num_classes);

  std::size_t num_nodes() const noexcept { return adjacency_.num_rows(); }
  std::size_t num_edges() const noexcept { return adjacency_.num_edges(); }
  const Csr& adjacency() const noexcept { return adjacency_; }
  std::size_t feature_dim() const noexcept { return feature_dim_; }
  std::span<const float> features() const noexcept { return features_; }
  std::span<const float> feature_row(std::size_t i) const noexcept {
    return {features_.data() + i * feature_dim_, feature_dim_};
  }
  std::span<const std::int64_t> labels() const noexcept { return labels_; }
  std::span<const Split> split() const noexcept { return split_; }
  TaskKind task() const noexcept { return task_; }
  std::size_t num_classes() const noexcept { return num_classes_; }

  std::vector<NodeId> nodes_in(Split s) const;

 private:
  Csr adjacency_;
  std::vector<float> features_;
  std::size_t feature_dim_ = 0;
  std::vector<std::int64_t> labels_;
  std::vector<Split> split_;
  TaskKind task_ = TaskKind::kMulticlass;
  std::size_t num_classes_ = 0;
};

struct LoadOptions {
  bool symmetrize = true;
  // Optional per-node split file ("train"/"val"/"test" or 0/1/2 per line).
  // Without it every node is a training node.
  std::filesystem::path split_path;
  TaskKind task = TaskKind::kMulticlass;
  // 0 means infer (max label + 1, or bit width for multilabel).
  std::size_t num_classes = 0;
};

// Edge list: "src<TAB>dst" per line, '#' comments. Features: headerless CSV of
// n rows. Labels: one integer per line.
Graph load_graph(const std::filesystem::path& edge_list_path,
                 const std::filesystem::path& features_path,
                 const std::filesystem::path& labels_path, std::size_t n,
                 const LoadOptions& options = {});

// Writes the formats load_graph reads (plus the split file).
void save_graph(const Graph& g, const std::filesystem::path& edge_list_path,
                const std::filesystem::path& features_path,
                const std::filesystem::path& labels_path,
                const std::filesystem::path& split_path);

const char* to_string(Split s) noexcept;

}  // namespace spex
