#include "spex/graph.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <string>
#include <string_view>

#include "spex/error.hpp"
#include "text_io.hpp"

namespace spex {

std::size_t Csr::max_degree() const noexcept {
  std::size_t best = 0;
  for (std::size_t i = 0; i + 1 < row_ptr.size(); ++i) best = std::max(best, degree(i));
  return best;
}

std::size_t Csr::find(std::size_t i, NodeId j) const noexcept {
  const auto r = row(i);
  const auto it = std::lower_bound(r.begin(), r.end(), j);
  if (it == r.end() || *it != j) return npos;
  return static_cast<std::size_t>(row_ptr[i] + (it - r.begin()));
}

Csr Csr::from_edges(std::size_t n, std::vector<std::pair<NodeId, NodeId>> edges,
                    bool symmetrize) {
  if (symmetrize) {
    const std::size_t m = edges.size();
    edges.reserve(2 * m);
    for (std::size_t e = 0; e < m; ++e) edges.emplace_back(edges[e].second, edges[e].first);
  }
  for (const auto& [u, v] : edges) {
    if (u >= n || v >= n) throw DimensionError("edge endpoint out of range");
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

  Csr csr;
  csr.row_ptr.assign(n + 1, 0);
  csr.col_idx.reserve(edges.size());
  for (const auto& [u, v] : edges) {
    ++csr.row_ptr[u + 1];
    csr.col_idx.push_back(v);
  }
  for (std::size_t i = 0; i < n; ++i) csr.row_ptr[i + 1] += csr.row_ptr[i];
  return csr;
}

void Csr::validate() const {
  if (row_ptr.empty() || row_ptr.front() != 0) throw DimensionError("row_ptr must start at 0");
  if (row_ptr.back() != col_idx.size()) throw DimensionError("row_ptr[n] != edge count");
  const std::size_t n = num_rows();
  for (std::size_t i = 0; i < n; ++i) {
    if (row_ptr[i + 1] < row_ptr[i]) throw DimensionError("row_ptr not nondecreasing");
    const auto r = row(i);
    for (std::size_t k = 0; k < r.size(); ++k) {
      if (r[k] >= n) throw DimensionError("col_idx out of range");
      if (k > 0 && r[k] <= r[k - 1]) throw DimensionError("row not strictly increasing");
    }
  }
}

Graph::Graph(Csr adjacency, std::vector<float> features, std::size_t feature_dim,
             std::vector<std::int64_t> labels, std::vector<Split> split, TaskKind task,
             std::size_t num_classes)
    : adjacency_(std::move(adjacency)),
      features_(std::move(features)),
      feature_dim_(feature_dim),
      labels_(std::move(labels)),
      split_(std::move(split)),
      task_(task),
      num_classes_(num_classes) {
  adjacency_.validate();
  const std::size_t n = adjacency_.num_rows();
  if (feature_dim_ == 0 || features_.size() != n * feature_dim_) {
    throw DimensionError("feature matrix does not have n rows");
  }
  if (labels_.size() != n) throw DimensionError("labels length != n");
  if (split_.size() != n) throw DimensionError("split length != n");
  if (task_ == TaskKind::kBinary && num_classes_ != 2) {
    throw DimensionError("binary task needs num_classes == 2");
  }
  for (std::int64_t y : labels_) {
    if (y < 0) throw DimensionError("negative label");
    if (task_ != TaskKind::kMultilabel && static_cast<std::size_t>(y) >= num_classes_) {
      throw DimensionError("label id >= num_classes");
    }
    if (task_ == TaskKind::kMultilabel && num_classes_ < 63 &&
        (static_cast<std::uint64_t>(y) >> num_classes_) != 0) {
      throw DimensionError("label bitmask wider than num_classes");
    }
  }
}

std::vector<NodeId> Graph::nodes_in(Split s) const {
  std::vector<NodeId> out;
  for (std::size_t i = 0; i < split_.size(); ++i) {
    if (split_[i] == s) out.push_back(static_cast<NodeId>(i));
  }
  return out;
}

const char* to_string(Split s) noexcept {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

namespace {

Split parse_split(std::string_view tok, std::size_t line) {
  if (tok == "train" || tok == "0") return Split::kTrain;
  if (tok == "val" || tok == "valid" || tok == "1") return Split::kVal;
  if (tok == "test" || tok == "2") return Split::kTest;
  throw FormatError("unknown split tag '" + std::string(tok) + "'", line);
}

}  // namespace

Graph load_graph(const std::filesystem::path& edge_list_path,
                 const std::filesystem::path& features_path,
                 const std::filesystem::path& labels_path, std::size_t n,
                 const LoadOptions& options) {
  std::vector<std::pair<NodeId, NodeId>> edges;
  detail::for_each_line(edge_list_path, [&](std::string_view line, std::size_t no) {
    const auto fields = detail::split_fields(line, '\t');
    if (fields.size() != 2) throw FormatError("expected src<TAB>dst", no);
    const auto u = detail::parse_int<std::uint64_t>(fields[0], no);
    const auto v = detail::parse_int<std::uint64_t>(fields[1], no);
    if (u >= n || v >= n) throw FormatError("node id out of range [0, n)", no);
    edges.emplace_back(static_cast<NodeId>(u), static_cast<NodeId>(v));
  });

  std::vector<float> features;
  std::size_t feature_dim = 0;
  std::size_t rows = 0;
  detail::for_each_line(features_path, [&](std::string_view line, std::size_t no) {
    const auto fields = detail::split_fields(line, ',');
    if (rows == 0) feature_dim = fields.size();
    if (fields.size() != feature_dim) throw FormatError("ragged feature row", no);
    for (auto f : fields) features.push_back(static_cast<float>(detail::parse_real(f, no)));
    ++rows;
  });
  if (rows != n) {
    throw DimensionError("features file has " + std::to_string(rows) + " rows, expected " +
                         std::to_string(n));
  }

  std::vector<std::int64_t> labels;
  detail::for_each_line(labels_path, [&](std::string_view line, std::size_t no) {
    labels.push_back(detail::parse_int<std::int64_t>(detail::trim(line), no));
  });
  if (labels.size() != n) {
    throw DimensionError("labels file has " + std::to_string(labels.size()) +
                         " rows, expected " + std::to_string(n));
  }

  std::vector<Split> split(n, Split::kTrain);
  if (!options.split_path.empty()) {
    std::size_t i = 0;
    detail::for_each_line(options.split_path, [&](std::string_view line, std::size_t no) {
      if (i >= n) throw DimensionError("split file has more than n rows");
      split[i++] = parse_split(detail::trim(line), no);
    });
    if (i != n) throw DimensionError("split file has fewer than n rows");
  }

  std::size_t num_classes = options.num_classes;
  if (num_classes == 0) {
    std::int64_t top = 0;
    for (auto y : labels) top = std::max(top, y);
    if (options.task == TaskKind::kMultilabel) {
      while (num_classes < 63 && (static_cast<std::uint64_t>(top) >> num_classes) != 0) ++num_classes;
      num_classes = std::max<std::size_t>(num_classes, 1);
    } else {
      num_classes = static_cast<std::size_t>(top) + 1;
      if (options.task == TaskKind::kBinary) num_classes = 2;
    }
  }

  return Graph(Csr::from_edges(n, std::move(edges), options.symmetrize), std::move(features),
               feature_dim, std::move(labels), std::move(split), options.task, num_classes);
}

void save_graph(const Graph& g, const std::filesystem::path& edge_list_path,
                const std::filesystem::path& features_path,
                const std::filesystem::path& labels_path,
                const std::filesystem::path& split_path) {
  {
    auto out = detail::open_out(edge_list_path);
    out << "# src\tdst\n";
    const Csr& a = g.adjacency();
    for (std::size_t i = 0; i < a.num_rows(); ++i) {
      for (NodeId j : a.row(i)) {
        out << i << '\t' << j << '\n';
      }
    }
  }
  {
    auto out = detail::open_out(features_path);
    out.precision(9);
    for (std::size_t i = 0; i < g.num_nodes(); ++i) {
      const auto row = g.feature_row(i);
      for (std::size_t k = 0; k < row.size(); ++k) out << (k ? "," : "") << row[k];
      out << '\n';
    }
  }
  {
    auto out = detail::open_out(labels_path);
    for (auto y : g.labels()) out << y << '\n';
  }
  {
    auto out = detail::open_out(split_path);
    for (auto s : g.split()) out << to_string(s) << '\n';
  }
}

}  // namespace spex
