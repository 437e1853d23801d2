#include "spex/pattern.hpp"

#include <algorithm>
#include <tuple>

#include "spex/error.hpp"
#include "text_io.hpp"

namespace spex {

const char* to_string(EdgeType t) noexcept {
  switch (t) {
    case EdgeType::kGraph: return "graph";
    case EdgeType::kExpander: return "expander";
    case EdgeType::kSelfLoop: return "self";
  }
  return "?";
}

AttentionPattern::AttentionPattern(std::vector<LayerPattern> layers) : layers_(std::move(layers)) {
  for (const auto& l : layers_) {
    l.csr.validate();
    if (l.types.size() != l.csr.num_edges()) throw DimensionError("pattern types/edges mismatch");
    if (l.csr.num_rows() != num_nodes()) throw DimensionError("pattern layers differ in node count");
  }
}

namespace {

LayerPattern build_layer(std::vector<std::tuple<NodeId, NodeId, EdgeType>> edges, std::size_t n) {
  // Sorting by (i, j, type) puts the highest-priority tag first in each run.
  std::sort(edges.begin(), edges.end());
  LayerPattern p;
  p.csr.row_ptr.assign(n + 1, 0);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto& [i, j, t] = edges[e];
    if (e > 0 && std::get<0>(edges[e - 1]) == i && std::get<1>(edges[e - 1]) == j) continue;
    ++p.csr.row_ptr[i + 1];
    p.csr.col_idx.push_back(j);
    p.types.push_back(t);
  }
  for (std::size_t i = 0; i < n; ++i) p.csr.row_ptr[i + 1] += p.csr.row_ptr[i];
  return p;
}

}  // namespace

AttentionPattern augment(const Graph& g, const ExpanderGraph& x, std::size_t layers) {
  const std::size_t n = g.num_nodes();
  if (x.n != 0 && x.n != n) throw DimensionError("augment: expander size differs from graph");
  if (layers == 0) throw ContractViolation("augment: need at least one layer");

  std::vector<std::tuple<NodeId, NodeId, EdgeType>> edges;
  const Csr& a = g.adjacency();
  edges.reserve(a.num_edges() + 2 * x.cycles.size() * n + n);
  for (std::size_t i = 0; i < n; ++i) {
    for (NodeId j : a.row(i)) edges.emplace_back(static_cast<NodeId>(i), j, EdgeType::kGraph);
  }
  if (x.n != 0) {
    const Csr xa = x.adjacency();
    for (std::size_t i = 0; i < n; ++i) {
      for (NodeId j : xa.row(i)) edges.emplace_back(static_cast<NodeId>(i), j, EdgeType::kExpander);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    edges.emplace_back(static_cast<NodeId>(i), static_cast<NodeId>(i), EdgeType::kSelfLoop);
  }
  LayerPattern shared = build_layer(std::move(edges), n);
  return AttentionPattern(std::vector<LayerPattern>(layers, shared));
}

void save_pattern(const LayerPattern& p, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << "# dst\tsrc\ttype\n";
  for (std::size_t i = 0; i < p.csr.num_rows(); ++i) {
    const auto r = p.csr.row(i);
    const auto t = p.row_types(i);
    for (std::size_t k = 0; k < r.size(); ++k) {
      out << i << '\t' << r[k] << '\t' << static_cast<int>(t[k]) << '\n';
    }
  }
}

LayerPattern load_pattern(const std::filesystem::path& path, std::size_t n) {
  std::vector<std::tuple<NodeId, NodeId, EdgeType>> edges;
  detail::for_each_line(path, [&](std::string_view line, std::size_t no) {
    const auto f = detail::split_fields(line, '\t');
    if (f.size() != 3) throw FormatError("expected i<TAB>j<TAB>type", no);
    const auto i = detail::parse_int<std::uint64_t>(f[0], no);
    const auto j = detail::parse_int<std::uint64_t>(f[1], no);
    const auto t = detail::parse_int<int>(f[2], no);
    if (i >= n || j >= n) throw FormatError("node id out of range", no);
    if (t < 0 || t >= static_cast<int>(kNumEdgeTypes)) throw FormatError("bad edge type", no);
    edges.emplace_back(static_cast<NodeId>(i), static_cast<NodeId>(j), static_cast<EdgeType>(t));
  });
  LayerPattern p = build_layer(std::move(edges), n);
  p.csr.validate();
  return p;
}

}  // namespace spex
