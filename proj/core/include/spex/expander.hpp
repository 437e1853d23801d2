#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "spex/graph.hpp"

namespace spex {

// Union of random Hamiltonian cycles, collapsed to a simple symmetric graph.
struct ExpanderGraph {
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<NodeId>> cycles;
  double gap = 0.0;

  std::size_t degree() const noexcept { return 2 * cycles.size(); }
  // Symmetric simple adjacency: cycle edge u->v implies v->u.
  Csr adjacency() const;
};

struct ExpanderOptions {
  std::size_t num_cycles = 3;
  double min_gap = 0.05;
  std::size_t max_retries = 32;
  std::uint64_t seed = 0;
};

// Samples num_cycles uniform Hamiltonian cycles (Fisher-Yates permutations)
// and retries with successive sub-seeds until the two-sided spectral gap of
// the collapsed graph reaches min_gap. Throws ConstructionError otherwise.
ExpanderGraph build_expander(std::size_t n, const ExpanderOptions& options);

// Two-sided spectral gap 1 - max(lambda_2, |lambda_n|) of D^-1/2 A D^-1/2.
// Dense eigensolve up to kDenseGapLimit nodes, deflated power iteration above.
// Disconnected graphs yield 0. Every row must be nonempty.
double spectral_gap(const Csr& adjacency);
inline constexpr std::size_t kDenseGapLimit = 2048;

// Same quantity via deflated power iteration regardless of size.
double spectral_gap_iterative(const Csr& adjacency, double tolerance = 1e-6,
                              std::size_t max_iterations = 100000);

void save_expander(const ExpanderGraph& x, const std::filesystem::path& path);
ExpanderGraph load_expander(const std::filesystem::path& path);

}  // namespace spex
