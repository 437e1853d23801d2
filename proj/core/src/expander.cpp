#include "spex/expander.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>

#include "spex/error.hpp"
#include "spex/rng.hpp"
#include "text_io.hpp"

namespace spex {

Csr ExpanderGraph::adjacency() const {
  std::vector<std::pair<NodeId, NodeId>> edges;
  edges.reserve(cycles.size() * n);
  for (const auto& cycle : cycles) {
    for (std::size_t k = 0; k < cycle.size(); ++k) {
      const NodeId u = cycle[k];
      const NodeId v = cycle[(k + 1) % cycle.size()];
      if (u != v) edges.emplace_back(u, v);
    }
  }
  return Csr::from_edges(n, std::move(edges), /*symmetrize=*/true);
}

namespace {

std::vector<NodeId> random_hamiltonian_cycle(std::size_t n, Rng& rng) {
  std::vector<NodeId> perm(n);
  std::iota(perm.begin(), perm.end(), NodeId{0});
  // Fisher-Yates.
  for (std::size_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i + 1));
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

void require_no_empty_rows(const Csr& a) {
  if (a.num_rows() == 0) throw ContractViolation("spectral_gap: empty graph");
  for (std::size_t i = 0; i < a.num_rows(); ++i) {
    if (a.degree(i) == 0) throw ContractViolation("spectral_gap: isolated node " + std::to_string(i));
  }
}

double clamp_gap(double gap) {
  if (std::abs(gap) < 1e-10) return 0.0;
  return std::clamp(gap, 0.0, 1.0);
}

}  // namespace

ExpanderGraph build_expander(std::size_t n, const ExpanderOptions& options) {
  if (n < 3) throw ContractViolation("build_expander: n must be >= 3");
  if (options.num_cycles < 1) throw ContractViolation("build_expander: need at least one cycle");

  double best = -1.0;
  const std::size_t attempts = std::max<std::size_t>(options.max_retries, 1);
  for (std::size_t attempt = 0; attempt < attempts; ++attempt) {
    Rng rng(derive_seed(options.seed, {attempt}));
    ExpanderGraph x;
    x.n = n;
    x.seed = options.seed;
    x.cycles.reserve(options.num_cycles);
    for (std::size_t c = 0; c < options.num_cycles; ++c) {
      x.cycles.push_back(random_hamiltonian_cycle(n, rng));
    }
    x.gap = spectral_gap(x.adjacency());
    if (x.gap >= options.min_gap) return x;
    best = std::max(best, x.gap);
  }
  throw ConstructionError("build_expander: spectral gap " + std::to_string(options.min_gap) +
                              " not reached after " + std::to_string(attempts) +
                              " attempts; best gap " + std::to_string(best),
                          best);
}

double spectral_gap(const Csr& adjacency) {
  require_no_empty_rows(adjacency);
  const std::size_t n = adjacency.num_rows();
  if (n > kDenseGapLimit) return spectral_gap_iterative(adjacency);
  if (n == 1) return 0.0;

  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const double di = static_cast<double>(adjacency.degree(i));
    for (NodeId j : adjacency.row(i)) {
      const double dj = static_cast<double>(adjacency.degree(j));
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0 / std::sqrt(di * dj);
    }
  }
  // Directed inputs are symmetrized; the eigensolver reads the lower triangle.
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw NumericError("spectral_gap: eigensolve failed");
  const auto& ev = solver.eigenvalues();  // ascending
  const double lambda2 = ev(static_cast<Eigen::Index>(n) - 2);
  const double lambda_min = ev(0);
  return clamp_gap(1.0 - std::max(lambda2, std::abs(lambda_min)));
}

double spectral_gap_iterative(const Csr& adjacency, double tolerance,
                              std::size_t max_iterations) {
  require_no_empty_rows(adjacency);
  const std::size_t n = adjacency.num_rows();
  std::vector<double> inv_sqrt_deg(n), top(n);
  double norm2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(adjacency.degree(i));
    inv_sqrt_deg[i] = 1.0 / std::sqrt(d);
    top[i] = std::sqrt(d);
    norm2 += d;
  }
  for (double& t : top) t /= std::sqrt(norm2);

  // Power iteration on the normalized adjacency with the trivial eigenvector
  // projected out; converges to max(lambda_2, |lambda_n|).
  auto apply = [&](const std::vector<double>& x, std::vector<double>& y) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (NodeId j : adjacency.row(i)) acc += inv_sqrt_deg[j] * x[j];
      y[i] = inv_sqrt_deg[i] * acc;
    }
    double proj = 0.0;
    for (std::size_t i = 0; i < n; ++i) proj += top[i] * y[i];
    for (std::size_t i = 0; i < n; ++i) y[i] -= proj * top[i];
  };
  auto normalize = [](std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    s = std::sqrt(s);
    if (s > 0) for (double& v : x) v /= s;
    return s;
  };

  Rng rng(0x5eed);
  std::vector<double> x(n), y(n), z(n);
  for (double& v : x) v = rng.normal();
  {
    double proj = 0.0;
    for (std::size_t i = 0; i < n; ++i) proj += top[i] * x[i];
    for (std::size_t i = 0; i < n; ++i) x[i] -= proj * top[i];
  }
  normalize(x);

  // Iterate with M^2 so that eigenvalues of opposite sign do not oscillate.
  double estimate = 0.0;
  for (std::size_t it = 0; it < max_iterations; ++it) {
    apply(x, z);
    apply(z, y);
    double rayleigh = 0.0;
    for (std::size_t i = 0; i < n; ++i) rayleigh += x[i] * y[i];
    double residual = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = y[i] - rayleigh * x[i];
      residual += r * r;
    }
    residual = std::sqrt(residual);
    estimate = std::sqrt(std::max(rayleigh, 0.0));
    if (normalize(y) == 0.0) break;
    x.swap(y);
    if (residual <= tolerance * std::max(rayleigh, 1e-300)) break;
  }
  return clamp_gap(1.0 - estimate);
}

void save_expander(const ExpanderGraph& x, const std::filesystem::path& path) {
  nlohmann::json j;
  j["n"] = x.n;
  j["seed"] = x.seed;
  j["cycles"] = x.cycles;
  j["gap"] = x.gap;
  auto out = detail::open_out(path);
  out << j.dump(1) << '\n';
}

ExpanderGraph load_expander(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    ExpanderGraph x;
    x.n = j.at("n").get<std::size_t>();
    x.seed = j.at("seed").get<std::uint64_t>();
    x.cycles = j.at("cycles").get<std::vector<std::vector<NodeId>>>();
    x.gap = j.at("gap").get<double>();
    for (const auto& c : x.cycles) {
      std::vector<NodeId> sorted = c;
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t i = 0; i < sorted.size(); ++i) {
        if (sorted.size() != x.n || sorted[i] != i) {
          throw FormatError("expander cycle is not a permutation of [0, n)");
        }
      }
    }
    return x;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad expander JSON: ") + e.what());
  }
}

}  // namespace spex
