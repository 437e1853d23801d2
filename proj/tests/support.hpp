#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <unistd.h>
#include <vector>

#include "spex/graph.hpp"
#include "spex/rng.hpp"

namespace spex::test {

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("spex_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

inline std::vector<std::pair<NodeId, NodeId>> path_edges(std::size_t n) {
  std::vector<std::pair<NodeId, NodeId>> e;
  for (NodeId i = 0; i + 1 < n; ++i) e.emplace_back(i, i + 1);
  return e;
}

// Graph with random features, labels i % classes and every node in training
// unless a split is given.
inline Graph make_graph(std::size_t n, const std::vector<std::pair<NodeId, NodeId>>& edges,
                        std::size_t feature_dim, std::size_t classes, std::uint64_t seed,
                        std::vector<Split> split = {}) {
  Rng rng(seed);
  std::vector<float> f(n * feature_dim);
  for (auto& x : f) x = static_cast<float>(rng.normal());
  std::vector<std::int64_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::int64_t>(i % classes);
  if (split.empty()) split.assign(n, Split::kTrain);
  return Graph(Csr::from_edges(n, edges, true), std::move(f), feature_dim, std::move(labels),
               std::move(split), TaskKind::kMulticlass, classes);
}

}  // namespace spex::test
