#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "spex/graph.hpp"

namespace spex {

enum class Generator : std::uint8_t { kBridgeComponents, kHomophilySbm, kHeterophilySbm };

const char* to_string(Generator g) noexcept;
Generator generator_from_string(const std::string& s);

struct SyntheticSpec {
  Generator generator = Generator::kBridgeComponents;
  std::uint64_t seed = 0;
  double noise = 0.1;
  std::array<double, 3> split{0.6, 0.2, 0.2};

  // Bridge task: components of one color each, selected pairs joined by a
  // single bridge edge. intra_p = 1 gives cliques.
  std::size_t num_components = 8;
  std::size_t component_size = 24;
  std::size_t num_bridges = 4;
  double intra_p = 1.0;

  // Stochastic block model. Negative probabilities select the flavor default.
  std::size_t num_blocks = 4;
  std::size_t block_size = 50;
  double p_in = -1.0;
  double p_out = -1.0;
  std::size_t feature_dim = 8;
  bool multilabel = false;

  void validate() const;
  double resolved_p_in() const;
  double resolved_p_out() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

// Ground truth of a generated bridge task.
struct BridgeLayout {
  std::vector<int> color;                           // per node, 0 or 1
  std::vector<std::size_t> component;               // per node, before bridging
  std::vector<std::pair<NodeId, NodeId>> bridges;   // one edge per joined pair
};

// Two-color components; label(v) = 1 iff v's bridged component holds both
// colors. Features are one-hot color plus Gaussian noise.
Graph gen_bridge_task(const SyntheticSpec& spec, BridgeLayout* layout = nullptr);

// Labels from union-find over the full edge set.
std::vector<std::int64_t> mixed_component_labels(std::size_t n,
                                                 const std::vector<std::pair<NodeId, NodeId>>& edges,
                                                 const std::vector<int>& color);

// Block model with labels = blocks and features = block mean + noise.
Graph gen_sbm(const SyntheticSpec& spec);

Graph generate(const SyntheticSpec& spec);

// Fraction of edges joining nodes with the same label.
double homophily_ratio(const Graph& g);

// Per-class shuffled split by the given fractions.
std::vector<Split> stratified_split(const std::vector<std::int64_t>& labels,
                                    const std::array<double, 3>& fractions, std::uint64_t seed);

// Directory with edges.tsv, features.csv, labels.csv, split.txt, dataset.json.
void write_dataset(const Graph& g, const SyntheticSpec& spec, const std::filesystem::path& dir);
Graph read_dataset(const std::filesystem::path& dir);

}  // namespace spex
