#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spex/sampler.hpp"

namespace spex::cli {

namespace fs = std::filesystem;

// 64-bit FNV-1a over a file's bytes. Directories hash the sorted relative
// paths and contents of every regular file below them.
std::uint64_t fnv1a_file(const fs::path& path);
std::uint64_t fnv1a_path(const fs::path& path);
std::string hex64(std::uint64_t v);

// Peak resident set size of this process in KiB.
long peak_rss_kib();

// Worker threads from SPEX_THREADS (default 1). Throws ConfigError on
// anything but a positive integer.
std::size_t thread_count();

// "4,4" -> {4, 4}. Throws ConfigError on empty or malformed lists.
std::vector<std::size_t> parse_size_list(const std::string& text, const char* flag);

nlohmann::json read_json(const fs::path& path);
void write_json(const fs::path& path, const nlohmann::json& j);

// Run directory (scores/scores.bin), a .bin file, or a text score file.
fs::path resolve_scores_path(const fs::path& path);
ScoreSet load_scores(const fs::path& path);

// Output directory of one command plus its manifest. Creation refuses an
// existing non-empty directory unless force is set, and refuses to replace a
// directory that holds one of the inputs.
class RunOutput {
 public:
  RunOutput(std::string command, fs::path dir, bool force, std::vector<std::string> argv);
  // A command that fails after create() leaves no partial directory behind.
  ~RunOutput();
  RunOutput(const RunOutput&) = delete;
  RunOutput& operator=(const RunOutput&) = delete;

  const fs::path& dir() const noexcept { return dir_; }
  fs::path operator/(const fs::path& rel) const { return dir_ / rel; }

  // Registers an input; hashed immediately so the manifest records the
  // content seen by the command.
  void input(const std::string& name, const fs::path& path);
  void config(nlohmann::json resolved) { config_ = std::move(resolved); }
  void seed(std::uint64_t s) { seed_ = s; }

  // Prepares the directory. Call after every input is registered.
  void create();
  // Writes manifest.json listing every file written under the directory.
  void finish();

 private:
  std::string command_;
  fs::path dir_;
  bool force_;
  std::vector<std::string> argv_;
  std::map<std::string, std::pair<fs::path, std::uint64_t>> inputs_;
  nlohmann::json config_ = nlohmann::json::object();
  std::uint64_t seed_ = 0;
  std::chrono::steady_clock::time_point start_;
  bool created_ = false;
  bool finished_ = false;
};

}  // namespace spex::cli
