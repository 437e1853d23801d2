#include "cli_support.hpp"

#include <sys/resource.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include "spex/error.hpp"

namespace spex::cli {

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_update(std::uint64_t& h, const char* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= kFnvPrime;
  }
}

void fnv_stream(std::uint64_t& h, const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    fnv_update(h, buf, static_cast<std::size_t>(in.gcount()));
  }
}

std::vector<fs::path> regular_files(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  }
  std::sort(files.begin(), files.end());
  return files;
}

bool is_within(const fs::path& inner, const fs::path& outer) {
  const fs::path a = fs::weakly_canonical(inner);
  const fs::path b = fs::weakly_canonical(outer);
  auto [ib, ob] = std::mismatch(a.begin(), a.end(), b.begin(), b.end());
  return ob == b.end();
}

}  // namespace

std::uint64_t fnv1a_file(const fs::path& path) {
  std::uint64_t h = kFnvOffset;
  fnv_stream(h, path);
  return h;
}

std::uint64_t fnv1a_path(const fs::path& path) {
  if (!fs::is_directory(path)) return fnv1a_file(path);
  std::uint64_t h = kFnvOffset;
  for (const auto& rel : regular_files(path)) {
    const std::string name = rel.generic_string();
    fnv_update(h, name.data(), name.size() + 1);
    fnv_stream(h, path / rel);
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

long peak_rss_kib() {
  rusage usage{};
  if (getrusage(RUSAGE_SELF, &usage) != 0) return -1;
  return usage.ru_maxrss;
}

std::size_t thread_count() {
  const char* env = std::getenv("SPEX_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long long v = std::strtoll(env, &end, 10);
  if (*end != '\0' || v < 1) {
    throw ConfigError(std::string("SPEX_THREADS must be a positive integer, got '") + env + "'");
  }
  return static_cast<std::size_t>(v);
}

std::vector<std::size_t> parse_size_list(const std::string& text, const char* flag) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || item.front() == '-') {
      throw ConfigError(std::string(flag) + ": '" + item + "' is not a nonnegative integer");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ConfigError(std::string(flag) + " needs at least one value");
  return out;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw FormatError("cannot write " + path.string());
}

fs::path resolve_scores_path(const fs::path& path) {
  if (fs::is_directory(path)) {
    for (const fs::path& rel : {fs::path("scores") / "scores.bin", fs::path("scores.bin")}) {
      if (fs::is_regular_file(path / rel)) return path / rel;
    }
    throw ConfigError("no score file under " + path.string());
  }
  if (!fs::is_regular_file(path)) throw ConfigError("score file not found: " + path.string());
  return path;
}

ScoreSet load_scores(const fs::path& path) {
  const fs::path file = resolve_scores_path(path);
  return file.extension() == ".bin" ? load_scores_binary(file) : load_scores_text(file);
}

RunOutput::RunOutput(std::string command, fs::path dir, bool force, std::vector<std::string> argv)
    : command_(std::move(command)),
      dir_(std::move(dir)),
      force_(force),
      argv_(std::move(argv)),
      start_(std::chrono::steady_clock::now()) {
  if (dir_.empty()) throw ConfigError("--out is required");
}

RunOutput::~RunOutput() {
  if (created_ && !finished_) {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }
}

void RunOutput::input(const std::string& name, const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError(name + " not found: " + path.string());
  inputs_[name] = {fs::absolute(path).lexically_normal(), fnv1a_path(path)};
}

void RunOutput::create() {
  if (fs::exists(dir_)) {
    if (!fs::is_directory(dir_)) throw ConfigError(dir_.string() + " exists and is not a directory");
    if (!fs::is_empty(dir_)) {
      if (!force_) {
        throw ConfigError("output directory " + dir_.string() + " exists; pass --force to overwrite");
      }
      for (const auto& [name, in] : inputs_) {
        if (is_within(in.first, dir_)) {
          throw ConfigError("refusing to overwrite " + dir_.string() + ": it holds input " + name);
        }
      }
      fs::remove_all(dir_);
    }
  }
  fs::create_directories(dir_);
  created_ = true;
}

void RunOutput::finish() {
  nlohmann::json inputs = nlohmann::json::object();
  for (const auto& [name, in] : inputs_) {
    inputs[name] = {{"path", in.first.string()}, {"fnv1a64", hex64(in.second)}};
  }
  nlohmann::json artifacts = nlohmann::json::array();
  for (const auto& rel : regular_files(dir_)) {
    if (rel != "manifest.json") artifacts.push_back(rel.generic_string());
  }
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  nlohmann::json m{{"command", command_},
                   {"argv", argv_},
                   {"config", config_},
                   {"seed", seed_},
                   {"inputs", inputs},
                   {"artifacts", artifacts},
                   {"threads", thread_count()},
                   {"wall_clock_seconds", wall},
                   {"peak_rss_kib", peak_rss_kib()}};
  write_json(dir_ / "manifest.json", m);
  finished_ = true;
}

}  // namespace spex::cli
