#pragma once

#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>

namespace spex::cli {

// Parsing selects one action; main runs it after parsing so that errors map
// to exit codes in one place.
struct Context {
  std::vector<std::string> argv;
  std::function<void()> action;
};

void add_gen(CLI::App& app, Context& ctx);
void add_augment(CLI::App& app, Context& ctx);
void add_train_estimator(CLI::App& app, Context& ctx);
void add_train_final(CLI::App& app, Context& ctx);
void add_predict(CLI::App& app, Context& ctx);
void add_analyze(CLI::App& app, Context& ctx);

}  // namespace spex::cli
