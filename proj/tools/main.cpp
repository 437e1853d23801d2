#include <cstdio>
#include <exception>
#include <iostream>

#include "cli_support.hpp"
#include "commands.hpp"
#include "spex/error.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

// Help of the deepest subcommand reached by the parse.
std::string usage(const CLI::App& app) {
  const CLI::App* cur = &app;
  for (;;) {
    const auto subs = cur->get_subcommands();
    if (subs.empty()) break;
    cur = subs.front();
  }
  return cur->help();
}

int fail(int code, const char* kind, const char* what) {
  std::fprintf(stderr, "spex: %s: %s\n", kind, what);
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse graph attention via score estimation and sampled fixed-degree layers", "spex"};
  app.set_version_flag("--version", "spex 0.1.0");
  app.require_subcommand(1);

  spex::cli::Context ctx;
  ctx.argv.assign(argv, argv + argc);
  spex::cli::add_gen(app, ctx);
  spex::cli::add_augment(app, ctx);
  spex::cli::add_train_estimator(app, ctx);
  spex::cli::add_train_final(app, ctx);
  spex::cli::add_predict(app, ctx);
  spex::cli::add_analyze(app, ctx);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "spex: %s\n\n%s", e.what(), usage(app).c_str());
    return kExitConfig;
  }

  try {
    spex::cli::thread_count();
    ctx.action();
  } catch (const spex::NumericError& e) {
    return fail(kExitNumeric, "numeric error", e.what());
  } catch (const spex::ConstructionError& e) {
    return fail(kExitNumeric, "construction failed", e.what());
  } catch (const spex::Error& e) {
    return fail(kExitConfig, "error", e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(kExitConfig, "filesystem error", e.what());
  } catch (const std::exception& e) {
    return fail(1, "internal error", e.what());
  }
  return 0;
}
