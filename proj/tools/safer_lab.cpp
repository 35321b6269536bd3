#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>

#include "safer/config.hpp"
#include "safer/experiment.hpp"

namespace fs = std::filesystem;
namespace ex = safer::experiment;

namespace {

int report(const ex::ParseResult& parsed, const std::string& source) {
  for (const auto& d : parsed.diagnostics) std::fprintf(stderr, "%s\n", d.str(source).c_str());
  return parsed.diagnostics.empty() ? ex::exit_ok : ex::exit_config_error;
}

int cmd_validate(const std::string& path) {
  const auto parsed = ex::load_config(path);
  const int rc = report(parsed, path);
  if (rc == ex::exit_ok) std::printf("%s: ok\n", path.c_str());
  return rc;
}

int cmd_run(const std::string& path, const std::string& out, int workers, bool verbose) {
  const auto parsed = ex::load_config(path);
  if (const int rc = report(parsed, path); rc != ex::exit_ok) return rc;
  ex::ExperimentConfig cfg = *parsed.config;
  if (workers > 0) cfg.workers = workers;
  ex::RunOptions opts;
  opts.quiet = !verbose;
  if (!out.empty()) {
    cfg.output_dir = out;
  }
  try {
    const auto res = ex::run_experiment(cfg, opts);
    std::printf("results: %s\n", res.output_dir.string().c_str());
    if (res.failed_runs > 0) std::fprintf(stderr, "%zu run(s) failed; partial results kept\n", res.failed_runs);
    return res.status;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "run failed: %s\n", e.what());
    return ex::exit_runtime_failure;
  }
}

int cmd_emit(const std::string& log_path, const std::string& out) {
  try {
    const auto log = ex::load_log(log_path);
    const fs::path dir = out.empty() ? fs::path(log_path).parent_path() / "plots" : fs::path(out);
    for (const auto& p : ex::emit_plot_data(log, dir)) std::printf("%s\n", p.string().c_str());
    return ex::exit_ok;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "emit-plots: %s\n", e.what());
    return ex::exit_runtime_failure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual machine-unlearning lab"};
  app.require_subcommand(1);

  std::string config, out, log;
  int workers = 0;
  bool verbose = false;

  auto* run = app.add_subcommand("run", "execute every run of an experiment config");
  run->add_option("config", config, "experiment config (YAML)")->required()->check(CLI::ExistingFile);
  run->add_option("-o,--output", out, "output directory, overrides output_dir");
  run->add_option("-j,--workers", workers, "parallel repeats, overrides workers");
  run->add_flag("-v,--verbose", verbose, "report progress on stderr");

  auto* validate = app.add_subcommand("validate", "check a config without running it");
  validate->add_option("config", config, "experiment config (YAML)")->required()->check(CLI::ExistingFile);

  auto* emit = app.add_subcommand("emit-plots", "rewrite plot-data CSVs from an aggregate log");
  emit->add_option("log", log, "aggregate.json written by run")->required()->check(CLI::ExistingFile);
  emit->add_option("-o,--output", out, "plot directory (default: <log dir>/plots)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? ex::exit_ok : ex::exit_config_error;
  }

  if (*run) return cmd_run(config, out, workers, verbose);
  if (*validate) return cmd_validate(config);
  return cmd_emit(log, out);
}
