// lopt_cli <experiment> [--config file.json] [--seed N] [--out dir] [--threads N]
//
// Exit codes: 0 ok, 2 config error, 3 every arm diverged.

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "lopt/harness/config.hpp"
#include "lopt/harness/experiments.hpp"

int main(int argc, char** argv) {
  using namespace lopt::harness;

  CLI::App app{"Learned-optimizer stability and meta-training experiments"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
  bool quiet = false;
  for (const auto& id : experiment_ids()) {
    auto* sub = app.add_subcommand(id, "run the " + id + " experiment");
    sub->add_option("--config", config_path, "JSON config; keys not given take their defaults")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "root seed");
    sub->add_option("--out", out, "run directory");
    sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--quiet", quiet, "no progress lines");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfigError;
  }
  const std::string experiment = app.get_subcommands().front()->get_name();

  try {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = load_config_file(config_path);
    if (cfg.experiment.empty()) cfg.experiment = experiment;
    if (cfg.experiment != experiment)
      throw ConfigError("config is for '" + cfg.experiment + "' but the subcommand is '" + experiment + "'");
    if (seed) cfg.seed = *seed;
    if (out) cfg.out_dir = *out;
    if (threads) cfg.threads = *threads;

    const RunResult r = run_experiment(cfg, quiet ? nullptr : &std::cerr);
    std::cout << r.run_dir.string() << "\n";
    if (r.exit_code == kExitAllDiverged) std::cerr << "every arm diverged\n";
    return r.exit_code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
