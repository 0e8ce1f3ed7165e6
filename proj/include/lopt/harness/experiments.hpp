#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "lopt/harness/config.hpp"
#include "lopt/learned_optimizer.hpp"
#include "lopt/nqm.hpp"

namespace lopt::harness {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitAllDiverged = 3;

struct RunResult {
  int exit_code{kExitOk};
  std::filesystem::path run_dir;
  nlohmann::json summary;
};

/// Resolves `cfg`, creates the run directory, writes config.json, the metric
/// files and summary.json, and returns the exit code. Wall-clock time goes to
/// timing.json so every other file is reproducible byte for byte.
RunResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr);

QuadraticTask<double> nqm_from_params(const nlohmann::json& block);

struct ClosedFormOptimum {
  double loss{0};
  Eigen::MatrixXd gain;  // alpha I + P at the optimum
};

/// Minimizes the closed-form meta-loss over the full gain matrix by
/// backtracking gradient descent on central finite differences.
ClosedFormOptimum closed_form_optimum(const QuadraticTask<double>& task, int horizon,
                                      int iterations);

/// "star_wd0.5" -> (star, 0.5); "blackbox" -> (blackbox, 0); a "_wd<x>" suffix
/// is accepted on every kind.
struct ArmSpec {
  std::string name;
  OptimizerKind kind{OptimizerKind::kStar};
  double weight_decay{0};
};
ArmSpec parse_arm(const std::string& name);

FeatureConfig features_from_params(const nlohmann::json& block);
MlpTaskSpec task_spec_from_params(const nlohmann::json& block);

}  // namespace lopt::harness
