#pragma once

// Running a (learned) optimizer on an inner task: the per-tensor feature
// pipeline, truncated unrolls for PES, and full-horizon evaluation.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lopt/star.hpp"
#include "lopt/tasks.hpp"

namespace lopt {

enum class OptimizerKind { kStar, kBlackbox, kHyperparam, kLinearNqm };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& s);

/// Heads per kind: star 3, blackbox 2, hyperparam 1. linear_nqm has no MLP.
Eigen::Index head_count(OptimizerKind kind);

/// The blackbox preconditioner v: for each tensor, the root of the mean
/// bias-corrected primary second moment, floored at `floor` and broadcast to
/// every coordinate of the tensor.
Eigen::ArrayXd blackbox_preconditioner(const std::vector<TensorSpec>& tensors,
                                       const InnerState& state, const NominalConfig& nominal,
                                       double floor = 1e-8);

struct LearnedOptimizer {
  OptimizerKind kind{OptimizerKind::kStar};
  FeatureConfig features;
  StarParams params;

  /// MLP-based kinds only; head layer zero, trunk from `seed`.
  static LearnedOptimizer create(OptimizerKind kind, const FeatureConfig& features,
                                 std::uint64_t seed, bool learnable_gate = false);

  Eigen::VectorXd theta() const { return params.flatten(); }
  LearnedOptimizer with_theta(const Eigen::Ref<const Eigen::VectorXd>& theta) const;

  /// Parameter update for one step. `state` must already contain `grad`.
  Eigen::ArrayXd update(const std::vector<TensorSpec>& tensors, const Eigen::VectorXd& params,
                        const Eigen::VectorXd& grad, const InnerState& state) const;
};

/// A no-op optimizer run and a pure nominal run are the reference points of
/// the zero-initialized blackbox and STAR arms.
enum class ReferenceOptimizer { kNoOp, kNominal };

struct InnerRun {
  Eigen::VectorXd params;
  InnerState state;
  std::uint64_t task_seed{0};
  int offset{0};
  bool diverged{false};
};

InnerRun start_inner_run(const InnerTask& task, const NominalConfig& nominal,
                         std::uint64_t task_seed);

/// Batch seed for step `t` of the run keyed by `task_seed`.
std::uint64_t batch_seed_for(std::uint64_t task_seed, int t);

/// Runs `steps` inner steps and returns the mean loss over them. A loss that is
/// non-finite or above `loss_limit`, or a non-finite update, marks the run
/// diverged and the result is +inf.
double unroll_segment(const InnerTask& task, const LearnedOptimizer& opt, InnerRun& run, int steps,
                      double loss_limit = kDivergenceThreshold);

struct EvalCurve {
  std::vector<double> losses;  // one per completed step, truncated at divergence
  bool diverged{false};
  int diverged_at{-1};
  double mean_loss() const;
};

EvalCurve evaluate_run(const InnerTask& task, const LearnedOptimizer& opt, std::uint64_t task_seed,
                       int horizon, double loss_limit = kDivergenceThreshold);

EvalCurve evaluate_reference(const InnerTask& task, ReferenceOptimizer ref,
                             const NominalConfig& nominal, double beta1, std::uint64_t task_seed,
                             int horizon, double loss_limit = kDivergenceThreshold);

/// Mean over `task_seeds` of the full-horizon mean loss; +inf if any run diverges.
double evaluate_meta_loss(const InnerTask& task, const LearnedOptimizer& opt,
                          const std::vector<std::uint64_t>& task_seeds, int horizon,
                          double loss_limit = kDivergenceThreshold);

}  // namespace lopt
