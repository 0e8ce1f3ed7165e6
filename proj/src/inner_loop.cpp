#include "lopt/learned_optimizer.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "lopt/rng.hpp"

namespace lopt {

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kStar: return "star";
    case OptimizerKind::kBlackbox: return "blackbox";
    case OptimizerKind::kHyperparam: return "hyperparam";
    case OptimizerKind::kLinearNqm: return "linear_nqm";
  }
  return "unknown";
}

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "star") return OptimizerKind::kStar;
  if (s == "blackbox") return OptimizerKind::kBlackbox;
  if (s == "hyperparam") return OptimizerKind::kHyperparam;
  if (s == "linear_nqm") return OptimizerKind::kLinearNqm;
  throw std::invalid_argument("unknown optimizer kind '" + s + "'");
}

Eigen::Index head_count(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kStar: return 3;
    case OptimizerKind::kBlackbox: return 2;
    case OptimizerKind::kHyperparam: return 1;
    case OptimizerKind::kLinearNqm: break;
  }
  throw std::invalid_argument("optimizer kind has no MLP");
}

LearnedOptimizer LearnedOptimizer::create(OptimizerKind kind, const FeatureConfig& features,
                                          std::uint64_t seed, bool learnable_gate) {
  features.nominal.validate();
  LearnedOptimizer opt;
  opt.kind = kind;
  opt.features = features;
  opt.params = StarParams::initial(features.feature_count(), head_count(kind), seed);
  opt.params.feature_fingerprint = features.fingerprint();
  opt.params.learnable_gate = learnable_gate && kind == OptimizerKind::kStar;
  return opt;
}

LearnedOptimizer LearnedOptimizer::with_theta(const Eigen::Ref<const Eigen::VectorXd>& theta) const {
  LearnedOptimizer out = *this;
  out.params.assign(theta);
  return out;
}

Eigen::ArrayXd blackbox_preconditioner(const std::vector<TensorSpec>& tensors,
                                       const InnerState& state, const NominalConfig& nominal,
                                       double floor) {
  const Eigen::ArrayXd rms = primary_rms(state, nominal);
  Eigen::ArrayXd v(rms.size());
  for (const auto& t : tensors) {
    const double mean_sq = rms.segment(t.offset, t.size()).square().mean();
    v.segment(t.offset, t.size()).setConstant(std::max(std::sqrt(mean_sq), floor));
  }
  return v;
}

Eigen::ArrayXd LearnedOptimizer::update(const std::vector<TensorSpec>& tensors,
                                        const Eigen::VectorXd& phi, const Eigen::VectorXd& grad,
                                        const InnerState& state) const {
  const Eigen::Index n = phi.size();
  TensorStats stats{Eigen::ArrayXd(n), Eigen::ArrayXd(n)};
  for (const auto& t : tensors) {
    const TensorStats s = tensor_stats(phi.segment(t.offset, t.size()).array(),
                                       grad.segment(t.offset, t.size()).array(), t.rows, t.cols);
    stats.grad_rms.segment(t.offset, t.size()) = s.grad_rms;
    stats.param_rms.segment(t.offset, t.size()) = s.param_rms;
  }
  Eigen::MatrixXd f = compute_raw_features(state, phi.array(), grad.array(), stats, features);
  for (const auto& t : tensors) {
    Eigen::MatrixXd block = f.middleRows(t.offset, t.size());
    normalize_features(block, features);
    f.middleRows(t.offset, t.size()) = block;
  }
  switch (kind) {
    case OptimizerKind::kStar:
      return star_update(params, f, state, features.nominal,
                         blackbox_preconditioner(tensors, state, features.nominal));
    case OptimizerKind::kBlackbox:
      return blackbox_update(params, f);
    case OptimizerKind::kHyperparam: {
      const Eigen::ArrayXd m = mlp_forward(params, f).col(0).array();
      return params.scales.beta1 * (params.scales.beta2 * m).exp() *
             nominal_direction(state, features.nominal);
    }
    case OptimizerKind::kLinearNqm: break;
  }
  throw std::invalid_argument("LearnedOptimizer::update: kind has no MLP");
}

InnerRun start_inner_run(const InnerTask& task, const NominalConfig& nominal,
                         std::uint64_t task_seed) {
  InnerRun run;
  run.params = task.init_params(task_seed);
  run.state = InnerState::zeros(run.params.size(), nominal);
  run.task_seed = task_seed;
  return run;
}

std::uint64_t batch_seed_for(std::uint64_t task_seed, int t) {
  return derive_seed(task_seed, 1, static_cast<std::uint64_t>(t));
}

namespace {

bool bad_loss(double loss, double limit) { return !std::isfinite(loss) || loss > limit; }

// One inner step; returns the loss at the pre-update parameters or NaN on divergence.
template <typename UpdateFn>
double inner_step(const InnerTask& task, const NominalConfig& nominal, InnerRun& run,
                  double loss_limit, const UpdateFn& update) {
  LossAndGrad lg = task.loss_and_grad(run.params, batch_seed_for(run.task_seed, run.offset));
  ++run.offset;
  if (bad_loss(lg.loss, loss_limit) || !lg.grad.allFinite()) {
    run.diverged = true;
    return std::numeric_limits<double>::quiet_NaN();
  }
  update_state_inplace(run.state, lg.grad.array(), nominal);
  const Eigen::ArrayXd dphi = update(run, lg.grad);
  if (!dphi.allFinite()) {
    run.diverged = true;
    return std::numeric_limits<double>::quiet_NaN();
  }
  run.params.array() -= dphi;
  return lg.loss;
}

template <typename UpdateFn>
EvalCurve evaluate_with(const InnerTask& task, const NominalConfig& nominal,
                        std::uint64_t task_seed, int horizon, double loss_limit,
                        const UpdateFn& update) {
  EvalCurve curve;
  curve.losses.reserve(static_cast<std::size_t>(horizon));
  InnerRun run = start_inner_run(task, nominal, task_seed);
  for (int t = 0; t < horizon; ++t) {
    double loss;
    try {
      loss = inner_step(task, nominal, run, loss_limit, update);
    } catch (const std::domain_error&) {
      run.diverged = true;
      loss = std::numeric_limits<double>::quiet_NaN();
    }
    if (run.diverged) {
      curve.diverged = true;
      curve.diverged_at = t;
      break;
    }
    curve.losses.push_back(loss);
  }
  return curve;
}

}  // namespace

double unroll_segment(const InnerTask& task, const LearnedOptimizer& opt, InnerRun& run, int steps,
                      double loss_limit) {
  if (steps < 1) throw std::invalid_argument("unroll_segment: steps must be >= 1");
  const auto update = [&](const InnerRun& r, const Eigen::VectorXd& grad) {
    return opt.update(task.tensors(), r.params, grad, r.state);
  };
  double total = 0.0;
  for (int t = 0; t < steps; ++t) {
    if (!run.diverged) {
      try {
        total += inner_step(task, opt.features.nominal, run, loss_limit, update);
      } catch (const std::domain_error&) {
        run.diverged = true;
      }
    } else {
      ++run.offset;
    }
  }
  if (run.diverged) return std::numeric_limits<double>::infinity();
  return total / steps;
}

double EvalCurve::mean_loss() const {
  if (diverged || losses.empty()) return std::numeric_limits<double>::infinity();
  double s = 0.0;
  for (double l : losses) s += l;
  return s / static_cast<double>(losses.size());
}

EvalCurve evaluate_run(const InnerTask& task, const LearnedOptimizer& opt, std::uint64_t task_seed,
                       int horizon, double loss_limit) {
  const auto update = [&](const InnerRun& r, const Eigen::VectorXd& grad) {
    return opt.update(task.tensors(), r.params, grad, r.state);
  };
  return evaluate_with(task, opt.features.nominal, task_seed, horizon, loss_limit, update);
}

EvalCurve evaluate_reference(const InnerTask& task, ReferenceOptimizer ref,
                             const NominalConfig& nominal, double beta1, std::uint64_t task_seed,
                             int horizon, double loss_limit) {
  const auto update = [&](const InnerRun& r, const Eigen::VectorXd& grad) -> Eigen::ArrayXd {
    if (ref == ReferenceOptimizer::kNoOp) return Eigen::ArrayXd::Zero(grad.size());
    return beta1 * nominal_direction(r.state, nominal);
  };
  return evaluate_with(task, nominal, task_seed, horizon, loss_limit, update);
}

double evaluate_meta_loss(const InnerTask& task, const LearnedOptimizer& opt,
                          const std::vector<std::uint64_t>& task_seeds, int horizon,
                          double loss_limit) {
  if (task_seeds.empty()) throw std::invalid_argument("evaluate_meta_loss: no task seeds");
  double total = 0.0;
  for (std::uint64_t s : task_seeds) {
    const EvalCurve c = evaluate_run(task, opt, s, horizon, loss_limit);
    if (c.diverged) return std::numeric_limits<double>::infinity();
    total += c.mean_loss();
  }
  return total / static_cast<double>(task_seeds.size());
}

}  // namespace lopt
