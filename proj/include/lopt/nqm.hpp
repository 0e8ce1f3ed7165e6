#pragma once

// Noisy quadratic model: a quadratic loss whose minimum is resampled i.i.d.
// at every step, optimized by a linear update phi <- phi - M grad. Provides
// the induced linear dynamics, exact state covariance and expected loss, and
// seeded Monte Carlo rollouts that serve as an independent check.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lopt/rng.hpp"

namespace lopt {

/// Losses above this (or non-finite) mark a run as diverged.
inline constexpr double kDivergenceThreshold = 1e30;

template <typename Scalar>
bool is_diverged(Scalar value) {
  return !std::isfinite(static_cast<double>(value)) ||
         static_cast<double>(value) > kDivergenceThreshold;
}

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

namespace detail {

template <typename Derived>
bool is_symmetric(const Eigen::MatrixBase<Derived>& m, double rel_tol = 1e-12) {
  const double scale = std::max(1.0, static_cast<double>(m.cwiseAbs().maxCoeff()));
  return static_cast<double>((m - m.transpose()).cwiseAbs().maxCoeff()) <= rel_tol * scale;
}

// Square-root factor L with L L^T = m for a symmetric PSD matrix. Tiny
// negative eigenvalues from roundoff are clamped to zero.
template <typename Scalar>
MatrixX<Scalar> psd_factor(const MatrixX<Scalar>& m) {
  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> es(m);
  const VectorX<Scalar> roots = es.eigenvalues().cwiseMax(Scalar(0)).cwiseSqrt();
  return es.eigenvectors() * roots.asDiagonal();
}

template <typename Scalar>
void require_psd(const MatrixX<Scalar>& m, Eigen::Index n, const char* what) {
  if (m.rows() != n || m.cols() != n)
    throw std::invalid_argument(std::string(what) + ": dimension mismatch");
  if (!is_symmetric(m)) throw std::invalid_argument(std::string(what) + " is not symmetric");
  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> es(m, Eigen::EigenvaluesOnly);
  const double scale = std::max(1.0, static_cast<double>(m.cwiseAbs().maxCoeff()));
  if (static_cast<double>(es.eigenvalues().minCoeff()) < -1e-12 * scale)
    throw std::invalid_argument(std::string(what) + " is not positive semidefinite");
}

}  // namespace detail

/// The noisy quadratic instance: loss 0.5 (phi - xi)^T H (phi - xi) with
/// xi ~ N(0, noise_cov) and phi_0 ~ N(init_mean, init_cov).
template <typename Scalar = double>
class QuadraticTask {
 public:
  using Matrix = MatrixX<Scalar>;
  using Vector = VectorX<Scalar>;

  QuadraticTask(Matrix hessian, Matrix noise_cov)
      : QuadraticTask(hessian, noise_cov, Vector::Zero(hessian.rows()),
                      Matrix::Identity(hessian.rows(), hessian.cols()) * Scalar(10)) {}

  QuadraticTask(Matrix hessian, Matrix noise_cov, Vector init_mean, Matrix init_cov)
      : hessian_(std::move(hessian)),
        noise_cov_(std::move(noise_cov)),
        init_mean_(std::move(init_mean)),
        init_cov_(std::move(init_cov)) {
    const Eigen::Index n = hessian_.rows();
    if (n <= 0 || hessian_.cols() != n)
      throw std::invalid_argument("QuadraticTask: hessian must be square and non-empty");
    if (!detail::is_symmetric(hessian_))
      throw std::invalid_argument("QuadraticTask: hessian is not symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> es(hessian_);
    if (!(es.eigenvalues().minCoeff() > Scalar(0)))
      throw std::invalid_argument("QuadraticTask: hessian is not positive definite");
    hessian_eigenvalues_ = es.eigenvalues();
    hessian_eigenvectors_ = es.eigenvectors();
    detail::require_psd(noise_cov_, n, "QuadraticTask: noise covariance");
    detail::require_psd(init_cov_, n, "QuadraticTask: initial covariance");
    if (init_mean_.size() != n)
      throw std::invalid_argument("QuadraticTask: init_mean dimension mismatch");
    noise_factor_ = detail::psd_factor(noise_cov_);
    init_factor_ = detail::psd_factor(init_cov_);
  }

  Eigen::Index dim() const { return hessian_.rows(); }
  const Matrix& hessian() const { return hessian_; }
  const Matrix& noise_cov() const { return noise_cov_; }
  const Vector& init_mean() const { return init_mean_; }
  const Matrix& init_cov() const { return init_cov_; }

  /// Ascending eigenvalues of H.
  const Vector& hessian_eigenvalues() const { return hessian_eigenvalues_; }
  const Matrix& hessian_eigenvectors() const { return hessian_eigenvectors_; }
  Scalar lambda_max() const { return hessian_eigenvalues_(dim() - 1); }
  Scalar lambda_min() const { return hessian_eigenvalues_(0); }

  /// Factors with F F^T = covariance, used for sampling.
  const Matrix& noise_factor() const { return noise_factor_; }
  const Matrix& init_factor() const { return init_factor_; }

  /// Returns a copy with a different noise covariance (same H and init).
  QuadraticTask with_noise(Matrix noise_cov) const {
    return QuadraticTask(hessian_, std::move(noise_cov), init_mean_, init_cov_);
  }

 private:
  Matrix hessian_;
  Matrix noise_cov_;
  Vector init_mean_;
  Matrix init_cov_;
  Vector hessian_eigenvalues_;
  Matrix hessian_eigenvectors_;
  Matrix noise_factor_;
  Matrix init_factor_;
};

/// The quadratic used throughout the desk-scale experiments.
template <typename Scalar = double>
MatrixX<Scalar> reference_hessian() {
  MatrixX<Scalar> h(2, 2);
  h << Scalar(1.11), Scalar(0.596), Scalar(0.596), Scalar(0.486);
  return h;
}

/// N(0, I) noise, N(0, 10 I) initial state.
template <typename Scalar = double>
QuadraticTask<Scalar> reference_task() {
  return QuadraticTask<Scalar>(reference_hessian<Scalar>(), MatrixX<Scalar>::Identity(2, 2));
}

/// A linear optimizer: step size alpha on the raw gradient plus a learned
/// dense preconditioner P, optionally followed by the H^{-1/2} output
/// preconditioner.
template <typename Scalar = double>
struct LinearOptimizerSpec {
  Scalar alpha{0};
  MatrixX<Scalar> precond;
  bool preconditioned{false};

  static LinearOptimizerSpec nominal(Scalar alpha, Eigen::Index n) {
    return {alpha, MatrixX<Scalar>::Zero(n, n), false};
  }
};

template <typename Scalar = double>
struct DynamicsMatrix {
  MatrixX<Scalar> a;
  MatrixX<Scalar> noise_gain;
};

template <typename Scalar = double>
struct Trajectory {
  std::vector<VectorX<Scalar>> states;  // phi_0 .. phi_T
  std::vector<Scalar> per_step_loss;    // l(phi_1) .. l(phi_T)
  std::uint64_t seed{0};
  bool diverged{false};

  Eigen::Index horizon() const { return static_cast<Eigen::Index>(per_step_loss.size()); }

  Scalar mean_loss() const {
    Scalar s(0);
    for (Scalar l : per_step_loss) s += l;
    return s / static_cast<Scalar>(per_step_loss.size());
  }
};

/// Symmetric H^{-1/2} by eigendecomposition. Eigenvalues below 1e-12 are an error.
template <typename Scalar>
MatrixX<Scalar> inverse_sqrt_spd(const MatrixX<Scalar>& h) {
  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> es(h);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("inverse_sqrt_spd: eigendecomposition failed");
  if (!(es.eigenvalues().minCoeff() > Scalar(1e-12)))
    throw std::invalid_argument("inverse_sqrt_spd: matrix is not positive definite");
  const VectorX<Scalar> inv_roots = es.eigenvalues().cwiseSqrt().cwiseInverse();
  return es.eigenvectors() * inv_roots.asDiagonal() * es.eigenvectors().transpose();
}

/// The gain M in phi <- phi - M grad.
template <typename Scalar>
MatrixX<Scalar> update_gain(const QuadraticTask<Scalar>& task,
                            const LinearOptimizerSpec<Scalar>& spec) {
  const Eigen::Index n = task.dim();
  if (spec.precond.rows() != n || spec.precond.cols() != n)
    throw std::invalid_argument("LinearOptimizerSpec: precond dimension mismatch");
  if (!(spec.alpha >= Scalar(0)))
    throw std::invalid_argument("LinearOptimizerSpec: alpha must be nonnegative");
  MatrixX<Scalar> gain = spec.precond;
  gain.diagonal().array() += spec.alpha;
  if (spec.preconditioned) return inverse_sqrt_spd(task.hessian()) * gain;
  return gain;
}

/// a = I - M H and noise_gain = M H, so that
/// phi_{t+1} = a phi_t + noise_gain xi_t.
template <typename Scalar>
DynamicsMatrix<Scalar> build_dynamics(const QuadraticTask<Scalar>& task,
                                      const LinearOptimizerSpec<Scalar>& spec) {
  const Eigen::Index n = task.dim();
  DynamicsMatrix<Scalar> d;
  d.noise_gain = update_gain(task, spec) * task.hessian();
  d.a = MatrixX<Scalar>::Identity(n, n) - d.noise_gain;
  return d;
}

/// Sigma_t via Sigma_t = A Sigma_{t-1} A^T + (I-A) Sigma_xi (I-A)^T, Sigma_0 = 0.
template <typename Scalar>
MatrixX<Scalar> state_covariance(const DynamicsMatrix<Scalar>& dyn,
                                 const MatrixX<Scalar>& noise_cov, int t) {
  if (t < 1) throw std::invalid_argument("state_covariance: t must be >= 1");
  const MatrixX<Scalar> injected = dyn.noise_gain * noise_cov * dyn.noise_gain.transpose();
  MatrixX<Scalar> sigma = MatrixX<Scalar>::Zero(dyn.a.rows(), dyn.a.cols());
  for (int k = 0; k < t; ++k) {
    sigma = dyn.a * sigma * dyn.a.transpose() + injected;
    sigma = Scalar(0.5) * (sigma + sigma.transpose()).eval();
  }
  return sigma;
}

template <typename Scalar>
MatrixX<Scalar> state_covariance(const QuadraticTask<Scalar>& task,
                                 const LinearOptimizerSpec<Scalar>& spec, int t) {
  return state_covariance(build_dynamics(task, spec), task.noise_cov(), t);
}

namespace detail {

// (1/T) sum_t [mu^T (A^t)^T H A^t mu + tr((A^t)^T H A^t S0) + tr(H (Sigma_t + Sigma_xi))].
// With S0 = 0 this is the fixed-start expected loss.
template <typename Scalar>
Scalar expected_loss_impl(const QuadraticTask<Scalar>& task, const DynamicsMatrix<Scalar>& dyn,
                          int horizon, const VectorX<Scalar>& mu, const MatrixX<Scalar>* s0) {
  if (horizon < 1) throw std::invalid_argument("expected_loss: horizon must be >= 1");
  const MatrixX<Scalar>& h = task.hessian();
  const MatrixX<Scalar> injected =
      dyn.noise_gain * task.noise_cov() * dyn.noise_gain.transpose();
  const Scalar noise_floor = (h * task.noise_cov()).trace();
  MatrixX<Scalar> sigma = MatrixX<Scalar>::Zero(task.dim(), task.dim());
  VectorX<Scalar> mean = mu;
  // Second moment of the deterministic part when phi_0 is random: A^t S0 (A^t)^T.
  MatrixX<Scalar> spread;
  if (s0 != nullptr) spread = *s0;
  Scalar total(0);
  for (int t = 1; t <= horizon; ++t) {
    sigma = dyn.a * sigma * dyn.a.transpose() + injected;
    sigma = Scalar(0.5) * (sigma + sigma.transpose()).eval();
    mean = dyn.a * mean;
    Scalar term = mean.dot(h * mean) + (h * sigma).trace() + noise_floor;
    if (s0 != nullptr) {
      spread = dyn.a * spread * dyn.a.transpose();
      term += (h * spread).trace();
    }
    total += term;
    if (is_diverged(total)) return std::numeric_limits<Scalar>::infinity();
  }
  return total / static_cast<Scalar>(horizon);
}

}  // namespace detail

/// Closed-form expected loss from a fixed start phi0:
/// (1/T) sum_{t=1}^T [phi0^T (A^t)^T H A^t phi0 + tr(H (Sigma_t + Sigma_xi))].
/// This is the expectation of the mean of (phi_t - xi_t)^T H (phi_t - xi_t),
/// i.e. twice the mean per-step loss of a rollout. Returns +inf when the
/// dynamics diverge.
template <typename Scalar>
Scalar expected_loss(const QuadraticTask<Scalar>& task, const LinearOptimizerSpec<Scalar>& spec,
                     int horizon, const VectorX<Scalar>& phi0) {
  if (phi0.size() != task.dim()) throw std::invalid_argument("expected_loss: phi0 dimension");
  return detail::expected_loss_impl(task, build_dynamics(task, spec), horizon, phi0,
                                    static_cast<const MatrixX<Scalar>*>(nullptr));
}

/// Same, averaged over phi_0 ~ N(init_mean, init_cov).
template <typename Scalar>
Scalar expected_loss(const QuadraticTask<Scalar>& task, const LinearOptimizerSpec<Scalar>& spec,
                     int horizon) {
  return detail::expected_loss_impl(task, build_dynamics(task, spec), horizon, task.init_mean(),
                                    &task.init_cov());
}

namespace rng_stream {
inline constexpr std::uint64_t kInitState = 0;
inline constexpr std::uint64_t kMinimum = 1;
}  // namespace rng_stream

/// Pre-drawn randomness of one rollout: phi_0 and xi_0 .. xi_T.
template <typename Scalar>
struct RolloutNoise {
  VectorX<Scalar> phi0;
  MatrixX<Scalar> minima;  // dim x (T + 1), column t holds xi_t
};

template <typename Scalar>
RolloutNoise<Scalar> draw_rollout_noise(const QuadraticTask<Scalar>& task, int horizon,
                                        std::uint64_t seed) {
  const Eigen::Index n = task.dim();
  RolloutNoise<Scalar> noise;
  CounterRng init_rng(seed, rng_stream::kInitState);
  noise.phi0 = task.init_mean() + task.init_factor() * init_rng.normal_vector<Scalar>(n);
  noise.minima.resize(n, horizon + 1);
  for (int t = 0; t <= horizon; ++t) {
    CounterRng rng(seed, rng_stream::kMinimum, static_cast<std::uint64_t>(t) * 2 * n);
    noise.minima.col(t) = task.noise_factor() * rng.normal_vector<Scalar>(n);
  }
  return noise;
}

/// Realized mean of (phi_t - xi_t)^T H (phi_t - xi_t) over t = 1..T for a
/// given gain and pre-drawn noise; the sample analogue of expected_loss.
template <typename Scalar>
Scalar realized_meta_loss(const MatrixX<Scalar>& hessian, const MatrixX<Scalar>& gain,
                          const RolloutNoise<Scalar>& noise) {
  const Eigen::Index horizon = noise.minima.cols() - 1;
  const MatrixX<Scalar> gh = gain * hessian;
  VectorX<Scalar> phi = noise.phi0;
  VectorX<Scalar> r(phi.size());
  Scalar total(0);
  for (Eigen::Index t = 0; t < horizon; ++t) {
    r.noalias() = phi - noise.minima.col(t);
    phi.noalias() -= gh * r;
    r.noalias() = phi - noise.minima.col(t + 1);
    total += r.dot(hessian * r);
  }
  if (is_diverged(total)) return std::numeric_limits<Scalar>::infinity();
  return total / static_cast<Scalar>(horizon);
}

/// Seeded Monte Carlo rollout. phi_0 and each xi_t come from independent
/// counter-based streams keyed by (seed, stream, t).
template <typename Scalar>
Trajectory<Scalar> rollout_mc(const QuadraticTask<Scalar>& task,
                              const LinearOptimizerSpec<Scalar>& spec, int horizon,
                              std::uint64_t seed) {
  if (horizon < 1) throw std::invalid_argument("rollout_mc: horizon must be >= 1");
  const MatrixX<Scalar> gain = update_gain(task, spec);
  const MatrixX<Scalar>& h = task.hessian();
  const RolloutNoise<Scalar> noise = draw_rollout_noise(task, horizon, seed);

  Trajectory<Scalar> traj;
  traj.seed = seed;
  traj.states.reserve(static_cast<std::size_t>(horizon) + 1);
  traj.per_step_loss.reserve(static_cast<std::size_t>(horizon));
  traj.states.push_back(noise.phi0);
  VectorX<Scalar> phi = noise.phi0;
  for (int t = 0; t < horizon; ++t) {
    const VectorX<Scalar> grad = h * (phi - noise.minima.col(t));
    phi -= gain * grad;
    traj.states.push_back(phi);
    const VectorX<Scalar> r = phi - noise.minima.col(t + 1);
    const Scalar loss = Scalar(0.5) * r.dot(h * r);
    if (is_diverged(loss)) traj.diverged = true;
    traj.per_step_loss.push_back(loss);
  }
  return traj;
}

template <typename Scalar>
struct MetaGradient {
  Scalar d_alpha{0};
  MatrixX<Scalar> d_precond;
};

inline constexpr double kDefaultFiniteDifferenceStep = 1e-5;

namespace detail {

template <typename Scalar, typename LossFn>
MetaGradient<Scalar> central_differences(const LinearOptimizerSpec<Scalar>& spec, Scalar step,
                                         LossFn&& loss) {
  auto probe = [&](const LinearOptimizerSpec<Scalar>& s) {
    const Scalar value = loss(s);
    if (is_diverged(value))
      throw std::domain_error("meta_gradient_fd: loss is not finite at a probe point");
    return value;
  };
  probe(spec);
  MetaGradient<Scalar> g;
  {
    LinearOptimizerSpec<Scalar> plus = spec, minus = spec;
    plus.alpha += step;
    minus.alpha -= step;
    // alpha enters only through alpha I + P, so a negative probe is harmless.
    auto raw = [&](LinearOptimizerSpec<Scalar> s) {
      s.precond.diagonal().array() += s.alpha;
      s.alpha = Scalar(0);
      return probe(s);
    };
    g.d_alpha = (raw(plus) - raw(minus)) / (Scalar(2) * step);
  }
  const Eigen::Index n = spec.precond.rows();
  g.d_precond.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      LinearOptimizerSpec<Scalar> plus = spec, minus = spec;
      plus.precond(i, j) += step;
      minus.precond(i, j) -= step;
      g.d_precond(i, j) = (probe(plus) - probe(minus)) / (Scalar(2) * step);
    }
  }
  return g;
}

}  // namespace detail

/// Central finite differences of expected_loss (fixed phi0) in alpha and in
/// every entry of P.
template <typename Scalar>
MetaGradient<Scalar> meta_gradient_fd(const QuadraticTask<Scalar>& task,
                                      const LinearOptimizerSpec<Scalar>& spec, int horizon,
                                      const VectorX<Scalar>& phi0,
                                      Scalar step = Scalar(kDefaultFiniteDifferenceStep)) {
  return detail::central_differences(spec, step, [&](const LinearOptimizerSpec<Scalar>& s) {
    return expected_loss(task, s, horizon, phi0);
  });
}

/// Same, for the loss averaged over the initial-state distribution.
template <typename Scalar>
MetaGradient<Scalar> meta_gradient_fd(const QuadraticTask<Scalar>& task,
                                      const LinearOptimizerSpec<Scalar>& spec, int horizon,
                                      Scalar step = Scalar(kDefaultFiniteDifferenceStep)) {
  return detail::central_differences(spec, step, [&](const LinearOptimizerSpec<Scalar>& s) {
    return expected_loss(task, s, horizon);
  });
}

struct GradientVarianceEstimate {
  double trace_variance{0};
  double standard_error{0};  // of trace_variance
  double divergence_fraction{0};
  int n_used{0};
  int n_diverged{0};
};

/// Per-seed meta-gradient of the realized loss with respect to P, by central
/// differences under common random numbers. Returns false if any probe diverged.
template <typename Scalar>
bool realized_gradient_fd(const QuadraticTask<Scalar>& task,
                          const LinearOptimizerSpec<Scalar>& spec,
                          const RolloutNoise<Scalar>& noise, Scalar step,
                          VectorX<Scalar>& out) {
  const Eigen::Index n = task.dim();
  const MatrixX<Scalar> base = update_gain(task, spec);
  const MatrixX<Scalar> pre = spec.preconditioned ? inverse_sqrt_spd(task.hessian())
                                                  : MatrixX<Scalar>::Identity(n, n);
  out.resize(n * n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      // Perturbing P(i, j) shifts the gain by +-step * pre.col(i) e_j^T.
      MatrixX<Scalar> plus = base, minus = base;
      plus.col(j) += step * pre.col(i);
      minus.col(j) -= step * pre.col(i);
      const Scalar lp = realized_meta_loss(task.hessian(), plus, noise);
      const Scalar lm = realized_meta_loss(task.hessian(), minus, noise);
      if (is_diverged(lp) || is_diverged(lm)) return false;
      out(i + j * n) = (lp - lm) / (Scalar(2) * step);
    }
  }
  return true;
}

/// Trace of the empirical covariance of per-seed realized meta-gradients
/// (with respect to P) over seeds 0..n_seeds-1 of the given stream. Seeds whose
/// rollouts diverge are excluded and counted.
template <typename Scalar>
GradientVarianceEstimate empirical_gradient_variance(
    const QuadraticTask<Scalar>& task, const LinearOptimizerSpec<Scalar>& spec, int horizon,
    int n_seeds, std::uint64_t base_seed = 0,
    Scalar step = Scalar(kDefaultFiniteDifferenceStep)) {
  if (n_seeds < 2) throw std::invalid_argument("empirical_gradient_variance: n_seeds must be >= 2");
  if (horizon < 1) throw std::invalid_argument("empirical_gradient_variance: horizon must be >= 1");
  std::vector<VectorX<Scalar>> grads;
  grads.reserve(static_cast<std::size_t>(n_seeds));
  GradientVarianceEstimate est;
  VectorX<Scalar> g;
  for (int s = 0; s < n_seeds; ++s) {
    const auto noise = draw_rollout_noise(task, horizon, derive_seed(base_seed, s));
    if (realized_gradient_fd(task, spec, noise, step, g)) {
      grads.push_back(g);
    } else {
      ++est.n_diverged;
    }
  }
  est.n_used = static_cast<int>(grads.size());
  est.divergence_fraction = static_cast<double>(est.n_diverged) / n_seeds;
  if (est.n_used < 2) {
    est.trace_variance = std::numeric_limits<double>::quiet_NaN();
    est.standard_error = std::numeric_limits<double>::quiet_NaN();
    return est;
  }
  VectorX<Scalar> mean = VectorX<Scalar>::Zero(grads.front().size());
  for (const auto& gi : grads) mean += gi;
  mean /= static_cast<Scalar>(grads.size());
  // tr(Sigma_hat) = mean_i ||g_i - g_bar||^2.
  double sum = 0, sum_sq = 0;
  for (const auto& gi : grads) {
    const double q = static_cast<double>((gi - mean).squaredNorm());
    sum += q;
    sum_sq += q * q;
  }
  const double n = static_cast<double>(grads.size());
  est.trace_variance = sum / n;
  const double var_q = std::max(0.0, (sum_sq - sum * sum / n) / (n - 1));
  est.standard_error = std::sqrt(var_q / n);
  return est;
}

}  // namespace lopt
