#pragma once

// Spectral stability certificates for the linear dynamics induced by a
// learned preconditioner P on top of a nominal step alpha:
//   nominal         A = I - (alpha I + P) H
//   preconditioned  A = I - H^{-1/2} (alpha I + P) H
//   robust          A = I - alpha H - Delta P~ H, for every Delta in the box D
// Each certificate evaluates sufficient eigenvalue bounds on P and reports the
// brute-force spectral radius alongside for comparison.

#include <algorithm>
#include <complex>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "lopt/nqm.hpp"

namespace lopt {

/// Absolute tolerance on eigenvalue comparisons.
inline constexpr double kEigenTolerance = 1e-9;

enum class CertificateVerdict { kCertifiedStable, kNotCertified };
enum class BruteForceVerdict { kStable, kMarginal, kUnstable };

inline const char* to_string(CertificateVerdict v) {
  return v == CertificateVerdict::kCertifiedStable ? "certified-stable" : "not-certified";
}

inline const char* to_string(BruteForceVerdict v) {
  switch (v) {
    case BruteForceVerdict::kStable: return "stable";
    case BruteForceVerdict::kMarginal: return "marginal";
    case BruteForceVerdict::kUnstable: return "unstable";
  }
  return "unstable";
}

struct BoundCheck {
  std::string name;
  double lhs{0};
  double rhs{0};
  bool satisfied{false};  // lhs <= rhs (+ tolerance)

  bool operator==(const BoundCheck&) const = default;
};

struct StabilityReport {
  std::string certificate;  // "nominal", "preconditioned" or "robust"
  std::vector<std::complex<double>> eigenvalues;
  double spectral_radius{0};
  std::vector<BoundCheck> bound_checks;
  CertificateVerdict certificate_verdict{CertificateVerdict::kNotCertified};
  BruteForceVerdict brute_force_verdict{BruteForceVerdict::kUnstable};
  // Named scalars useful for plotting and auditing (bounds, lambda_max(H), ...).
  std::vector<std::pair<std::string, double>> quantities;
  std::vector<std::string> notes;

  bool certified() const { return certificate_verdict == CertificateVerdict::kCertifiedStable; }
  bool operator==(const StabilityReport&) const = default;
};

/// Thrown when a certificate's hypotheses on P fail. Carries a report whose
/// eigenvalues and spectral radius are still valid.
class CertificateHypothesisError : public std::domain_error {
 public:
  CertificateHypothesisError(const std::string& what, StabilityReport report)
      : std::domain_error(what), report_(std::move(report)) {}
  const StabilityReport& report() const { return report_; }

 private:
  StabilityReport report_;
};

struct RobustBoundSpec {
  Eigen::VectorXd d_bar;

  double max_bound() const { return d_bar.maxCoeff(); }
};

/// All (possibly complex) eigenvalues of a real square matrix via Hessenberg
/// reduction and shifted QR.
template <typename Derived>
std::vector<std::complex<double>> eigenvalues(const Eigen::MatrixBase<Derived>& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("eigenvalues: matrix must be square");
  const Eigen::MatrixXd m = a.template cast<double>();
  if (!m.allFinite()) throw std::invalid_argument("eigenvalues: non-finite entries");
  Eigen::EigenSolver<Eigen::MatrixXd> es(m, /*computeEigenvectors=*/false);
  if (es.info() != Eigen::Success) throw std::runtime_error("eigenvalues: QR did not converge");
  std::vector<std::complex<double>> out(es.eigenvalues().data(),
                                        es.eigenvalues().data() + es.eigenvalues().size());
  std::sort(out.begin(), out.end(), [](const auto& x, const auto& y) {
    if (std::abs(x) != std::abs(y)) return std::abs(x) > std::abs(y);
    if (x.real() != y.real()) return x.real() > y.real();
    return x.imag() > y.imag();
  });
  return out;
}

template <typename Derived>
double spectral_radius(const Eigen::MatrixBase<Derived>& a) {
  double rho = 0;
  for (const auto& l : eigenvalues(a)) rho = std::max(rho, std::abs(l));
  return rho;
}

inline BruteForceVerdict classify_radius(double rho) {
  if (rho < 1.0 - kEigenTolerance) return BruteForceVerdict::kStable;
  if (rho <= 1.0 + kEigenTolerance) return BruteForceVerdict::kMarginal;
  return BruteForceVerdict::kUnstable;
}

namespace detail {

struct RealSpectrum {
  double min{0};
  double max{0};
  bool ok{false};  // real eigenvalues and (assumed) diagonalizable
};

// Symmetric matrices take the self-adjoint path; otherwise eigenvalues must
// have imaginary parts below the tolerance.
template <typename Scalar>
RealSpectrum real_spectrum(const MatrixX<Scalar>& p) {
  const Eigen::MatrixXd m = p.template cast<double>();
  RealSpectrum s;
  if (is_symmetric(m)) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    s.min = es.eigenvalues().minCoeff();
    s.max = es.eigenvalues().maxCoeff();
    s.ok = true;
    return s;
  }
  const auto ev = eigenvalues(m);
  s.ok = std::all_of(ev.begin(), ev.end(),
                     [](const auto& l) { return std::abs(l.imag()) < kEigenTolerance; });
  s.min = ev.front().real();
  s.max = ev.front().real();
  for (const auto& l : ev) {
    s.min = std::min(s.min, l.real());
    s.max = std::max(s.max, l.real());
  }
  return s;
}

inline BoundCheck bound(std::string name, double lhs, double rhs) {
  return {std::move(name), lhs, rhs, lhs <= rhs + kEigenTolerance};
}

template <typename Scalar>
StabilityReport brute_force_report(std::string certificate, const MatrixX<Scalar>& a) {
  StabilityReport r;
  r.certificate = std::move(certificate);
  r.eigenvalues = eigenvalues(a);
  for (const auto& l : r.eigenvalues) r.spectral_radius = std::max(r.spectral_radius, std::abs(l));
  r.brute_force_verdict = classify_radius(r.spectral_radius);
  return r;
}

inline void finish(StabilityReport& r) {
  const bool all = std::all_of(r.bound_checks.begin(), r.bound_checks.end(),
                               [](const BoundCheck& b) { return b.satisfied; });
  r.certificate_verdict =
      all ? CertificateVerdict::kCertifiedStable : CertificateVerdict::kNotCertified;
}

}  // namespace detail

/// Nominal certificate: rho(A) <= 1 if -alpha <= lambda_min(P) and
/// lambda_max(P) <= 2 / lambda_max(H) - alpha. Requires P with real spectrum.
template <typename Scalar>
StabilityReport certify_nominal(const QuadraticTask<Scalar>& task,
                                const LinearOptimizerSpec<Scalar>& spec) {
  if (spec.preconditioned)
    throw std::invalid_argument("certify_nominal: spec is preconditioned; use certify_preconditioned");
  StabilityReport r = detail::brute_force_report("nominal", build_dynamics(task, spec).a);
  const auto p = detail::real_spectrum(spec.precond);
  if (!p.ok)
    throw CertificateHypothesisError("certify_nominal: P does not have a real spectrum", r);
  const double alpha = static_cast<double>(spec.alpha);
  const double lmax_h = static_cast<double>(task.lambda_max());
  r.bound_checks.push_back(detail::bound("lower: -alpha <= lambda_min(P)", -alpha, p.min));
  r.bound_checks.push_back(
      detail::bound("upper: lambda_max(P) <= 2/lambda_max(H) - alpha", p.max, 2.0 / lmax_h - alpha));
  r.quantities = {{"alpha", alpha},
                  {"lambda_min_P", p.min},
                  {"lambda_max_P", p.max},
                  {"lambda_max_H", lmax_h},
                  {"upper_bound", 2.0 / lmax_h - alpha}};
  detail::finish(r);
  return r;
}

/// Output-preconditioned certificate: same lower bound, upper bound
/// lambda_max(P) <= 2 / sqrt(lambda_max(H)) - alpha.
template <typename Scalar>
StabilityReport certify_preconditioned(const QuadraticTask<Scalar>& task,
                                       const LinearOptimizerSpec<Scalar>& spec) {
  if (!spec.preconditioned)
    throw std::invalid_argument("certify_preconditioned: spec is not preconditioned");
  StabilityReport r = detail::brute_force_report("preconditioned", build_dynamics(task, spec).a);
  const auto p = detail::real_spectrum(spec.precond);
  if (!p.ok)
    throw CertificateHypothesisError("certify_preconditioned: P does not have a real spectrum", r);
  const double alpha = static_cast<double>(spec.alpha);
  const double lmax_h = static_cast<double>(task.lambda_max());
  const double precond_upper = 2.0 / std::sqrt(lmax_h) - alpha;
  const double nominal_upper = 2.0 / lmax_h - alpha;
  r.bound_checks.push_back(detail::bound("lower: -alpha <= lambda_min(P)", -alpha, p.min));
  r.bound_checks.push_back(detail::bound(
      "upper: lambda_max(P) <= 2/sqrt(lambda_max(H)) - alpha", p.max, precond_upper));
  const bool looser = lmax_h > 1.0;
  r.quantities = {{"alpha", alpha},
                  {"lambda_min_P", p.min},
                  {"lambda_max_P", p.max},
                  {"lambda_max_H", lmax_h},
                  {"upper_bound", precond_upper},
                  {"nominal_upper_bound", nominal_upper},
                  {"looser_than_nominal", looser ? 1.0 : 0.0}};
  r.notes.push_back(looser ? "upper bound is looser than the nominal bound (lambda_max(H) > 1)"
                           : "upper bound is tighter than the nominal bound (lambda_max(H) <= 1)");
  detail::finish(r);
  return r;
}

/// Robust certificate over D = {diag(d) : 0 < d_i <= d_bar_i}:
///   -alpha / max d_bar <= lambda_min(P~),
///   lambda_max(P~) <= (2 / lambda_max(H) - alpha) / max d_bar.
/// The bounds need P~ to be simultaneously diagonalizable with every Delta in
/// D, which for an arbitrary diagonal Delta means P~ itself is diagonal.
/// A symmetric non-diagonal P~ raises CertificateHypothesisError whose report
/// still carries the evaluated bounds. The brute-force radius in the
/// report is evaluated at the corner Delta = diag(d_bar).
template <typename Scalar>
StabilityReport certify_robust(const QuadraticTask<Scalar>& task,
                               const LinearOptimizerSpec<Scalar>& spec_tilde,
                               const RobustBoundSpec& robust) {
  const Eigen::Index n = task.dim();
  if (spec_tilde.preconditioned)
    throw std::invalid_argument("certify_robust: preconditioned specs are not supported");
  if (robust.d_bar.size() != n)
    throw std::invalid_argument("certify_robust: d_bar dimension mismatch");
  if (!(robust.d_bar.array() > 0.0).all())
    throw std::invalid_argument("certify_robust: d_bar entries must be positive");
  if (spec_tilde.precond.rows() != n || spec_tilde.precond.cols() != n)
    throw std::invalid_argument("certify_robust: precond dimension mismatch");
  const double alpha = static_cast<double>(spec_tilde.alpha);
  const double lmax_h = static_cast<double>(task.lambda_max());
  if (!(alpha > 0.0 && alpha < 2.0 / lmax_h))
    throw std::invalid_argument("certify_robust: alpha must lie in (0, 2/lambda_max(H))");

  const Eigen::MatrixXd p_tilde = spec_tilde.precond.template cast<double>();
  const Eigen::MatrixXd h = task.hessian().template cast<double>();
  Eigen::MatrixXd corner = Eigen::MatrixXd::Identity(n, n) - alpha * h -
                           robust.d_bar.asDiagonal() * p_tilde * h;
  StabilityReport r = detail::brute_force_report("robust", corner);

  if (!detail::is_symmetric(p_tilde))
    throw CertificateHypothesisError("certify_robust: P~ is not symmetric", r);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(p_tilde, Eigen::EigenvaluesOnly);
  const double d_max = robust.max_bound();
  const double lmin = es.eigenvalues().minCoeff();
  const double lmax = es.eigenvalues().maxCoeff();
  const double upper = (2.0 / lmax_h - alpha) / d_max;
  r.bound_checks.push_back(
      detail::bound("lower: -alpha/max(d_bar) <= lambda_min(P~)", -alpha / d_max, lmin));
  r.bound_checks.push_back(detail::bound(
      "upper: lambda_max(P~) <= (2/lambda_max(H) - alpha)/max(d_bar)", lmax, upper));
  r.quantities = {{"alpha", alpha},         {"lambda_min_P", lmin},  {"lambda_max_P", lmax},
                  {"lambda_max_H", lmax_h}, {"max_d_bar", d_max},    {"upper_bound", upper},
                  {"lower_bound", -alpha / d_max}};

  const double scale = std::max(1.0, p_tilde.cwiseAbs().maxCoeff());
  Eigen::MatrixXd off = p_tilde;
  off.diagonal().setZero();
  if (off.cwiseAbs().maxCoeff() > 1e-12 * scale) {
    r.certificate_verdict = CertificateVerdict::kNotCertified;
    r.notes.push_back("P~ is not diagonal; bounds evaluated but not certifying");
    throw CertificateHypothesisError(
        "certify_robust: P~ is not diagonal, so it is not simultaneously diagonalizable with "
        "every Delta in D",
        r);
  }
  detail::finish(r);
  return r;
}

/// Closed loop when a cancellation-style learned term P = P* - alpha I
/// suffers the multiplicative error Delta = (1 - epsilon) I:
///   A = I - alpha epsilon H - (1 - epsilon) P* H.
template <typename Scalar>
DynamicsMatrix<Scalar> cancellation_dynamics(const QuadraticTask<Scalar>& task,
                                             const MatrixX<Scalar>& p_star, Scalar alpha,
                                             Scalar epsilon) {
  const Eigen::Index n = task.dim();
  if (p_star.rows() != n || p_star.cols() != n)
    throw std::invalid_argument("cancellation_dynamics: P* dimension mismatch");
  if (!(epsilon >= Scalar(0) && epsilon <= Scalar(1)))
    throw std::invalid_argument("cancellation_dynamics: epsilon must lie in [0, 1]");
  DynamicsMatrix<Scalar> d;
  d.noise_gain = (alpha * epsilon) * task.hessian() + (Scalar(1) - epsilon) * p_star * task.hessian();
  d.a = MatrixX<Scalar>::Identity(n, n) - d.noise_gain;
  return d;
}

/// The direct parameterization under the same error: nominal term off,
/// P = (1 - epsilon) P*, giving A = I - (1 - epsilon) P* H.
template <typename Scalar>
DynamicsMatrix<Scalar> direct_dynamics(const QuadraticTask<Scalar>& task,
                                       const MatrixX<Scalar>& p_star, Scalar epsilon) {
  return cancellation_dynamics(task, p_star, Scalar(0), epsilon);
}

}  // namespace lopt
