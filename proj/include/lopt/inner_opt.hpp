#pragma once

// Nominal optimizers and the EMA hidden state they share with the learned
// optimizer: multi-timescale momenta (AggMo), EMA second moments (Adam), and
// their combination.

#include <cstdint>
#include <vector>

#include <Eigen/Core>

namespace lopt {

enum class NominalCombination {
  // mean_gamma(m_hat_gamma) / (sqrt(v_hat) + eps), one shared second moment.
  kPreconditionedAggMo,
  // 0.5 * adam_direction + 0.5 * aggmo_direction (ablation).
  kAverage,
};

struct NominalConfig {
  std::vector<double> momentum_timescales{0.1, 0.5, 0.9, 0.99, 0.999};
  std::vector<double> second_moment_timescales{0.9, 0.99, 0.999};
  double adam_eps{1e-8};
  // Indices of the timescales playing Adam's beta1 / beta2 (0.9, 0.999 by default).
  std::size_t primary_momentum{2};
  std::size_t primary_second_moment{2};
  NominalCombination combination{NominalCombination::kPreconditionedAggMo};

  /// Throws std::invalid_argument if a coefficient is outside [0, 1) or an
  /// index is out of range.
  void validate() const;
};

/// Per-parameter optimizer hidden state. Every EMA has its coefficient in
/// [0, 1), so bounded gradients give bounded state.
struct InnerState {
  std::vector<Eigen::ArrayXd> momenta;         // one per momentum timescale
  std::vector<Eigen::ArrayXd> second_moments;  // one per second-moment timescale
  std::int64_t step{0};

  static InnerState zeros(Eigen::Index n, const NominalConfig& cfg);
  Eigen::Index size() const { return momenta.empty() ? 0 : momenta.front().size(); }
  bool operator==(const InnerState& other) const;
};

/// momentum <- g m + (1 - g) grad and second_moment <- b v + (1 - b) grad^2
/// for every timescale; step + 1.
InnerState update_state(const InnerState& state, const Eigen::ArrayXd& grad,
                        const NominalConfig& cfg);

/// In-place variant used on hot paths.
void update_state_inplace(InnerState& state, const Eigen::ArrayXd& grad, const NominalConfig& cfg);

/// Bias-corrected m_hat / (sqrt(v_hat) + eps) on the primary timescales.
Eigen::ArrayXd adam_direction(const InnerState& state, const NominalConfig& cfg);

/// Mean of the raw per-timescale momenta.
Eigen::ArrayXd aggmo_direction(const InnerState& state, const NominalConfig& cfg);

/// The nominal descent direction g(z) used by the learned optimizer.
Eigen::ArrayXd nominal_direction(const InnerState& state, const NominalConfig& cfg);

/// Bias-corrected primary second moment, sqrt(v_hat).
Eigen::ArrayXd primary_rms(const InnerState& state, const NominalConfig& cfg);

/// Fixed scale constants of the learned update.
struct ScaleConstants {
  double beta1{1e-3};
  double beta2{1e-3};
  double beta3{1e-3};
  double beta4{1e-3};
};

/// Nominal term with a learned magnitude only: beta1 exp(beta2 m_g) g(z).
Eigen::ArrayXd hyperparam_controller_update(const InnerState& state, const NominalConfig& cfg,
                                            double magnitude_head_output,
                                            const ScaleConstants& scales = {});

}  // namespace lopt
