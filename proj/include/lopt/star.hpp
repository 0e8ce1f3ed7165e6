#pragma once

// The STAR learned optimizer: per-coordinate features, a tiny MLP (two
// hidden layers of width four) with up to three linear heads, and the update
//   dphi = beta3 (d / v) exp(beta4 m_b) + beta1 exp(beta2 m_g) g(z)
// where g is the nominal direction and v the inverse-RMS preconditioner.
// The MLP is applied elementwise; coordinates interact only through
// tensor-level features.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lopt/inner_opt.hpp"

namespace lopt {

struct FeatureConfig {
  NominalConfig nominal;
  double feature_eps{1e-8};
  double normalization_floor{1e-8};
  std::vector<double> step_timescales{1, 3, 10, 30, 100, 300, 1e3, 3e3, 1e4, 3e4, 1e5};

  Eigen::Index feature_count() const;
  Eigen::Index step_feature_offset() const { return feature_count() - static_cast<Eigen::Index>(step_timescales.size()); }
  /// Stable textual description of the feature layout, embedded in checkpoints.
  std::string fingerprint() const;
};

/// Tensor-level inputs broadcast per coordinate: an adafactor-style factored
/// gradient RMS (plain tensor RMS for vectors) and the parameter RMS.
struct TensorStats {
  Eigen::ArrayXd grad_rms;
  Eigen::ArrayXd param_rms;
};

/// Stats for one tensor stored column-major as rows x cols.
TensorStats tensor_stats(const Eigen::Ref<const Eigen::ArrayXd>& params,
                         const Eigen::Ref<const Eigen::ArrayXd>& grad, Eigen::Index rows,
                         Eigen::Index cols);

/// Un-normalized features, one row per coordinate:
///   [param | momenta | 1/(sqrt(v_b)+eps) | m_g/(sqrt(v_b)+eps) | grad_rms, param_rms | tanh(t/tau)]
/// `state` must already include this step's gradient.
Eigen::MatrixXd compute_raw_features(const InnerState& state,
                                     const Eigen::Ref<const Eigen::ArrayXd>& params,
                                     const Eigen::Ref<const Eigen::ArrayXd>& grad,
                                     const TensorStats& stats, const FeatureConfig& cfg);

/// Divides every non-step column by its RMS over the tensor (floored).
void normalize_features(Eigen::MatrixXd& features, const FeatureConfig& cfg);

/// compute_raw_features followed by normalize_features. Throws
/// std::domain_error naming the first coordinate with a non-finite gradient.
Eigen::MatrixXd compute_features(const InnerState& state,
                                 const Eigen::Ref<const Eigen::ArrayXd>& params,
                                 const Eigen::Ref<const Eigen::ArrayXd>& grad,
                                 const TensorStats& stats, const FeatureConfig& cfg);

/// Head order: 3 heads = (d, m_b, m_g); 2 heads = (d, m); 1 head = (m_g).
struct StarParams {
  static constexpr Eigen::Index kHidden = 4;

  Eigen::MatrixXd w1;  // inputs x 4
  Eigen::RowVectorXd b1;
  Eigen::MatrixXd w2;  // 4 x 4
  Eigen::RowVectorXd b2;
  Eigen::MatrixXd w3;  // 4 x heads
  Eigen::RowVectorXd b3;
  ScaleConstants scales;
  bool learnable_gate{false};
  double nominal_log_gate{0};  // multiplies the nominal term by exp(gate) when learnable
  std::string feature_fingerprint;

  static StarParams zeros(Eigen::Index inputs, Eigen::Index heads);
  /// Trunk ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from `seed`; head layer zero.
  static StarParams initial(Eigen::Index inputs, Eigen::Index heads, std::uint64_t seed);

  Eigen::Index inputs() const { return w1.rows(); }
  Eigen::Index heads() const { return w3.cols(); }
  /// (inputs + 1) * 4 + 5 * 4 + 5 * heads, plus one for a learnable gate.
  Eigen::Index parameter_count() const;

  Eigen::VectorXd flatten() const;
  void assign(const Eigen::Ref<const Eigen::VectorXd>& flat);
  /// 1 for MLP weights (subject to meta weight decay), 0 for the gate.
  Eigen::VectorXd decay_mask() const;
};

/// Head outputs for a batch of coordinates: one row per coordinate, one column per head.
Eigen::MatrixXd mlp_forward(const StarParams& params, const Eigen::MatrixXd& features);

struct Heads {
  double d{0};
  double m_b{0};
  double m_g{0};
};

/// Single-coordinate forward for a three-head network.
Heads mlp_forward(const StarParams& params, const Eigen::VectorXd& z);

/// dphi = beta3 (d / v) exp(beta4 m_b) + beta1 exp(beta2 m_g) g. Applied as
/// phi <- phi - dphi. `v` is per coordinate and must be positive.
Eigen::ArrayXd star_update(const StarParams& params, const Eigen::MatrixXd& features,
                           const InnerState& state, const NominalConfig& cfg,
                           const Eigen::ArrayXd& v);

/// The two-head blackbox update beta1 d exp(beta2 m).
Eigen::ArrayXd blackbox_update(const StarParams& params_2head, const Eigen::MatrixXd& features);

/// Flat named-array JSON checkpoint.
std::string to_checkpoint_json(const StarParams& params, const std::string& kind);
StarParams from_checkpoint_json(const std::string& text, const std::string& expected_fingerprint,
                                std::string* kind = nullptr);

}  // namespace lopt
