#include "lopt/inner_opt.hpp"

#include <cmath>
#include <stdexcept>

namespace lopt {

namespace {

void check_coefficients(const std::vector<double>& cs, const char* what) {
  for (double c : cs) {
    if (!(c >= 0.0 && c < 1.0))
      throw std::invalid_argument(std::string("NominalConfig: ") + what + " must lie in [0, 1)");
  }
}

void require_started(const InnerState& state) {
  if (state.step < 1) throw std::invalid_argument("optimizer direction requires step >= 1");
}

double bias_correction(double coeff, std::int64_t step) {
  return 1.0 - std::pow(coeff, static_cast<double>(step));
}

}  // namespace

void NominalConfig::validate() const {
  if (momentum_timescales.empty())
    throw std::invalid_argument("NominalConfig: momentum timescales are empty");
  if (second_moment_timescales.empty())
    throw std::invalid_argument("NominalConfig: second-moment timescales are empty");
  check_coefficients(momentum_timescales, "momentum timescales");
  check_coefficients(second_moment_timescales, "second-moment timescales");
  if (primary_momentum >= momentum_timescales.size() ||
      primary_second_moment >= second_moment_timescales.size())
    throw std::invalid_argument("NominalConfig: primary timescale index out of range");
  if (!(adam_eps > 0.0)) throw std::invalid_argument("NominalConfig: adam_eps must be positive");
}

InnerState InnerState::zeros(Eigen::Index n, const NominalConfig& cfg) {
  InnerState s;
  s.momenta.assign(cfg.momentum_timescales.size(), Eigen::ArrayXd::Zero(n));
  s.second_moments.assign(cfg.second_moment_timescales.size(), Eigen::ArrayXd::Zero(n));
  return s;
}

bool InnerState::operator==(const InnerState& other) const {
  if (step != other.step || momenta.size() != other.momenta.size() ||
      second_moments.size() != other.second_moments.size())
    return false;
  for (std::size_t i = 0; i < momenta.size(); ++i)
    if (momenta[i].size() != other.momenta[i].size() || (momenta[i] != other.momenta[i]).any())
      return false;
  for (std::size_t i = 0; i < second_moments.size(); ++i)
    if (second_moments[i].size() != other.second_moments[i].size() ||
        (second_moments[i] != other.second_moments[i]).any())
      return false;
  return true;
}

void update_state_inplace(InnerState& state, const Eigen::ArrayXd& grad, const NominalConfig& cfg) {
  if (state.momenta.size() != cfg.momentum_timescales.size() ||
      state.second_moments.size() != cfg.second_moment_timescales.size())
    throw std::invalid_argument("update_state: state does not match config");
  for (std::size_t i = 0; i < state.momenta.size(); ++i) {
    if (state.momenta[i].size() != grad.size())
      throw std::invalid_argument("update_state: gradient shape mismatch");
    const double g = cfg.momentum_timescales[i];
    state.momenta[i] = g * state.momenta[i] + (1.0 - g) * grad;
  }
  for (std::size_t i = 0; i < state.second_moments.size(); ++i) {
    if (state.second_moments[i].size() != grad.size())
      throw std::invalid_argument("update_state: gradient shape mismatch");
    const double b = cfg.second_moment_timescales[i];
    state.second_moments[i] = b * state.second_moments[i] + (1.0 - b) * grad.square();
  }
  ++state.step;
}

InnerState update_state(const InnerState& state, const Eigen::ArrayXd& grad,
                        const NominalConfig& cfg) {
  InnerState next = state;
  update_state_inplace(next, grad, cfg);
  return next;
}

Eigen::ArrayXd primary_rms(const InnerState& state, const NominalConfig& cfg) {
  require_started(state);
  const double b = cfg.second_moment_timescales.at(cfg.primary_second_moment);
  return (state.second_moments.at(cfg.primary_second_moment) / bias_correction(b, state.step))
      .sqrt();
}

Eigen::ArrayXd adam_direction(const InnerState& state, const NominalConfig& cfg) {
  require_started(state);
  const double g = cfg.momentum_timescales.at(cfg.primary_momentum);
  const Eigen::ArrayXd m_hat =
      state.momenta.at(cfg.primary_momentum) / bias_correction(g, state.step);
  return m_hat / (primary_rms(state, cfg) + cfg.adam_eps);
}

Eigen::ArrayXd aggmo_direction(const InnerState& state, const NominalConfig& /*cfg*/) {
  require_started(state);
  if (state.momenta.empty()) throw std::invalid_argument("aggmo_direction: no momentum timescales");
  Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(state.size());
  for (const auto& m : state.momenta) sum += m;
  return sum / static_cast<double>(state.momenta.size());
}

Eigen::ArrayXd nominal_direction(const InnerState& state, const NominalConfig& cfg) {
  require_started(state);
  if (cfg.combination == NominalCombination::kAverage)
    return 0.5 * adam_direction(state, cfg) + 0.5 * aggmo_direction(state, cfg);
  if (state.momenta.empty())
    throw std::invalid_argument("nominal_direction: no momentum timescales");
  Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(state.size());
  for (std::size_t i = 0; i < state.momenta.size(); ++i)
    sum += state.momenta[i] / bias_correction(cfg.momentum_timescales[i], state.step);
  sum /= static_cast<double>(state.momenta.size());
  return sum / (primary_rms(state, cfg) + cfg.adam_eps);
}

Eigen::ArrayXd hyperparam_controller_update(const InnerState& state, const NominalConfig& cfg,
                                            double magnitude_head_output,
                                            const ScaleConstants& scales) {
  return scales.beta1 * std::exp(scales.beta2 * magnitude_head_output) *
         nominal_direction(state, cfg);
}

}  // namespace lopt
