#include "lopt/star.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "lopt/rng.hpp"

namespace lopt {

Eigen::Index FeatureConfig::feature_count() const {
  const auto g = static_cast<Eigen::Index>(nominal.momentum_timescales.size());
  const auto b = static_cast<Eigen::Index>(nominal.second_moment_timescales.size());
  return 1 + g + b + g * b + 2 + static_cast<Eigen::Index>(step_timescales.size());
}

std::string FeatureConfig::fingerprint() const {
  std::ostringstream os;
  os.precision(17);
  os << "F=" << feature_count() << ";gamma=";
  for (double g : nominal.momentum_timescales) os << g << ',';
  os << ";beta=";
  for (double b : nominal.second_moment_timescales) os << b << ',';
  os << ";tau=";
  for (double t : step_timescales) os << t << ',';
  os << ";eps=" << feature_eps << ";floor=" << normalization_floor;
  return os.str();
}

TensorStats tensor_stats(const Eigen::Ref<const Eigen::ArrayXd>& params,
                         const Eigen::Ref<const Eigen::ArrayXd>& grad, Eigen::Index rows,
                         Eigen::Index cols) {
  const Eigen::Index n = rows * cols;
  if (params.size() != n || grad.size() != n)
    throw std::invalid_argument("tensor_stats: shape mismatch");
  TensorStats s;
  s.param_rms = Eigen::ArrayXd::Constant(n, std::sqrt(params.square().mean()));
  const double total = grad.square().mean();
  if (rows > 1 && cols > 1 && total > 0.0) {
    const Eigen::Map<const Eigen::ArrayXXd> g2_src(grad.data(), rows, cols);
    const Eigen::ArrayXXd g2 = g2_src.square();
    const Eigen::ArrayXd row_mean = g2.rowwise().mean();
    const Eigen::ArrayXd col_mean = g2.colwise().mean().transpose();
    s.grad_rms.resize(n);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i)
        s.grad_rms(i + j * rows) = std::sqrt(row_mean(i) * col_mean(j) / total);
  } else {
    s.grad_rms = Eigen::ArrayXd::Constant(n, std::sqrt(total));
  }
  return s;
}

Eigen::MatrixXd compute_raw_features(const InnerState& state,
                                     const Eigen::Ref<const Eigen::ArrayXd>& params,
                                     const Eigen::Ref<const Eigen::ArrayXd>& grad,
                                     const TensorStats& stats, const FeatureConfig& cfg) {
  const Eigen::Index n = params.size();
  if (grad.size() != n || state.size() != n || stats.grad_rms.size() != n ||
      stats.param_rms.size() != n)
    throw std::invalid_argument("compute_features: shape mismatch");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!std::isfinite(grad(i)))
      throw std::domain_error("compute_features: non-finite gradient at coordinate " +
                              std::to_string(i));
  }
  Eigen::MatrixXd f(n, cfg.feature_count());
  Eigen::Index c = 0;
  f.col(c++) = params.matrix();
  for (const auto& m : state.momenta) f.col(c++) = m.matrix();
  std::vector<Eigen::ArrayXd> inv_rms;
  inv_rms.reserve(state.second_moments.size());
  for (const auto& v : state.second_moments) {
    inv_rms.push_back((v.sqrt() + cfg.feature_eps).inverse());
    f.col(c++) = inv_rms.back().matrix();
  }
  for (const auto& m : state.momenta)
    for (const auto& r : inv_rms) f.col(c++) = (m * r).matrix();
  f.col(c++) = stats.grad_rms.matrix();
  f.col(c++) = stats.param_rms.matrix();
  const double t = static_cast<double>(state.step);
  for (double tau : cfg.step_timescales) f.col(c++).setConstant(std::tanh(t / tau));
  return f;
}

void normalize_features(Eigen::MatrixXd& features, const FeatureConfig& cfg) {
  const Eigen::Index normalized = cfg.step_feature_offset();
  const double n = static_cast<double>(features.rows());
  for (Eigen::Index c = 0; c < normalized; ++c) {
    const double rms = std::sqrt(features.col(c).squaredNorm() / n);
    features.col(c) /= std::max(rms, cfg.normalization_floor);
  }
}

Eigen::MatrixXd compute_features(const InnerState& state,
                                 const Eigen::Ref<const Eigen::ArrayXd>& params,
                                 const Eigen::Ref<const Eigen::ArrayXd>& grad,
                                 const TensorStats& stats, const FeatureConfig& cfg) {
  Eigen::MatrixXd f = compute_raw_features(state, params, grad, stats, cfg);
  normalize_features(f, cfg);
  return f;
}

StarParams StarParams::zeros(Eigen::Index inputs, Eigen::Index heads) {
  if (inputs < 1 || heads < 1 || heads > 3)
    throw std::invalid_argument("StarParams: need inputs >= 1 and 1..3 heads");
  StarParams p;
  p.w1 = Eigen::MatrixXd::Zero(inputs, kHidden);
  p.b1 = Eigen::RowVectorXd::Zero(kHidden);
  p.w2 = Eigen::MatrixXd::Zero(kHidden, kHidden);
  p.b2 = Eigen::RowVectorXd::Zero(kHidden);
  p.w3 = Eigen::MatrixXd::Zero(kHidden, heads);
  p.b3 = Eigen::RowVectorXd::Zero(heads);
  return p;
}

StarParams StarParams::initial(Eigen::Index inputs, Eigen::Index heads, std::uint64_t seed) {
  StarParams p = zeros(inputs, heads);
  CounterRng rng(seed, 0);
  auto fill = [&](Eigen::MatrixXd& w) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows()));
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = rng.uniform(-bound, bound);
  };
  fill(p.w1);
  fill(p.w2);
  return p;
}

Eigen::Index StarParams::parameter_count() const {
  return w1.size() + b1.size() + w2.size() + b2.size() + w3.size() + b3.size() +
         (learnable_gate ? 1 : 0);
}

Eigen::VectorXd StarParams::flatten() const {
  Eigen::VectorXd out(parameter_count());
  Eigen::Index o = 0;
  auto put = [&](const auto& m) {
    out.segment(o, m.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
    o += m.size();
  };
  put(w1);
  put(b1);
  put(w2);
  put(b2);
  put(w3);
  put(b3);
  if (learnable_gate) out(o++) = nominal_log_gate;
  return out;
}

void StarParams::assign(const Eigen::Ref<const Eigen::VectorXd>& flat) {
  if (flat.size() != parameter_count())
    throw std::invalid_argument("StarParams::assign: size mismatch");
  Eigen::Index o = 0;
  auto take = [&](auto& m) {
    Eigen::Map<Eigen::VectorXd>(m.data(), m.size()) = flat.segment(o, m.size());
    o += m.size();
  };
  take(w1);
  take(b1);
  take(w2);
  take(b2);
  take(w3);
  take(b3);
  if (learnable_gate) nominal_log_gate = flat(o++);
}

Eigen::VectorXd StarParams::decay_mask() const {
  Eigen::VectorXd mask = Eigen::VectorXd::Ones(parameter_count());
  if (learnable_gate) mask(mask.size() - 1) = 0.0;
  return mask;
}

Eigen::MatrixXd mlp_forward(const StarParams& p, const Eigen::MatrixXd& features) {
  if (features.cols() != p.inputs())
    throw std::invalid_argument("mlp_forward: feature dimension mismatch");
  Eigen::MatrixXd h1 = (features * p.w1).rowwise() + p.b1;
  h1 = h1.cwiseMax(0.0);
  Eigen::MatrixXd h2 = (h1 * p.w2).rowwise() + p.b2;
  h2 = h2.cwiseMax(0.0);
  return (h2 * p.w3).rowwise() + p.b3;
}

Heads mlp_forward(const StarParams& params, const Eigen::VectorXd& z) {
  if (params.heads() != 3) throw std::invalid_argument("mlp_forward: expected three heads");
  const Eigen::MatrixXd out = mlp_forward(params, Eigen::MatrixXd(z.transpose()));
  return {out(0, 0), out(0, 1), out(0, 2)};
}

Eigen::ArrayXd star_update(const StarParams& params, const Eigen::MatrixXd& features,
                           const InnerState& state, const NominalConfig& cfg,
                           const Eigen::ArrayXd& v) {
  if (params.heads() != 3) throw std::invalid_argument("star_update: expected three heads");
  const Eigen::MatrixXd heads = mlp_forward(params, features);
  if (!heads.allFinite()) throw std::domain_error("star_update: non-finite head output");
  const ScaleConstants& s = params.scales;
  const Eigen::ArrayXd d = heads.col(0).array();
  const Eigen::ArrayXd m_b = heads.col(1).array();
  const Eigen::ArrayXd m_g = heads.col(2).array();
  if (v.size() != features.rows() || !(v > 0.0).all())
    throw std::invalid_argument("star_update: preconditioner must be positive, one per coordinate");
  const double gate = params.learnable_gate ? std::exp(params.nominal_log_gate) : 1.0;
  return s.beta3 * (d / v) * (s.beta4 * m_b).exp() +
         gate * s.beta1 * (s.beta2 * m_g).exp() * nominal_direction(state, cfg);
}

Eigen::ArrayXd blackbox_update(const StarParams& params, const Eigen::MatrixXd& features) {
  if (params.heads() != 2) throw std::invalid_argument("blackbox_update: expected two heads");
  const Eigen::MatrixXd heads = mlp_forward(params, features);
  if (!heads.allFinite()) throw std::domain_error("blackbox_update: non-finite head output");
  return params.scales.beta1 * heads.col(0).array() *
         (params.scales.beta2 * heads.col(1).array()).exp();
}

namespace {

constexpr const char* kCheckpointFormat = "lopt-star-checkpoint-v1";

nlohmann::json array_entry(const char* name, const auto& m) {
  return {{"name", name},
          {"shape", {m.rows(), m.cols()}},
          {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

void read_array(const nlohmann::json& arrays, const char* name, auto& m) {
  for (const auto& a : arrays) {
    if (a.at("name").get<std::string>() != name) continue;
    const auto shape = a.at("shape").get<std::vector<Eigen::Index>>();
    const auto data = a.at("data").get<std::vector<double>>();
    if (shape.size() != 2 || shape[0] * shape[1] != static_cast<Eigen::Index>(data.size()))
      throw std::invalid_argument(std::string("checkpoint: malformed array ") + name);
    m.resize(shape[0], shape[1]);
    std::copy(data.begin(), data.end(), m.data());
    return;
  }
  throw std::invalid_argument(std::string("checkpoint: missing array ") + name);
}

}  // namespace

std::string to_checkpoint_json(const StarParams& p, const std::string& kind) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["kind"] = kind;
  j["feature_fingerprint"] = p.feature_fingerprint;
  j["parameter_count"] = p.parameter_count();
  j["scales"] = {{"beta1", p.scales.beta1},
                 {"beta2", p.scales.beta2},
                 {"beta3", p.scales.beta3},
                 {"beta4", p.scales.beta4}};
  j["learnable_gate"] = p.learnable_gate;
  j["nominal_log_gate"] = p.nominal_log_gate;
  j["arrays"] = nlohmann::json::array({array_entry("w1", p.w1), array_entry("b1", p.b1),
                                       array_entry("w2", p.w2), array_entry("b2", p.b2),
                                       array_entry("w3", p.w3), array_entry("b3", p.b3)});
  return j.dump(1);
}

StarParams from_checkpoint_json(const std::string& text, const std::string& expected_fingerprint,
                                std::string* kind) {
  const nlohmann::json j = nlohmann::json::parse(text);
  if (j.at("format").get<std::string>() != kCheckpointFormat)
    throw std::invalid_argument("checkpoint: unknown format");
  StarParams p;
  p.feature_fingerprint = j.at("feature_fingerprint").get<std::string>();
  if (p.feature_fingerprint != expected_fingerprint)
    throw std::invalid_argument("checkpoint: feature fingerprint mismatch (checkpoint '" +
                                p.feature_fingerprint + "', expected '" + expected_fingerprint +
                                "')");
  const auto& s = j.at("scales");
  p.scales = {s.at("beta1").get<double>(), s.at("beta2").get<double>(),
              s.at("beta3").get<double>(), s.at("beta4").get<double>()};
  p.learnable_gate = j.at("learnable_gate").get<bool>();
  p.nominal_log_gate = j.at("nominal_log_gate").get<double>();
  const auto& arrays = j.at("arrays");
  read_array(arrays, "w1", p.w1);
  read_array(arrays, "b1", p.b1);
  read_array(arrays, "w2", p.w2);
  read_array(arrays, "b2", p.b2);
  read_array(arrays, "w3", p.w3);
  read_array(arrays, "b3", p.b3);
  if (p.w1.cols() != StarParams::kHidden || p.w2.rows() != StarParams::kHidden ||
      p.w2.cols() != StarParams::kHidden || p.w3.rows() != StarParams::kHidden ||
      p.b3.size() != p.w3.cols())
    throw std::invalid_argument("checkpoint: inconsistent layer shapes");
  if (kind != nullptr) *kind = j.at("kind").get<std::string>();
  return p;
}

}  // namespace lopt
