#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "lopt/learned_optimizer.hpp"
#include "lopt/rng.hpp"
#include "lopt/star.hpp"

namespace lopt {
namespace {

Eigen::ArrayXd random_array(CounterRng& rng, Eigen::Index n, double scale = 1.0) {
  Eigen::ArrayXd a(n);
  for (Eigen::Index i = 0; i < n; ++i) a(i) = scale * rng.normal();
  return a;
}

void randomize(Eigen::MatrixXd& m, CounterRng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.5 * rng.normal();
}

void randomize(Eigen::RowVectorXd& m, CounterRng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = 0.5 * rng.normal();
}

StarParams random_params(Eigen::Index inputs, Eigen::Index heads, std::uint64_t seed) {
  CounterRng rng(seed, 3);
  StarParams p = StarParams::zeros(inputs, heads);
  randomize(p.w1, rng);
  randomize(p.b1, rng);
  randomize(p.w2, rng);
  randomize(p.b2, rng);
  randomize(p.w3, rng);
  randomize(p.b3, rng);
  return p;
}

struct Fixture {
  FeatureConfig cfg;
  InnerState state;
  Eigen::ArrayXd params;
  Eigen::ArrayXd grad;
  Eigen::MatrixXd features;
};

Fixture make_fixture(Eigen::Index n, int steps, std::uint64_t seed) {
  Fixture f;
  CounterRng rng(seed, 0);
  f.state = InnerState::zeros(n, f.cfg.nominal);
  for (int t = 0; t < steps; ++t) {
    f.grad = random_array(rng, n);
    update_state_inplace(f.state, f.grad, f.cfg.nominal);
  }
  f.params = random_array(rng, n);
  const TensorStats stats = tensor_stats(f.params, f.grad, n, 1);
  f.features = compute_features(f.state, f.params, f.grad, stats, f.cfg);
  return f;
}

// Straightforward loop version of the optimizer MLP.
std::vector<double> reference_forward(const StarParams& p, const Eigen::VectorXd& z) {
  const auto hidden = static_cast<std::size_t>(StarParams::kHidden);
  std::vector<double> h1(hidden), h2(hidden), out(static_cast<std::size_t>(p.heads()));
  for (std::size_t j = 0; j < hidden; ++j) {
    double s = p.b1(static_cast<Eigen::Index>(j));
    for (Eigen::Index i = 0; i < z.size(); ++i) s += z(i) * p.w1(i, static_cast<Eigen::Index>(j));
    h1[j] = s > 0 ? s : 0;
  }
  for (std::size_t j = 0; j < hidden; ++j) {
    double s = p.b2(static_cast<Eigen::Index>(j));
    for (std::size_t i = 0; i < hidden; ++i)
      s += h1[i] * p.w2(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    h2[j] = s > 0 ? s : 0;
  }
  for (std::size_t k = 0; k < out.size(); ++k) {
    double s = p.b3(static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < hidden; ++i)
      s += h2[i] * p.w3(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
    out[k] = s;
  }
  return out;
}

TEST(FeatureConfig, CountsAndParameterTotals) {
  FeatureConfig cfg;
  EXPECT_EQ(cfg.feature_count(), 1 + 5 + 3 + 15 + 2 + 11);
  const StarParams p = StarParams::zeros(cfg.feature_count(), 3);
  EXPECT_EQ(p.parameter_count(), (cfg.feature_count() + 1) * 4 + 5 * 4 + 5 * 3);
  EXPECT_EQ(StarParams::zeros(cfg.feature_count(), 2).parameter_count(), p.parameter_count() - 5);
  FeatureConfig other = cfg;
  other.nominal.momentum_timescales.pop_back();
  other.nominal.primary_momentum = 1;
  EXPECT_NE(cfg.fingerprint(), other.fingerprint());
}

TEST(Features, FreshStateAtZero) {
  FeatureConfig cfg;
  const InnerState s = InnerState::zeros(3, cfg.nominal);
  const Eigen::ArrayXd zero = Eigen::ArrayXd::Zero(3);
  const TensorStats stats = tensor_stats(zero, zero, 3, 1);
  const Eigen::MatrixXd f = compute_raw_features(s, zero, zero, stats, cfg);
  const Eigen::Index g = 5, b = 3;
  for (Eigen::Index c = 0; c < f.cols(); ++c) {
    const bool reciprocal = c >= 1 + g && c < 1 + g + b;
    const double expected = reciprocal ? 1.0 / cfg.feature_eps : 0.0;
    for (Eigen::Index i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(f(i, c), expected) << "column " << c;
  }
}

TEST(Features, StepEncodingAfterOneStep) {
  FeatureConfig cfg;
  InnerState s = InnerState::zeros(2, cfg.nominal);
  const Eigen::ArrayXd g = Eigen::Array2d(0.5, -1.0);
  update_state_inplace(s, g, cfg.nominal);
  const Eigen::MatrixXd f = compute_features(s, Eigen::Array2d(1, 2), g, tensor_stats(Eigen::Array2d(1, 2), g, 2, 1), cfg);
  const Eigen::Index off = cfg.step_feature_offset();
  EXPECT_NEAR(f(0, off), 0.761594, 1e-6);
  EXPECT_NEAR(f(1, off + 1), 0.321513, 1e-6);
  for (std::size_t k = 2; k < cfg.step_timescales.size(); ++k) {
    const double tau = cfg.step_timescales[k];
    EXPECT_DOUBLE_EQ(f(0, off + static_cast<Eigen::Index>(k)), std::tanh(1.0 / tau));
    EXPECT_NEAR(f(0, off + static_cast<Eigen::Index>(k)), 1.0 / tau, 1.0 / (3 * tau * tau * tau) + 1e-15);
  }
}

TEST(Features, NormalizedColumnsHaveUnitRms) {
  const Fixture f = make_fixture(50, 7, 21);
  const Eigen::Index off = f.cfg.step_feature_offset();
  for (Eigen::Index c = 0; c < off; ++c)
    EXPECT_NEAR(std::sqrt(f.features.col(c).squaredNorm() / 50.0), 1.0, 1e-12) << "column " << c;
  for (Eigen::Index c = off; c < f.features.cols(); ++c)
    EXPECT_DOUBLE_EQ(f.features(0, c), std::tanh(7.0 / f.cfg.step_timescales[static_cast<std::size_t>(c - off)]));
  EXPECT_TRUE(f.features.allFinite());
}

TEST(Features, PreconditionedMomentaAreScaleInvariant) {
  FeatureConfig cfg;
  cfg.feature_eps = 1e-12;
  CounterRng rng(40, 0);
  std::vector<Eigen::ArrayXd> grads;
  for (int t = 0; t < 12; ++t) grads.push_back(random_array(rng, 6));
  auto raw = [&](double c) {
    InnerState s = InnerState::zeros(6, cfg.nominal);
    for (const auto& g : grads) update_state_inplace(s, c * g, cfg.nominal);
    const Eigen::ArrayXd p = Eigen::ArrayXd::Ones(6);
    return compute_raw_features(s, p, c * grads.back(), tensor_stats(p, c * grads.back(), 6, 1), cfg);
  };
  const Eigen::MatrixXd base = raw(1.0);
  const Eigen::Index first = 1 + 5 + 3, count = 5 * 3;
  for (double c : {0.01, 100.0}) {
    const Eigen::MatrixXd scaled = raw(c);
    EXPECT_LT((scaled.middleCols(first, count) - base.middleCols(first, count)).cwiseAbs().maxCoeff(), 1e-6)
        << "c=" << c;
  }
}

TEST(Features, NonFiniteGradientNamesCoordinate) {
  FeatureConfig cfg;
  const InnerState s = InnerState::zeros(3, cfg.nominal);
  Eigen::ArrayXd g = Eigen::ArrayXd::Zero(3);
  g(2) = std::nan("");
  const Eigen::ArrayXd p = Eigen::ArrayXd::Zero(3);
  const TensorStats stats{Eigen::ArrayXd::Zero(3), Eigen::ArrayXd::Zero(3)};
  try {
    compute_raw_features(s, p, g, stats, cfg);
    FAIL();
  } catch (const std::domain_error& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 2"), std::string::npos);
  }
}

TEST(TensorStats, VectorUsesRmsAndMatrixIsExactForRankOne) {
  const Eigen::ArrayXd v = Eigen::Array3d(1.0, -2.0, 2.0);
  const TensorStats sv = tensor_stats(v, v, 3, 1);
  EXPECT_TRUE(sv.grad_rms.isApprox(Eigen::ArrayXd::Constant(3, std::sqrt(3.0)), 1e-15));
  // g_ij = r_i c_j makes g^2 rank one, which the factored estimate recovers.
  const Eigen::Array3d r(1.0, 0.5, -2.0);
  const Eigen::Array2d c(3.0, -0.25);
  Eigen::ArrayXd g(6);
  for (int j = 0; j < 2; ++j)
    for (int i = 0; i < 3; ++i) g(i + 3 * j) = r(i) * c(j);
  const TensorStats sm = tensor_stats(Eigen::ArrayXd::Ones(6), g, 3, 2);
  EXPECT_TRUE(sm.grad_rms.isApprox(g.abs(), 1e-12));
  EXPECT_TRUE(sm.param_rms.isApprox(Eigen::ArrayXd::Ones(6), 1e-15));
  EXPECT_THROW(tensor_stats(v, v, 2, 2), std::invalid_argument);
}

TEST(MlpForward, ZeroAndBiasOnly) {
  StarParams p = StarParams::zeros(5, 3);
  const Eigen::VectorXd z = Eigen::VectorXd::LinSpaced(5, -1, 1);
  const Heads h0 = mlp_forward(p, z);
  EXPECT_EQ(h0.d, 0.0);
  EXPECT_EQ(h0.m_b, 0.0);
  EXPECT_EQ(h0.m_g, 0.0);
  p.b3 << 0.3, -0.2, 1.5;
  const Heads h = mlp_forward(p, z);
  EXPECT_EQ(h.d, 0.3);
  EXPECT_EQ(h.m_b, -0.2);
  EXPECT_EQ(h.m_g, 1.5);
}

TEST(MlpForward, MatchesLoopImplementation) {
  const StarParams p = random_params(9, 3, 5);
  CounterRng rng(6, 0);
  Eigen::MatrixXd z(20, 9);
  randomize(z, rng);
  const Eigen::MatrixXd out = mlp_forward(p, z);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const auto ref = reference_forward(p, z.row(i).transpose());
    for (Eigen::Index k = 0; k < 3; ++k) EXPECT_NEAR(out(i, k), ref[static_cast<std::size_t>(k)], 1e-12);
  }
}

TEST(StarParams, FlattenAssignRoundTrip) {
  StarParams p = random_params(7, 3, 8);
  p.learnable_gate = true;
  p.nominal_log_gate = 0.25;
  const Eigen::VectorXd theta = p.flatten();
  StarParams q = StarParams::zeros(7, 3);
  q.learnable_gate = true;
  q.assign(theta);
  EXPECT_EQ(q.flatten(), theta);
  EXPECT_EQ(q.nominal_log_gate, 0.25);
  const Eigen::VectorXd mask = q.decay_mask();
  EXPECT_EQ(mask(mask.size() - 1), 0.0);
  EXPECT_EQ(mask.head(mask.size() - 1).minCoeff(), 1.0);
  EXPECT_THROW(q.assign(Eigen::VectorXd::Zero(3)), std::invalid_argument);
}

TEST(StarParams, InitialHasZeroHeadAndBoundedTrunk) {
  const StarParams p = StarParams::initial(37, 3, 99);
  EXPECT_EQ(p.w3.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(p.b3.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_LE(p.w1.cwiseAbs().maxCoeff(), 1.0 / std::sqrt(37.0));
  EXPECT_GT(p.w1.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(StarParams::initial(37, 3, 99).flatten(), p.flatten());
}

TEST(StarUpdate, ZeroWeightsGiveScaledNominal) {
  const Fixture f = make_fixture(30, 9, 1);
  const StarParams p = StarParams::zeros(f.cfg.feature_count(), 3);
  const Eigen::ArrayXd v = Eigen::ArrayXd::Constant(30, 0.7);
  const Eigen::ArrayXd dphi = star_update(p, f.features, f.state, f.cfg.nominal, v);
  EXPECT_TRUE(dphi.isApprox(0.001 * nominal_direction(f.state, f.cfg.nominal), 1e-15));
}

TEST(StarUpdate, ZeroDirectionHeadRemovesBlackboxTerm) {
  const Fixture f = make_fixture(30, 9, 2);
  StarParams p = random_params(f.cfg.feature_count(), 3, 3);
  p.w3.col(0).setZero();
  p.b3(0) = 0.0;
  const Eigen::ArrayXd v = Eigen::ArrayXd::Constant(30, 1e-3);
  const Eigen::MatrixXd heads = mlp_forward(p, f.features);
  const Eigen::ArrayXd expected =
      0.001 * (0.001 * heads.col(2).array()).exp() * nominal_direction(f.state, f.cfg.nominal);
  EXPECT_TRUE(star_update(p, f.features, f.state, f.cfg.nominal, v).isApprox(expected, 1e-14));
}

TEST(StarUpdate, BlackboxTermScalesInverselyWithV) {
  const Fixture f = make_fixture(10, 4, 4);
  StarParams p = StarParams::zeros(f.cfg.feature_count(), 3);
  p.b3 << 0.8, 0.5, 0.0;
  const Eigen::ArrayXd g = 0.001 * nominal_direction(f.state, f.cfg.nominal);
  const Eigen::ArrayXd v = Eigen::ArrayXd::Constant(10, 0.2);
  const Eigen::ArrayXd blackbox = star_update(p, f.features, f.state, f.cfg.nominal, v) - g;
  const Eigen::ArrayXd halved = star_update(p, f.features, f.state, f.cfg.nominal, 0.5 * v) - g;
  EXPECT_TRUE(blackbox.isApprox(Eigen::ArrayXd::Constant(10, 0.001 * 0.8 * std::exp(0.0005) / 0.2), 1e-12));
  EXPECT_TRUE(halved.isApprox(2.0 * blackbox, 1e-12));
  EXPECT_THROW(star_update(p, f.features, f.state, f.cfg.nominal, Eigen::ArrayXd::Zero(10)),
               std::invalid_argument);
}

TEST(StarUpdate, DoublingBeta2SquaresTheExpFactor) {
  const Fixture f = make_fixture(12, 5, 6);
  StarParams p = StarParams::zeros(f.cfg.feature_count(), 3);
  p.b3 << 0.0, 0.0, 300.0;
  const Eigen::ArrayXd v = Eigen::ArrayXd::Ones(12);
  const Eigen::ArrayXd g = nominal_direction(f.state, f.cfg.nominal);
  const Eigen::ArrayXd once = star_update(p, f.features, f.state, f.cfg.nominal, v);
  p.scales.beta2 *= 2;
  const Eigen::ArrayXd twice = star_update(p, f.features, f.state, f.cfg.nominal, v);
  const double factor = std::exp(0.001 * 300.0);
  EXPECT_TRUE(once.isApprox(0.001 * factor * g, 1e-13));
  EXPECT_TRUE(twice.isApprox(0.001 * factor * factor * g, 1e-13));
}

TEST(StarUpdate, MagnitudeBound) {
  const Fixture f = make_fixture(40, 6, 7);
  const StarParams p = random_params(f.cfg.feature_count(), 3, 9);
  const Eigen::MatrixXd heads = mlp_forward(p, f.features);
  const double m = heads.cwiseAbs().maxCoeff();
  const double eps_v = 1e-8;
  const Eigen::ArrayXd v = primary_rms(f.state, f.cfg.nominal).max(eps_v);
  const Eigen::ArrayXd g = nominal_direction(f.state, f.cfg.nominal);
  const Eigen::ArrayXd dphi = star_update(p, f.features, f.state, f.cfg.nominal, v);
  const Eigen::ArrayXd bound = 0.001 * m * std::exp(0.001 * m) / eps_v + 0.001 * std::exp(0.001 * m) * g.abs();
  EXPECT_TRUE((dphi.abs() <= bound).all());
}

TEST(StarUpdate, PermutationEquivariant) {
  const Fixture f = make_fixture(15, 6, 10);
  const StarParams p = random_params(f.cfg.feature_count(), 3, 11);
  const Eigen::ArrayXd v = primary_rms(f.state, f.cfg.nominal) + 1e-8;
  const Eigen::ArrayXd dphi = star_update(p, f.features, f.state, f.cfg.nominal, v);
  std::vector<int> perm(15);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::rotate(perm.begin(), perm.begin() + 4, perm.end());
  Eigen::MatrixXd pf(15, f.features.cols());
  InnerState ps = f.state;
  Eigen::ArrayXd pv(15);
  for (int i = 0; i < 15; ++i) {
    pf.row(i) = f.features.row(perm[static_cast<std::size_t>(i)]);
    pv(i) = v(perm[static_cast<std::size_t>(i)]);
    for (std::size_t k = 0; k < ps.momenta.size(); ++k) ps.momenta[k](i) = f.state.momenta[k](perm[static_cast<std::size_t>(i)]);
    for (std::size_t k = 0; k < ps.second_moments.size(); ++k)
      ps.second_moments[k](i) = f.state.second_moments[k](perm[static_cast<std::size_t>(i)]);
  }
  const Eigen::ArrayXd permuted = star_update(p, pf, ps, f.cfg.nominal, pv);
  for (int i = 0; i < 15; ++i) EXPECT_DOUBLE_EQ(permuted(i), dphi(perm[static_cast<std::size_t>(i)]));
}

TEST(BlackboxUpdate, ZeroAndForcedHeads) {
  const Fixture f = make_fixture(8, 3, 12);
  StarParams p = StarParams::zeros(f.cfg.feature_count(), 2);
  EXPECT_EQ(blackbox_update(p, f.features).abs().maxCoeff(), 0.0);
  p.b3 << 1.0, 0.0;
  EXPECT_TRUE(blackbox_update(p, f.features).isApprox(Eigen::ArrayXd::Constant(8, 0.001), 1e-15));
  EXPECT_THROW(star_update(p, f.features, f.state, f.cfg.nominal, Eigen::ArrayXd::Ones(8)),
               std::invalid_argument);
}

TEST(BlackboxUpdate, SharedTrunkGivesSameDirectionHead) {
  const Fixture f = make_fixture(8, 3, 13);
  const StarParams star = random_params(f.cfg.feature_count(), 3, 14);
  StarParams bb = StarParams::zeros(f.cfg.feature_count(), 2);
  bb.w1 = star.w1;
  bb.b1 = star.b1;
  bb.w2 = star.w2;
  bb.b2 = star.b2;
  bb.w3 = star.w3.leftCols(2);
  bb.b3 = star.b3.head(2);
  EXPECT_TRUE(mlp_forward(bb, f.features).col(0).isApprox(mlp_forward(star, f.features).col(0), 1e-15));
}

TEST(Checkpoint, RoundTripAndFingerprintCheck) {
  FeatureConfig cfg;
  StarParams p = random_params(cfg.feature_count(), 3, 15);
  p.feature_fingerprint = cfg.fingerprint();
  p.learnable_gate = true;
  p.nominal_log_gate = -0.125;
  const std::string text = to_checkpoint_json(p, "star");
  std::string kind;
  const StarParams q = from_checkpoint_json(text, cfg.fingerprint(), &kind);
  EXPECT_EQ(kind, "star");
  EXPECT_EQ(q.flatten(), p.flatten());
  EXPECT_EQ(q.w1, p.w1);
  EXPECT_EQ(q.learnable_gate, true);
  EXPECT_THROW(from_checkpoint_json(text, "F=1", nullptr), std::invalid_argument);
}

TEST(LearnedOptimizer, ZeroInitStarIsScaledNominalOnEveryTensor) {
  FeatureConfig cfg;
  const auto opt = LearnedOptimizer::create(OptimizerKind::kStar, cfg, 17);
  const std::vector<TensorSpec> tensors{{"w", 3, 4, 0}, {"b", 4, 1, 12}};
  CounterRng rng(18, 0);
  InnerState s = InnerState::zeros(16, cfg.nominal);
  Eigen::VectorXd grad;
  for (int t = 0; t < 5; ++t) {
    grad = random_array(rng, 16).matrix();
    update_state_inplace(s, grad.array(), cfg.nominal);
  }
  const Eigen::VectorXd phi = random_array(rng, 16).matrix();
  EXPECT_TRUE(opt.update(tensors, phi, grad, s).isApprox(0.001 * nominal_direction(s, cfg.nominal), 1e-15));
  const auto bb = LearnedOptimizer::create(OptimizerKind::kBlackbox, cfg, 17);
  EXPECT_EQ(bb.update(tensors, phi, grad, s).abs().maxCoeff(), 0.0);
  const auto hp = LearnedOptimizer::create(OptimizerKind::kHyperparam, cfg, 17);
  EXPECT_TRUE(hp.update(tensors, phi, grad, s).isApprox(0.001 * nominal_direction(s, cfg.nominal), 1e-15));
  EXPECT_EQ(opt.params.heads(), 3);
  EXPECT_EQ(bb.params.heads(), 2);
  EXPECT_EQ(hp.params.heads(), 1);
}

TEST(BlackboxPreconditioner, PerTensorRootMeanSecondMoment) {
  NominalConfig cfg;
  const std::vector<TensorSpec> tensors{{"a", 2, 2, 0}, {"b", 3, 1, 4}};
  InnerState s = InnerState::zeros(7, cfg);
  Eigen::ArrayXd g(7);
  g << 1.0, -3.0, 0.0, 2.0, 0.0, 0.0, 0.0;
  update_state_inplace(s, g, cfg);
  const Eigen::ArrayXd v = blackbox_preconditioner(tensors, s, cfg);
  // One step: the bias-corrected second moment is g^2.
  EXPECT_NEAR(v(0), std::sqrt((1.0 + 9.0 + 0.0 + 4.0) / 4.0), 1e-12);
  EXPECT_EQ(v(0), v(3));
  EXPECT_EQ(v(4), 1e-8);
  EXPECT_EQ(v(6), 1e-8);
}

}  // namespace
}  // namespace lopt
