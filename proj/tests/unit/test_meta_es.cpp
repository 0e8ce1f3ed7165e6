#include <atomic>
#include <cmath>

#include <gtest/gtest.h>

#include "lopt/meta_es.hpp"
#include "lopt/tasks.hpp"

namespace lopt {
namespace {

struct Moments {
  Eigen::VectorXd mean;
  Eigen::VectorXd se;
};

Moments moments(const std::vector<Eigen::VectorXd>& xs) {
  const auto n = static_cast<double>(xs.size());
  Moments m{Eigen::VectorXd::Zero(xs.front().size()), Eigen::VectorXd::Zero(xs.front().size())};
  for (const auto& x : xs) m.mean += x;
  m.mean /= n;
  for (const auto& x : xs) m.se += (x - m.mean).cwiseAbs2();
  m.se = (m.se / (n - 1) / n).cwiseSqrt();
  return m;
}

TEST(MetaConfig, Validation) {
  MetaConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.segments_per_episode(), 40);
  cfg.horizon = 120;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = MetaConfig{};
  cfg.truncation = 4000;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = MetaConfig{};
  cfg.sigma = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(ParallelFor, CoversEveryIndexAndRethrows) {
  std::vector<int> hits(37, 0);
  parallel_for(37, 4, [&](int i) { hits[static_cast<std::size_t>(i)] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 3, [](int i) {
                 if (i == 7) throw std::runtime_error("boom");
               }),
               std::runtime_error);
}

TEST(EsPerturbations, IidPairsDependOnlyOnSeedAndIndex) {
  const Eigen::MatrixXd a = es_perturbations(5, 4, 0.1, 77);
  const Eigen::MatrixXd b = es_perturbations(5, 9, 0.1, 77);
  EXPECT_EQ(a, b.leftCols(4));
  EXPECT_NE(a, es_perturbations(5, 4, 0.1, 78));
}

TEST(EsPerturbations, OrthogonalBlocks) {
  const double sigma = 0.05;
  const Eigen::MatrixXd e = es_perturbations(6, 6, sigma, 3, EsSampling::kOrthogonal);
  const Eigen::MatrixXd gram = e.transpose() * e;
  EXPECT_TRUE(gram.isApprox(6 * sigma * sigma * Eigen::MatrixXd::Identity(6, 6), 1e-12));
}

TEST(CombineAntithetic, DropsNonFinitePairs) {
  Eigen::MatrixXd eps(2, 3);
  eps << 1, 0, 2, 0, 1, 2;
  const auto est = combine_antithetic(eps, {1.0, NAN, 3.0}, {0.0, 1.0, 1.0}, 1.0);
  EXPECT_EQ(est.n_used, 2);
  EXPECT_EQ(est.n_dropped, 1);
  EXPECT_TRUE(est.gradient.isApprox(Eigen::Vector2d((1.0 + 4.0) / 4.0, 4.0 / 4.0), 1e-15));
  EXPECT_THROW(combine_antithetic(eps, {INFINITY, NAN, INFINITY}, {0, 0, 0}, 1.0), AllPairsDivergedError);
}

TEST(EsGradient, ConstantObjectiveGivesZero) {
  const auto est = es_gradient([](const Eigen::VectorXd&) { return 3.5; }, Eigen::VectorXd::Ones(4),
                               0.01, 16, 1);
  EXPECT_EQ(est.gradient.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_DOUBLE_EQ(est.mean_loss, 3.5);
}

TEST(EsGradient, LinearObjectiveIdentity) {
  const Eigen::VectorXd a = Eigen::Vector4d(1.0, -2.0, 0.5, 3.0);
  const Objective f = [&](const Eigen::VectorXd& th) { return a.dot(th) + 7.0; };
  const double sigma = 0.01;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const int n = 6;
    const auto est = es_gradient(f, Eigen::VectorXd::Zero(4), sigma, n, seed);
    const Eigen::MatrixXd eps = es_perturbations(4, n, sigma, seed);
    const Eigen::VectorXd expected = eps * eps.transpose() * a / (n * sigma * sigma);
    EXPECT_LT((est.gradient - expected).cwiseAbs().maxCoeff(), 1e-9 * a.norm());
  }
}

TEST(EsGradient, OrthogonalSamplingIsExactOnLinear) {
  const Eigen::VectorXd a = Eigen::Vector4d(1.0, -2.0, 0.5, 3.0);
  const Objective f = [&](const Eigen::VectorXd& th) { return a.dot(th); };
  for (int n : {4, 8}) {
    const auto est = es_gradient(f, Eigen::VectorXd::Ones(4), 0.01, n, 9, EsSampling::kOrthogonal);
    EXPECT_LT((est.gradient - a).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(EsGradient, QuadraticMeanWithinThreeStandardErrors) {
  const Objective f = [](const Eigen::VectorXd& th) { return 0.5 * th.squaredNorm(); };
  const Eigen::VectorXd theta = Eigen::Vector2d(1.0, 2.0);
  const double sigma = 0.01;
  const int n = 10000;
  const auto est = es_gradient(f, theta, sigma, n, 42);
  const Eigen::MatrixXd eps = es_perturbations(2, n, sigma, 42);
  std::vector<Eigen::VectorXd> per_pair;
  for (int i = 0; i < n; ++i)
    per_pair.push_back(eps.col(i) * (f(theta + eps.col(i)) - f(theta - eps.col(i))) / (2 * sigma * sigma));
  const Moments m = moments(per_pair);
  EXPECT_TRUE(est.gradient.isApprox(m.mean, 1e-10));
  for (int k = 0; k < 2; ++k) EXPECT_LT(std::abs(m.mean(k) - theta(k)), 3 * m.se(k));
}

TEST(EsGradient, ThreadCountDoesNotChangeEstimate) {
  const Objective f = [](const Eigen::VectorXd& th) { return std::sin(th(0)) * th(1) + th.squaredNorm(); };
  const auto a = es_gradient(f, Eigen::Vector3d(0.1, 0.2, 0.3), 0.1, 33, 5, EsSampling::kIid, 1);
  const auto b = es_gradient(f, Eigen::Vector3d(0.1, 0.2, 0.3), 0.1, 33, 5, EsSampling::kIid, 3);
  EXPECT_EQ(a.gradient, b.gradient);
}

struct Counter {
  int segments{0};
};

TEST(Pes, AccumulatorsSumDrawnPerturbations) {
  const int n = 3;
  std::vector<PesParticle<Counter>> particles(n);
  const StateInit<Counter> init = [](std::uint64_t) { return Counter{}; };
  const SegmentUnroll<Counter> unroll = [](const Eigen::VectorXd& th, Counter& c) {
    ++c.segments;
    return th.squaredNorm();
  };
  pes_reset_episode(particles, 4, init, 1, 0);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(4, n);
  for (std::uint64_t k = 0; k < 5; ++k) {
    pes_gradient_step(particles, Eigen::VectorXd::Ones(4), unroll, 0.1, 100 + k);
    sum += es_perturbations(4, n, 0.1, 100 + k);
  }
  for (int i = 0; i < n; ++i) {
    EXPECT_TRUE(particles[static_cast<std::size_t>(i)].accumulator.isApprox(sum.col(i), 1e-14));
    EXPECT_EQ(particles[static_cast<std::size_t>(i)].offset, 5);
    EXPECT_EQ(particles[static_cast<std::size_t>(i)].positive.segments, 5);
  }
  pes_reset_episode(particles, 4, init, 1, 1);
  EXPECT_EQ(particles[0].accumulator.norm(), 0.0);
  particles[1].offset = 2;
  EXPECT_THROW(pes_gradient_step(particles, Eigen::VectorXd::Ones(4), unroll, 0.1, 1), std::logic_error);
}

TEST(Pes, SingleSegmentMatchesVanillaEsInDistribution) {
  // Episode loss depends on the task seed carried in the state.
  auto loss = [](const Eigen::VectorXd& th, std::uint64_t task_seed) {
    CounterRng rng(task_seed, 0);
    const double a = rng.normal(), b = rng.normal();
    return std::sin(th(0) + a) + 0.5 * th(1) * th(1) * (1.0 + 0.1 * b) + th(0) * th(1);
  };
  const Eigen::VectorXd theta = Eigen::Vector2d(0.3, -0.7);
  const double sigma = 0.1;
  const int seeds = 5000;
  std::vector<Eigen::VectorXd> pes, es;
  for (int s = 0; s < seeds; ++s) {
    std::vector<PesParticle<std::uint64_t>> particles(1);
    pes_reset_episode<std::uint64_t>(particles, 2, [](std::uint64_t t) { return t; }, derive_seed(1, s), 0);
    const SegmentUnroll<std::uint64_t> unroll = [&](const Eigen::VectorXd& th, std::uint64_t& t) {
      return loss(th, t);
    };
    pes.push_back(pes_gradient_step(particles, theta, unroll, sigma, derive_seed(2, s)).gradient);
    const std::uint64_t task = derive_seed(3, s);
    es.push_back(es_gradient([&](const Eigen::VectorXd& th) { return loss(th, task); }, theta, sigma, 1,
                             derive_seed(4, s))
                     .gradient);
  }
  const Moments a = moments(pes), b = moments(es);
  for (int k = 0; k < 2; ++k) {
    const double se = std::sqrt(a.se(k) * a.se(k) + b.se(k) * b.se(k));
    EXPECT_LT(std::abs(a.mean(k) - b.mean(k)), 3 * se) << "component " << k;
  }
}

// PES over two segments of a linear optimizer on the NQM, with a tiny sigma,
// against the finite-difference gradient of the closed-form loss.
TEST(Pes, NqmEpisodeGradientMatchesFiniteDifferences) {
  const auto quad = reference_task<double>();
  const QuadraticInnerTask task(quad, 10);
  const double alpha = 0.3;
  struct Run {
    Eigen::VectorXd phi;
    std::uint64_t seed{0};
    int t{0};
  };
  const StateInit<Run> init = [&](std::uint64_t s) { return Run{task.init_params(s), s, 0}; };
  const SegmentUnroll<Run> unroll = [&](const Eigen::VectorXd& th, Run& r) {
    const Eigen::MatrixXd gain =
        alpha * Eigen::MatrixXd::Identity(2, 2) + Eigen::Map<const Eigen::MatrixXd>(th.data(), 2, 2);
    double total = 0;
    for (int k = 0; k < 5; ++k) {
      const Eigen::VectorXd grad = task.loss_and_grad(r.phi, derive_seed(r.seed, 9, r.t)).grad;
      r.phi -= gain * grad;
      ++r.t;
      total += task.loss_and_grad(r.phi, derive_seed(r.seed, 9, r.t)).loss;
    }
    return total / 5;
  };
  Eigen::MatrixXd p(2, 2);
  p << 0.1, 0.02, 0.02, 0.2;
  const Eigen::VectorXd theta = Eigen::Map<const Eigen::VectorXd>(p.data(), 4);
  std::vector<Eigen::VectorXd> estimates;
  for (int e = 0; e < 3000; ++e) {
    std::vector<PesParticle<Run>> particles(1);
    pes_reset_episode(particles, 4, init, 77, static_cast<std::uint64_t>(e));
    Eigen::VectorXd episode = Eigen::VectorXd::Zero(4);
    for (std::uint64_t k = 0; k < 2; ++k)
      episode += 0.5 * pes_gradient_step(particles, theta, unroll, 1e-7, derive_seed(78, e, k)).gradient;
    estimates.push_back(episode);
  }
  const Moments m = moments(estimates);
  // The realized loss carries a 1/2 that the closed form does not.
  const auto fd = meta_gradient_fd(quad, LinearOptimizerSpec<double>{alpha, p, false}, 10);
  const Eigen::VectorXd target = 0.5 * Eigen::Map<const Eigen::VectorXd>(fd.d_precond.data(), 4);
  for (int k = 0; k < 4; ++k) EXPECT_LT(std::abs(m.mean(k) - target(k)), 3 * m.se(k)) << "entry " << k;
}

TEST(MetaStep, DecoupledDecayWithZeroGradient) {
  MetaConfig cfg;
  cfg.meta_lr = 1e-4;
  cfg.weight_decay_multiplier = 0.5;
  Eigen::VectorXd theta = Eigen::Vector3d(2.0, -1.0, 4.0);
  const Eigen::VectorXd mask = Eigen::Vector3d(1.0, 1.0, 0.0);
  MetaAdamState state = MetaAdamState::zeros(3);
  for (int k = 0; k < 3; ++k) meta_step(theta, Eigen::VectorXd::Zero(3), state, cfg, mask);
  const double f = std::pow(1 - 5e-5, 3);
  EXPECT_NEAR(theta(0), 2.0 * f, 1e-15);
  EXPECT_NEAR(theta(1), -1.0 * f, 1e-15);
  EXPECT_EQ(theta(2), 4.0);
}

TEST(MetaStep, ClipsToUnitNorm) {
  MetaConfig cfg;
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(2);
  MetaAdamState state = MetaAdamState::zeros(2);
  const auto info = meta_step(theta, Eigen::Vector2d(6.0, 8.0), state, cfg, Eigen::VectorXd::Ones(2));
  EXPECT_DOUBLE_EQ(info.grad_norm, 10.0);
  EXPECT_NEAR(state.m.norm() / (1 - cfg.adam_beta1), 1.0, 1e-15);
}

TEST(MetaStep, MatchesIndependentAdam) {
  MetaConfig cfg;
  cfg.meta_lr = 3e-3;
  cfg.grad_clip = 1e9;
  CounterRng rng(4, 0);
  Eigen::VectorXd theta = Eigen::Vector3d(0.5, -0.5, 1.0), ref = theta;
  Eigen::VectorXd m = Eigen::VectorXd::Zero(3), v = Eigen::VectorXd::Zero(3);
  MetaAdamState state = MetaAdamState::zeros(3);
  for (int t = 1; t <= 50; ++t) {
    const Eigen::VectorXd g = rng.normal_vector(3);
    meta_step(theta, g, state, cfg, Eigen::VectorXd::Ones(3));
    for (int i = 0; i < 3; ++i) {
      m(i) = 0.9 * m(i) + 0.1 * g(i);
      v(i) = 0.999 * v(i) + 0.001 * g(i) * g(i);
      const double mh = m(i) / (1 - std::pow(0.9, t));
      const double vh = v(i) / (1 - std::pow(0.999, t));
      ref(i) -= 3e-3 * mh / (std::sqrt(vh) + 1e-8);
    }
    ASSERT_LT((theta - ref).cwiseAbs().maxCoeff(), 1e-12) << "step " << t;
  }
}

TEST(MetaStep, SkipsNonFiniteGradient) {
  MetaConfig cfg;
  Eigen::VectorXd theta = Eigen::Vector2d(1, 2);
  MetaAdamState state = MetaAdamState::zeros(2);
  const auto info = meta_step(theta, Eigen::Vector2d(NAN, 1), state, cfg, Eigen::VectorXd::Ones(2));
  EXPECT_TRUE(info.skipped);
  EXPECT_EQ(state.skipped, 1);
  EXPECT_EQ(state.step, 0);
  EXPECT_EQ(theta, Eigen::VectorXd(Eigen::Vector2d(1, 2)));
}

TEST(EmaSmooth, Identities) {
  EXPECT_EQ(ema_smooth({2, 2, 2, 2}, 0.9), (std::vector<double>{2, 2, 2, 2}));
  EXPECT_EQ(ema_smooth({1, 5, -3}, 0.0), (std::vector<double>{1, 5, -3}));
  std::vector<double> step(10, 0.0);
  step.resize(40, 1.0);
  const auto y = ema_smooth(step, 0.95);
  for (int k = 1; k <= 30; ++k) EXPECT_NEAR(y[static_cast<std::size_t>(9 + k)], 1 - std::pow(0.95, k), 1e-14);
  EXPECT_THROW(ema_smooth({}, 0.5), std::invalid_argument);
  EXPECT_THROW(ema_smooth({1.0}, 1.0), std::invalid_argument);
}

TEST(MetaTrainLinearNqm, DeterministicAndLogsEigenvalues) {
  MetaConfig cfg;
  cfg.horizon = 20;
  cfg.truncation = 20;
  cfg.meta_steps = 30;
  cfg.meta_lr = 1e-2;
  cfg.checkpoint_every = 10;
  const auto task = reference_task<double>();
  const auto a = meta_train_linear_nqm(task, 0.4, cfg, 3);
  const auto b = meta_train_linear_nqm(task, 0.4, cfg, 3);
  ASSERT_EQ(a.rows.size(), 30u);
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].meta_loss, b.rows[i].meta_loss);
    EXPECT_EQ(a.rows[i].step, static_cast<long>(i));
    EXPECT_EQ(a.rows[i].eigen_abs.size(), 2u);
    EXPECT_GE(a.rows[i].eigen_abs[0], a.rows[i].eigen_abs[1]);
  }
  EXPECT_DOUBLE_EQ(a.rows[0].meta_loss,
                   expected_loss(task, LinearOptimizerSpec<double>::nominal(0.4, 2), 20));
  EXPECT_LT(a.rows.back().meta_loss, a.rows.front().meta_loss);
  EXPECT_EQ(a.checkpoints.size(), 4u);
  EXPECT_EQ(a.theta, b.theta);
}

TEST(MetaTrain, DeterministicAcrossThreadCounts) {
  MlpTaskSpec spec = default_mlp_task_spec();
  spec.horizon = 40;
  spec.data.points = 128;
  const MlpTask task(spec);
  MetaConfig cfg;
  cfg.horizon = 40;
  cfg.truncation = 10;
  cfg.meta_steps = 9;
  cfg.n_pairs = 3;
  cfg.meta_lr = 1e-2;
  cfg.checkpoint_every = 4;
  const auto init = LearnedOptimizer::create(OptimizerKind::kStar, FeatureConfig{}, 1);
  const auto a = meta_train(task, init, cfg, 11);
  cfg.threads = 3;
  const auto b = meta_train(task, init, cfg, 11);
  ASSERT_EQ(a.rows.size(), 9u);
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].meta_loss, b.rows[i].meta_loss);
    EXPECT_TRUE(std::isfinite(a.rows[i].meta_loss));
  }
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_NE(a.theta, init.theta());
  EXPECT_EQ(a.checkpoints.size(), 3u);
}

TEST(MetaTrain, RejectsLinearKind) {
  const MlpTask task(default_mlp_task_spec());
  LearnedOptimizer opt;
  opt.kind = OptimizerKind::kLinearNqm;
  EXPECT_THROW(meta_train(task, opt, MetaConfig{}, 0), std::invalid_argument);
}

}  // namespace
}  // namespace lopt
