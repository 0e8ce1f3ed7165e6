#include "lopt/meta_es.hpp"

#include <cmath>
#include <limits>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

namespace lopt {

std::string to_string(EsSampling s) { return s == EsSampling::kIid ? "iid" : "orthogonal"; }

EsSampling es_sampling_from_string(const std::string& s) {
  if (s == "iid") return EsSampling::kIid;
  if (s == "orthogonal") return EsSampling::kOrthogonal;
  throw std::invalid_argument("unknown ES sampling '" + s + "'");
}

void MetaConfig::validate() const {
  if (!(sigma > 0.0)) throw std::invalid_argument("MetaConfig: sigma must be positive");
  if (truncation < 1 || horizon < 1)
    throw std::invalid_argument("MetaConfig: truncation and horizon must be >= 1");
  if (truncation > horizon || horizon % truncation != 0)
    throw std::invalid_argument("MetaConfig: horizon must be a multiple of truncation");
  if (n_pairs < 1) throw std::invalid_argument("MetaConfig: n_pairs must be >= 1");
  if (!(meta_lr > 0.0)) throw std::invalid_argument("MetaConfig: meta_lr must be positive");
  if (!(weight_decay_multiplier >= 0.0))
    throw std::invalid_argument("MetaConfig: weight_decay_multiplier must be >= 0");
  if (!(grad_clip > 0.0)) throw std::invalid_argument("MetaConfig: grad_clip must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw std::invalid_argument("MetaConfig: Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw std::invalid_argument("MetaConfig: adam_eps must be positive");
  if (meta_steps < 0) throw std::invalid_argument("MetaConfig: meta_steps must be >= 0");
  if (!(smoothing >= 0.0 && smoothing < 1.0))
    throw std::invalid_argument("MetaConfig: smoothing must lie in [0, 1)");
  if (checkpoint_every < 0) throw std::invalid_argument("MetaConfig: checkpoint_every must be >= 0");
  if (threads < 1) throw std::invalid_argument("MetaConfig: threads must be >= 1");
}

Eigen::MatrixXd es_perturbations(Eigen::Index dim, int n_pairs, double sigma, std::uint64_t seed,
                                 EsSampling sampling) {
  if (dim < 1 || n_pairs < 1) throw std::invalid_argument("es_perturbations: empty shape");
  Eigen::MatrixXd eps(dim, n_pairs);
  if (sampling == EsSampling::kIid) {
    for (int i = 0; i < n_pairs; ++i) {
      CounterRng rng(seed, static_cast<std::uint64_t>(i));
      eps.col(i) = sigma * rng.normal_vector(dim);
    }
    return eps;
  }
  const double scale = sigma * std::sqrt(static_cast<double>(dim));
  Eigen::MatrixXd q;
  for (int i = 0; i < n_pairs; ++i) {
    const Eigen::Index k = i % dim;
    if (k == 0) {
      CounterRng rng(seed, static_cast<std::uint64_t>(i / dim));
      Eigen::MatrixXd g(dim, dim);
      for (Eigen::Index c = 0; c < dim; ++c) g.col(c) = rng.normal_vector(dim);
      q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    }
    eps.col(i) = scale * q.col(k);
  }
  return eps;
}

EsEstimate combine_antithetic(const Eigen::MatrixXd& eps, const std::vector<double>& plus,
                              const std::vector<double>& minus, double sigma) {
  const auto n = static_cast<std::size_t>(eps.cols());
  if (plus.size() != n || minus.size() != n)
    throw std::invalid_argument("combine_antithetic: loss count mismatch");
  EsEstimate out;
  out.gradient = Eigen::VectorXd::Zero(eps.rows());
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(plus[i]) || !std::isfinite(minus[i])) {
      ++out.n_dropped;
      continue;
    }
    out.gradient += (plus[i] - minus[i]) * eps.col(static_cast<Eigen::Index>(i));
    loss_sum += 0.5 * (plus[i] + minus[i]);
    ++out.n_used;
  }
  if (out.n_used == 0) throw AllPairsDivergedError("ES: every antithetic pair diverged");
  out.gradient /= 2.0 * sigma * sigma * out.n_used;
  out.mean_loss = loss_sum / out.n_used;
  return out;
}

EsEstimate es_gradient(const Objective& objective, const Eigen::VectorXd& theta, double sigma,
                       int n_pairs, std::uint64_t seed, EsSampling sampling, int threads) {
  if (!(sigma > 0.0)) throw std::invalid_argument("es_gradient: sigma must be positive");
  const Eigen::MatrixXd eps = es_perturbations(theta.size(), n_pairs, sigma, seed, sampling);
  std::vector<double> plus(static_cast<std::size_t>(n_pairs)), minus(static_cast<std::size_t>(n_pairs));
  parallel_for(n_pairs, threads, [&](int i) {
    plus[static_cast<std::size_t>(i)] = objective(theta + eps.col(i));
    minus[static_cast<std::size_t>(i)] = objective(theta - eps.col(i));
  });
  return combine_antithetic(eps, plus, minus, sigma);
}

MetaAdamState MetaAdamState::zeros(Eigen::Index n) {
  return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n), 0, 0};
}

MetaStepInfo meta_step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, MetaAdamState& state,
                       const MetaConfig& cfg, const Eigen::VectorXd& decay_mask) {
  if (grad.size() != theta.size() || state.m.size() != theta.size() ||
      state.v.size() != theta.size() || decay_mask.size() != theta.size())
    throw std::invalid_argument("meta_step: dimension mismatch");
  MetaStepInfo info;
  if (!grad.allFinite()) {
    ++state.skipped;
    info.grad_norm = std::numeric_limits<double>::quiet_NaN();
    info.skipped = true;
    return info;
  }
  info.grad_norm = grad.norm();
  Eigen::VectorXd g = grad;
  if (info.grad_norm > cfg.grad_clip) g *= cfg.grad_clip / info.grad_norm;

  ++state.step;
  state.m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * g;
  state.v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * g.cwiseAbs2();
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
  const Eigen::ArrayXd adam =
      (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.adam_eps);
  const Eigen::ArrayXd decay = cfg.weight_decay_multiplier * decay_mask.array() * theta.array();
  theta.array() -= cfg.meta_lr * (adam + decay);
  return info;
}

std::vector<double> ema_smooth(const std::vector<double>& series, double coefficient) {
  if (series.empty()) throw std::invalid_argument("ema_smooth: empty series");
  if (!(coefficient >= 0.0 && coefficient < 1.0))
    throw std::invalid_argument("ema_smooth: coefficient must lie in [0, 1)");
  std::vector<double> out(series.size());
  out[0] = series[0];
  for (std::size_t i = 1; i < series.size(); ++i)
    out[i] = coefficient * out[i - 1] + (1.0 - coefficient) * series[i];
  return out;
}

namespace {

class OnlineEma {
 public:
  explicit OnlineEma(double c) : c_(c) {}
  // Non-finite observations leave the average unchanged.
  double push(double x) {
    if (std::isfinite(x)) {
      value_ = started_ ? c_ * value_ + (1.0 - c_) * x : x;
      started_ = true;
    }
    return started_ ? value_ : std::numeric_limits<double>::infinity();
  }

 private:
  double c_;
  double value_{0};
  bool started_{false};
};

std::vector<double> eigen_magnitudes(const Eigen::MatrixXd& a) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(a, false);
  std::vector<double> out;
  if (es.info() != Eigen::Success) {
    out.assign(static_cast<std::size_t>(a.rows()), std::numeric_limits<double>::quiet_NaN());
    return out;
  }
  for (Eigen::Index i = 0; i < a.rows(); ++i) out.push_back(std::abs(es.eigenvalues()(i)));
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

void maybe_checkpoint(MetaTrainRecord& rec, const MetaConfig& cfg, long step,
                      const Eigen::VectorXd& theta) {
  if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) rec.checkpoints.push_back({step, theta});
}

}  // namespace

MetaTrainRecord meta_train_linear_nqm(const QuadraticTask<double>& task, double alpha,
                                      const MetaConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Eigen::Index n = task.dim();
  const auto spec_of = [&](const Eigen::VectorXd& theta) {
    return LinearOptimizerSpec<double>{alpha, Eigen::Map<const Eigen::MatrixXd>(theta.data(), n, n),
                                       false};
  };
  const Objective objective = [&](const Eigen::VectorXd& theta) {
    return expected_loss(task, spec_of(theta), cfg.horizon);
  };

  MetaTrainRecord rec;
  rec.theta = Eigen::VectorXd::Zero(n * n);
  const Eigen::VectorXd mask = Eigen::VectorXd::Ones(n * n);
  MetaAdamState adam = MetaAdamState::zeros(n * n);
  OnlineEma ema(cfg.smoothing);
  for (long s = 0; s < cfg.meta_steps; ++s) {
    maybe_checkpoint(rec, cfg, s, rec.theta);
    MetaStepRow row;
    row.step = s;
    row.meta_loss = objective(rec.theta);
    row.smoothed = ema.push(row.meta_loss);
    row.eigen_abs = eigen_magnitudes(build_dynamics(task, spec_of(rec.theta)).a);
    try {
      const EsEstimate est = es_gradient(objective, rec.theta, cfg.sigma, cfg.n_pairs,
                                         derive_seed(seed, static_cast<std::uint64_t>(s)),
                                         cfg.sampling, cfg.threads);
      row.dropped_pairs = est.n_dropped;
      const MetaStepInfo info = meta_step(rec.theta, est.gradient, adam, cfg, mask);
      row.grad_norm = info.grad_norm;
      row.skipped = info.skipped;
    } catch (const AllPairsDivergedError&) {
      row.dropped_pairs = cfg.n_pairs;
      row.grad_norm = std::numeric_limits<double>::quiet_NaN();
      row.skipped = true;
    }
    rec.dropped_pairs += row.dropped_pairs;
    if (row.skipped) ++rec.skipped_steps;
    rec.rows.push_back(std::move(row));
  }
  maybe_checkpoint(rec, cfg, cfg.meta_steps, rec.theta);
  return rec;
}

MetaTrainRecord meta_train(const InnerTask& task, const LearnedOptimizer& init,
                           const MetaConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (init.kind == OptimizerKind::kLinearNqm)
    throw std::invalid_argument("meta_train: use meta_train_linear_nqm for the linear NQM arm");
  MetaTrainRecord rec;
  rec.theta = init.theta();
  const Eigen::Index dim = rec.theta.size();
  const Eigen::VectorXd mask = init.params.decay_mask();
  MetaAdamState adam = MetaAdamState::zeros(dim);
  OnlineEma ema(cfg.smoothing);

  const StateInit<InnerRun> start = [&](std::uint64_t task_seed) {
    return start_inner_run(task, init.features.nominal, task_seed);
  };
  const SegmentUnroll<InnerRun> unroll = [&](const Eigen::VectorXd& theta, InnerRun& run) {
    return unroll_segment(task, init.with_theta(theta), run, cfg.truncation, cfg.loss_limit);
  };
  const std::uint64_t episode_seed = derive_seed(seed, 0xE915);
  std::uint64_t episode = 0;
  std::vector<PesParticle<InnerRun>> particles(static_cast<std::size_t>(cfg.n_pairs));
  pes_reset_episode(particles, dim, start, episode_seed, episode);

  for (long s = 0; s < cfg.meta_steps; ++s) {
    maybe_checkpoint(rec, cfg, s, rec.theta);
    MetaStepRow row;
    row.step = s;
    try {
      const EsEstimate est =
          pes_gradient_step(particles, rec.theta, unroll, cfg.sigma,
                            derive_seed(seed, 0x9E5, static_cast<std::uint64_t>(s)), cfg.sampling,
                            cfg.threads);
      row.meta_loss = est.mean_loss;
      row.dropped_pairs = est.n_dropped;
      const MetaStepInfo info = meta_step(rec.theta, est.gradient, adam, cfg, mask);
      row.grad_norm = info.grad_norm;
      row.skipped = info.skipped;
    } catch (const AllPairsDivergedError&) {
      row.meta_loss = std::numeric_limits<double>::infinity();
      row.dropped_pairs = cfg.n_pairs;
      row.grad_norm = std::numeric_limits<double>::quiet_NaN();
      row.skipped = true;
    }
    row.smoothed = ema.push(row.meta_loss);
    rec.dropped_pairs += row.dropped_pairs;
    if (row.skipped) ++rec.skipped_steps;
    rec.rows.push_back(std::move(row));
    if (particles.front().offset == cfg.segments_per_episode())
      pes_reset_episode(particles, dim, start, episode_seed, ++episode);
  }
  maybe_checkpoint(rec, cfg, cfg.meta_steps, rec.theta);
  return rec;
}

}  // namespace lopt
