#pragma once

// Antithetic ES, persistent ES over truncated unrolls, and the AdamW meta
// optimizer.

#include <algorithm>
#include <cstdint>
#include <exception>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>

#include "lopt/learned_optimizer.hpp"
#include "lopt/nqm.hpp"
#include "lopt/rng.hpp"

namespace lopt {

enum class EsSampling {
  kIid,
  // Blocks of dim(theta) mutually orthogonal directions of norm sigma sqrt(dim).
  kOrthogonal,
};

std::string to_string(EsSampling s);
EsSampling es_sampling_from_string(const std::string& s);

struct MetaConfig {
  double sigma{0.01};
  int truncation{50};
  int horizon{2000};
  int n_pairs{8};
  double meta_lr{1e-4};
  double weight_decay_multiplier{0.0};
  double grad_clip{1.0};
  double adam_beta1{0.9};
  double adam_beta2{0.999};
  double adam_eps{1e-8};
  int meta_steps{1000};
  double smoothing{0.98};
  int checkpoint_every{0};  // 0 disables periodic checkpoints
  EsSampling sampling{EsSampling::kIid};
  int threads{1};
  // A segment loss above this marks the particle's inner run diverged.
  double loss_limit{kDivergenceThreshold};

  void validate() const;
  int segments_per_episode() const { return horizon / truncation; }
};

/// Runs body(i) for i in [0, n) on up to `threads` threads. Work is split into
/// contiguous chunks; callers write results by index so reductions stay ordered.
template <typename Body>
void parallel_for(int n, int threads, const Body& body) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  const int workers = std::min(threads, n);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w * n / workers; i < (w + 1) * n / workers; ++i) body(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// The antithetic perturbations eps_1..eps_n (columns), each ~ N(0, sigma^2 I)
/// marginally. Pair i depends only on (seed, i) for iid sampling.
Eigen::MatrixXd es_perturbations(Eigen::Index dim, int n_pairs, double sigma, std::uint64_t seed,
                                 EsSampling sampling = EsSampling::kIid);

class AllPairsDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EsEstimate {
  Eigen::VectorXd gradient;
  int n_used{0};
  int n_dropped{0};
  double mean_loss{0};  // mean of (L+ + L-)/2 over used pairs
};

/// Combines antithetic loss pairs:
///   g = 1/(2 sigma^2 n_used) sum_i eps_i (L+_i - L-_i)
/// Pairs with a non-finite loss are dropped. Throws AllPairsDivergedError when
/// every pair drops.
EsEstimate combine_antithetic(const Eigen::MatrixXd& eps, const std::vector<double>& plus,
                              const std::vector<double>& minus, double sigma);

using Objective = std::function<double(const Eigen::VectorXd&)>;

EsEstimate es_gradient(const Objective& objective, const Eigen::VectorXd& theta, double sigma,
                       int n_pairs, std::uint64_t seed, EsSampling sampling = EsSampling::kIid,
                       int threads = 1);

template <typename State>
struct PesParticle {
  Eigen::VectorXd accumulator;
  State positive;
  State negative;
  int offset{0};  // segments completed in the current episode
};

/// Segment meta-loss of one perturbed unroll; advances `state` in place.
template <typename State>
using SegmentUnroll = std::function<double(const Eigen::VectorXd& theta, State& state)>;

template <typename State>
using StateInit = std::function<State(std::uint64_t task_seed)>;

/// Fresh episode: zero accumulators, both unrolls of pair i started from the
/// same task seed derived from (seed, episode, i).
template <typename State>
void pes_reset_episode(std::vector<PesParticle<State>>& particles, Eigen::Index dim,
                       const StateInit<State>& init, std::uint64_t seed, std::uint64_t episode) {
  for (std::size_t i = 0; i < particles.size(); ++i) {
    auto& p = particles[i];
    const std::uint64_t task_seed = derive_seed(seed, episode, i);
    p.accumulator = Eigen::VectorXd::Zero(dim);
    p.positive = init(task_seed);
    p.negative = init(task_seed);
    p.offset = 0;
  }
}

/// One PES segment: fresh antithetic perturbations per pair, one unroll per
/// sign, accumulators updated, estimate from the accumulated perturbations.
/// Throws std::logic_error if particles sit at different episode offsets and
/// AllPairsDivergedError if no pair yields finite losses.
template <typename State>
EsEstimate pes_gradient_step(std::vector<PesParticle<State>>& particles,
                             const Eigen::VectorXd& theta, const SegmentUnroll<State>& unroll,
                             double sigma, std::uint64_t seed, EsSampling sampling = EsSampling::kIid,
                             int threads = 1) {
  if (particles.empty()) throw std::invalid_argument("pes_gradient_step: no particles");
  for (const auto& p : particles) {
    if (p.offset != particles.front().offset)
      throw std::logic_error("pes_gradient_step: particles are desynchronized");
    if (p.accumulator.size() != theta.size())
      throw std::invalid_argument("pes_gradient_step: accumulator dimension mismatch");
  }
  const int n = static_cast<int>(particles.size());
  const Eigen::MatrixXd eps = es_perturbations(theta.size(), n, sigma, seed, sampling);
  std::vector<double> plus(static_cast<std::size_t>(n)), minus(static_cast<std::size_t>(n));
  parallel_for(n, threads, [&](int i) {
    auto& p = particles[static_cast<std::size_t>(i)];
    const auto k = static_cast<std::size_t>(i);
    plus[k] = unroll(theta + eps.col(i), p.positive);
    minus[k] = unroll(theta - eps.col(i), p.negative);
  });
  Eigen::MatrixXd accum(theta.size(), n);
  for (int i = 0; i < n; ++i) {
    auto& p = particles[static_cast<std::size_t>(i)];
    p.accumulator += eps.col(i);
    ++p.offset;
    accum.col(i) = p.accumulator;
  }
  return combine_antithetic(accum, plus, minus, sigma);
}

struct MetaAdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step{0};
  long skipped{0};

  static MetaAdamState zeros(Eigen::Index n);
};

struct MetaStepInfo {
  double grad_norm{0};  // before clipping
  bool skipped{false};
};

/// AdamW step on the clipped gradient:
///   theta <- theta - lr m_hat/(sqrt(v_hat)+eps) - lr wd (mask .* theta)
/// A non-finite gradient leaves theta and the moments untouched and counts a skip.
MetaStepInfo meta_step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, MetaAdamState& state,
                       const MetaConfig& cfg, const Eigen::VectorXd& decay_mask);

/// EMA with y_0 = x_0. Throws on an empty series or coefficient outside [0, 1).
std::vector<double> ema_smooth(const std::vector<double>& series, double coefficient);

struct MetaStepRow {
  long step{0};
  double meta_loss{0};
  double smoothed{0};
  double grad_norm{0};
  int dropped_pairs{0};
  bool skipped{false};
  std::vector<double> eigen_abs;  // |lambda_i(A)| in descending order (NQM only)
};

struct Checkpoint {
  long step{0};
  Eigen::VectorXd theta;
};

struct MetaTrainRecord {
  std::vector<MetaStepRow> rows;
  std::vector<Checkpoint> checkpoints;
  Eigen::VectorXd theta;
  long skipped_steps{0};
  long dropped_pairs{0};
};

/// ES on the closed-form meta-loss over a dense preconditioner P (theta =
/// vec(P), starting at P = 0) with the nominal step `alpha` fixed. Rows carry
/// the exact meta-loss at the pre-step P and the eigenvalue magnitudes of A.
MetaTrainRecord meta_train_linear_nqm(const QuadraticTask<double>& task, double alpha,
                                      const MetaConfig& cfg, std::uint64_t seed);

/// PES meta-training of an MLP-based optimizer on `task`. Row meta-loss is
/// the mean antithetic segment loss of the step.
MetaTrainRecord meta_train(const InnerTask& task, const LearnedOptimizer& init,
                           const MetaConfig& cfg, std::uint64_t seed);

}  // namespace lopt
