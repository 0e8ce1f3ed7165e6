#include "lopt/harness/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>

#include "lopt/harness/serialize.hpp"
#include "lopt/meta_es.hpp"
#include "lopt/stability.hpp"

namespace lopt::harness {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

json finite_or_string(double x) {
  if (std::isfinite(x)) return x;
  return format_number(x);
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct MeanSe {
  double mean{0};
  double se{0};
};

MeanSe mean_se(const std::vector<double>& v) {
  MeanSe r;
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() < 2) return r;
  double ss = 0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  return r;
}

void say(std::ostream* log, const std::string& msg) {
  if (log) *log << msg << std::endl;
}

template <typename T>
T positive(const json& block, const std::string& key) {
  const T v = param<T>(block, key);
  if (!(v > T(0))) throw ConfigError("config key '" + key + "' must be positive");
  return v;
}

// ---------------------------------------------------------------- stability-check

RunResult run_stability_check(const ExperimentConfig& cfg, const fs::path& dir) {
  const json& p = cfg.params;
  const Eigen::MatrixXd h = matrix_param(p, "hessian");
  const Eigen::MatrixXd precond = matrix_param(p, "precond");
  const double alpha = param<double>(p, "alpha");
  const Eigen::VectorXd d_bar = vector_param(p, "d_bar");
  const auto certs = param<std::vector<std::string>>(p, "certificates");
  if (precond.rows() != h.rows() || precond.cols() != h.cols())
    throw ConfigError("precond must have the shape of hessian");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  std::optional<QuadraticTask<double>> task;
  try {
    task.emplace(h, Eigen::MatrixXd::Zero(h.rows(), h.cols()));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  json reports = json::array();
  CsvWriter eig(dir / "eigenvalues.csv", {"certificate", "index", "real", "imag", "modulus"});
  RunResult result;
  for (const auto& name : certs) {
    json entry{{"certificate", name}};
    std::optional<StabilityReport> report;
    try {
      if (name == "nominal") {
        report = certify_nominal(*task, LinearOptimizerSpec<double>{alpha, precond, false});
      } else if (name == "preconditioned") {
        report = certify_preconditioned(*task, LinearOptimizerSpec<double>{alpha, precond, true});
      } else if (name == "robust") {
        report = certify_robust(*task, LinearOptimizerSpec<double>{alpha, precond, false},
                                RobustBoundSpec{d_bar});
      } else {
        throw ConfigError("unknown certificate '" + name + "'");
      }
      entry["status"] = "ok";
    } catch (const CertificateHypothesisError& e) {
      report = e.report();
      entry["status"] = "hypothesis-failed";
      entry["error"] = e.what();
    } catch (const std::invalid_argument& e) {
      entry["status"] = "rejected";
      entry["error"] = e.what();
    }
    if (report) {
      entry["report"] = report_to_json(*report);
      for (std::size_t i = 0; i < report->eigenvalues.size(); ++i) {
        const auto l = report->eigenvalues[i];
        eig.row({name, static_cast<std::int64_t>(i), l.real(), l.imag(), std::abs(l)});
      }
      result.summary[name] = {{"status", entry["status"]},
                              {"certificate_verdict", to_string(report->certificate_verdict)},
                              {"brute_force_verdict", to_string(report->brute_force_verdict)},
                              {"spectral_radius", report->spectral_radius}};
    } else {
      result.summary[name] = {{"status", entry["status"]}};
    }
    reports.push_back(entry);
  }
  write_text_file(dir / "reports.json", json{{"reports", reports}}.dump(2) + "\n");
  return result;
}

// ---------------------------------------------------------------- nqm-closed-form

RunResult run_nqm_closed_form(const ExperimentConfig& cfg, const fs::path& dir, std::ostream* log) {
  const json& p = cfg.params;
  const auto task = nqm_from_params(p.at("nqm"));
  const Eigen::MatrixXd precond = matrix_param(p, "precond");
  if (precond.rows() != task.dim() || precond.cols() != task.dim())
    throw ConfigError("precond must match the NQM dimension");
  const auto mults = param<std::vector<double>>(p, "alpha_multipliers");
  const auto horizons = param<std::vector<int>>(p, "horizons");
  const int n_seeds = positive<int>(p, "mc_seeds");
  for (int t : horizons)
    if (t < 1) throw ConfigError("horizons must be >= 1");

  CsvWriter csv(dir / "closed_form.csv",
                {"alpha_multiplier", "alpha", "T", "spectral_radius", "expected_loss", "mc_mean",
                 "mc_standard_error", "z_score", "mc_diverged_fraction"});
  RunResult result;
  json rows = json::array();
  for (double m : mults) {
    const double alpha = m * 2.0 / task.lambda_max();
    const LinearOptimizerSpec<double> spec{alpha, precond, false};
    const double rho = spectral_radius(build_dynamics(task, spec).a);
    for (int horizon : horizons) {
      say(log, "closed form: alpha multiplier " + format_number(m) + ", T " + std::to_string(horizon));
      const double el = expected_loss(task, spec, horizon);
      std::vector<double> samples(static_cast<std::size_t>(n_seeds));
      parallel_for(n_seeds, cfg.threads, [&](int s) {
        const auto traj = rollout_mc(task, spec, horizon,
                                     derive_seed(cfg.seed, static_cast<std::uint64_t>(horizon),
                                                 static_cast<std::uint64_t>(s)));
        // The closed form has no 1/2 on the per-step loss.
        samples[static_cast<std::size_t>(s)] = traj.diverged ? kInf : 2.0 * traj.mean_loss();
      });
      std::vector<double> finite;
      for (double x : samples)
        if (std::isfinite(x)) finite.push_back(x);
      const MeanSe ms = mean_se(finite);
      const double z = (ms.mean - el) / ms.se;
      const double div = 1.0 - static_cast<double>(finite.size()) / n_seeds;
      csv.row({m, alpha, static_cast<std::int64_t>(horizon), rho, el, ms.mean, ms.se, z, div});
      rows.push_back({{"alpha_multiplier", m}, {"T", horizon}, {"z_score", finite_or_string(z)}});
    }
  }
  result.summary["rows"] = rows;
  return result;
}

// ---------------------------------------------------------------- variance-sweep

RunResult run_variance_sweep(const ExperimentConfig& cfg, const fs::path& dir, std::ostream* log) {
  const json& p = cfg.params;
  const auto task = nqm_from_params(p.at("nqm"));
  const int n_alpha = param<int>(p, "n_alpha");
  if (n_alpha < 2) throw ConfigError("n_alpha must be >= 2");
  const auto horizons = param<std::vector<int>>(p, "horizons");
  const int seeds = param<int>(p, "seeds");
  if (seeds < 2) throw ConfigError("seeds must be >= 2");
  const double fd_step = positive<double>(p, "fd_step");
  for (int t : horizons)
    if (t < 1) throw ConfigError("horizons must be >= 1");

  const double alpha_max = 2.0 / task.lambda_max();
  const int n_points = n_alpha * static_cast<int>(horizons.size());
  std::vector<GradientVarianceEstimate> est(static_cast<std::size_t>(n_points));
  say(log, "variance sweep: " + std::to_string(n_points) + " points");
  parallel_for(n_points, cfg.threads, [&](int k) {
    const int ia = k / static_cast<int>(horizons.size());
    const int horizon = horizons[static_cast<std::size_t>(k % static_cast<int>(horizons.size()))];
    const double alpha = alpha_max * ia / (n_alpha - 1);
    // Common random numbers across alpha for a given T.
    est[static_cast<std::size_t>(k)] = empirical_gradient_variance(
        task, LinearOptimizerSpec<double>::nominal(alpha, task.dim()), horizon, seeds,
        derive_seed(cfg.seed, static_cast<std::uint64_t>(horizon)), fd_step);
  });

  CsvWriter csv(dir / "variance_sweep.csv", {"alpha_multiplier", "alpha", "T", "trace_variance",
                                              "standard_error", "divergence_fraction"});
  for (int k = 0; k < n_points; ++k) {
    const int ia = k / static_cast<int>(horizons.size());
    const int horizon = horizons[static_cast<std::size_t>(k % static_cast<int>(horizons.size()))];
    const auto& e = est[static_cast<std::size_t>(k)];
    const double mult = static_cast<double>(ia) / (n_alpha - 1);
    csv.row({mult, mult * alpha_max, static_cast<std::int64_t>(horizon), e.trace_variance,
             e.standard_error, e.divergence_fraction});
  }
  RunResult result;
  result.summary["points"] = n_points;
  result.summary["alpha_max"] = alpha_max;
  return result;
}

// ---------------------------------------------------------------- nqm-meta-train

RunResult run_nqm_meta_train(const ExperimentConfig& cfg, const fs::path& dir, std::ostream* log) {
  const json& p = cfg.params;
  const auto task = nqm_from_params(p.at("nqm"));
  const auto mults = param<std::vector<double>>(p, "alpha_multipliers");
  const int n_seeds = positive<int>(p, "seeds");
  MetaConfig mc;
  mc.horizon = param<int>(p, "horizon");
  mc.truncation = mc.horizon;
  mc.meta_steps = param<int>(p, "meta_steps");
  mc.meta_lr = param<double>(p, "meta_lr");
  mc.sigma = param<double>(p, "sigma");
  mc.n_pairs = param<int>(p, "n_pairs");
  mc.grad_clip = param<double>(p, "grad_clip");
  mc.smoothing = param<double>(p, "smoothing");
  mc.checkpoint_every = param<int>(p, "checkpoint_every");
  const double target_gap = param<double>(p, "target_gap");
  const int opt_iters = param<int>(p, "optimum_iterations");
  try {
    mc.sampling = es_sampling_from_string(param<std::string>(p, "sampling"));
    mc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (mc.meta_steps < 1) throw ConfigError("meta_steps must be >= 1");

  say(log, "closed-form optimum by finite-difference descent");
  const ClosedFormOptimum optimum = closed_form_optimum(task, mc.horizon, opt_iters);

  const int n_runs = static_cast<int>(mults.size()) * n_seeds;
  std::vector<MetaTrainRecord> recs(static_cast<std::size_t>(n_runs));
  parallel_for(n_runs, cfg.threads, [&](int k) {
    const double m = mults[static_cast<std::size_t>(k / n_seeds)];
    recs[static_cast<std::size_t>(k)] = meta_train_linear_nqm(
        task, m * 2.0 / task.lambda_max(), mc,
        derive_seed(cfg.seed, static_cast<std::uint64_t>(k % n_seeds)));
  });

  const auto n = static_cast<Eigen::Index>(recs.front().rows.front().eigen_abs.size());
  std::vector<std::string> header{"alpha_multiplier", "alpha", "seed", "step", "meta_loss",
                                  "smoothed_meta_loss"};
  for (Eigen::Index i = 0; i < n; ++i) header.push_back("eig_abs_" + std::to_string(i));
  header.insert(header.end(), {"grad_norm", "dropped_pairs"});
  CsvWriter csv(dir / "meta_train.csv", header);

  std::vector<std::string> curve_header{"alpha_multiplier", "step", "mean_meta_loss",
                                        "standard_error", "smoothed_mean", "smoothed_lower",
                                        "smoothed_upper"};
  for (Eigen::Index i = 0; i < n; ++i) curve_header.push_back("mean_eig_abs_" + std::to_string(i));
  CsvWriter curves(dir / "curves.csv", curve_header);

  CsvWriter summary(dir / "summary.csv",
                    {"alpha_multiplier", "alpha", "median_final_smoothed", "median_final_meta_loss",
                     "optimum", "relative_gap", "within_target", "stability_violations",
                     "diverged_seeds"});
  RunResult result;
  result.summary["optimum"] = optimum.loss;
  result.summary["optimum_gain"] = matrix_to_json(optimum.gain);
  json arms = json::array();
  bool any_finite = false;
  for (std::size_t a = 0; a < mults.size(); ++a) {
    const double m = mults[a];
    const double alpha = m * 2.0 / task.lambda_max();
    std::vector<double> final_smoothed, final_raw;
    int violations = 0, diverged = 0;
    for (int s = 0; s < n_seeds; ++s) {
      const auto& rec = recs[a * static_cast<std::size_t>(n_seeds) + static_cast<std::size_t>(s)];
      for (const auto& row : rec.rows) {
        std::vector<CsvField> f{m, alpha, static_cast<std::int64_t>(s),
                                static_cast<std::int64_t>(row.step), row.meta_loss, row.smoothed};
        for (double e : row.eigen_abs) f.emplace_back(e);
        f.emplace_back(row.grad_norm);
        f.emplace_back(static_cast<std::int64_t>(row.dropped_pairs));
        csv.row(f);
      }
      // Wherever the smoothed loss fell over a 100-step window, every
      // eigenvalue in that window should lie inside the unit disc.
      for (std::size_t t = 100; t < rec.rows.size(); ++t) {
        if (!(rec.rows[t].smoothed < rec.rows[t - 100].smoothed)) continue;
        for (std::size_t u = t - 100; u <= t; ++u)
          if (!rec.rows[u].eigen_abs.empty() && rec.rows[u].eigen_abs.front() > 1.0 + 1e-6) {
            ++violations;
            break;
          }
      }
      final_smoothed.push_back(rec.rows.back().smoothed);
      final_raw.push_back(rec.rows.back().meta_loss);
      if (!std::isfinite(rec.rows.back().meta_loss)) ++diverged;
      else any_finite = true;
    }
    // Seed-averaged curves with +-1 standard error, each EMA smoothed.
    const std::size_t steps = recs[a * static_cast<std::size_t>(n_seeds)].rows.size();
    std::vector<double> mean(steps), se(steps), lo(steps), hi(steps);
    std::vector<std::vector<double>> eig(static_cast<std::size_t>(n), std::vector<double>(steps, 0.0));
    for (std::size_t t = 0; t < steps; ++t) {
      std::vector<double> v;
      for (int s = 0; s < n_seeds; ++s) {
        const auto& row = recs[a * static_cast<std::size_t>(n_seeds) + static_cast<std::size_t>(s)].rows[t];
        v.push_back(row.meta_loss);
        for (Eigen::Index i = 0; i < n; ++i)
          eig[static_cast<std::size_t>(i)][t] += row.eigen_abs[static_cast<std::size_t>(i)] / n_seeds;
      }
      const MeanSe ms = mean_se(v);
      mean[t] = ms.mean;
      se[t] = ms.se;
      lo[t] = ms.mean - ms.se;
      hi[t] = ms.mean + ms.se;
    }
    const bool finite_curve = std::all_of(mean.begin(), mean.end(), [](double x) { return std::isfinite(x); });
    const auto sm = finite_curve ? ema_smooth(mean, mc.smoothing) : mean;
    const auto slo = finite_curve ? ema_smooth(lo, mc.smoothing) : lo;
    const auto shi = finite_curve ? ema_smooth(hi, mc.smoothing) : hi;
    for (std::size_t t = 0; t < steps; ++t) {
      std::vector<CsvField> f{m, static_cast<std::int64_t>(t), mean[t], se[t], sm[t], slo[t], shi[t]};
      for (Eigen::Index i = 0; i < n; ++i) f.emplace_back(eig[static_cast<std::size_t>(i)][t]);
      curves.row(f);
    }

    const double med = median(final_smoothed);
    const double gap = med / optimum.loss - 1.0;
    summary.row({m, alpha, med, median(final_raw), optimum.loss, gap,
                 static_cast<std::int64_t>(gap <= target_gap), static_cast<std::int64_t>(violations),
                 static_cast<std::int64_t>(diverged)});
    arms.push_back({{"alpha_multiplier", m},
                    {"median_final_smoothed", finite_or_string(med)},
                    {"relative_gap", finite_or_string(gap)},
                    {"stability_violations", violations},
                    {"diverged_seeds", diverged}});
  }
  result.summary["arms"] = arms;
  if (!any_finite) result.exit_code = kExitAllDiverged;
  return result;
}

// ---------------------------------------------------------------- star-meta-train

MetaConfig meta_config_from(const json& m, int horizon, double wd, double loss_limit) {
  MetaConfig mc;
  mc.loss_limit = loss_limit;
  mc.sigma = param<double>(m, "sigma");
  mc.truncation = param<int>(m, "truncation");
  mc.horizon = horizon;
  mc.n_pairs = param<int>(m, "n_pairs");
  mc.meta_lr = param<double>(m, "meta_lr");
  mc.grad_clip = param<double>(m, "grad_clip");
  mc.meta_steps = param<int>(m, "meta_steps");
  mc.smoothing = param<double>(m, "smoothing");
  mc.checkpoint_every = param<int>(m, "checkpoint_every");
  mc.weight_decay_multiplier = wd;
  try {
    mc.sampling = es_sampling_from_string(param<std::string>(m, "sampling"));
    mc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return mc;
}

std::vector<std::uint64_t> eval_seed_list(std::uint64_t seed, int n, std::uint64_t tag) {
  std::vector<std::uint64_t> out;
  for (int i = 0; i < n; ++i) out.push_back(derive_seed(seed, tag, static_cast<std::uint64_t>(i)));
  return out;
}

std::string checkpoint_name(const std::string& arm, int seed, const std::string& suffix) {
  return arm + "_seed" + std::to_string(seed) + "_" + suffix + ".json";
}

RunResult run_star_meta_train(const ExperimentConfig& cfg, const fs::path& dir, std::ostream* log) {
  const json& p = cfg.params;
  const auto arm_names = param<std::vector<std::string>>(p, "arms");
  if (arm_names.empty()) throw ConfigError("arms must not be empty");
  std::vector<ArmSpec> arms;
  for (const auto& a : arm_names) arms.push_back(parse_arm(a));
  const int n_seeds = positive<int>(p, "seeds");
  const MlpTaskSpec task_spec = task_spec_from_params(p.at("task"));
  const FeatureConfig features = features_from_params(p.at("features"));
  const bool gate = param<bool>(p.at("features"), "learnable_gate");
  const int n_eval = positive<int>(p, "eval_seeds");
  // Segment losses above this drop the particle pair during training only.
  const double loss_limit = positive<double>(p, "particle_loss_limit");
  const MlpTask task(task_spec);
  for (const auto& a : arms) meta_config_from(p.at("meta"), task_spec.horizon, a.weight_decay, loss_limit);

  fs::create_directories(dir / "checkpoints");
  const auto eval_seeds = eval_seed_list(cfg.seed, n_eval, 0xE7A1);

  struct Job {
    MetaTrainRecord rec;
    double initial{0};
    double final_loss{0};
  };
  const int n_jobs = static_cast<int>(arms.size()) * n_seeds;
  std::vector<Job> jobs(static_cast<std::size_t>(n_jobs));
  say(log, "star meta-train: " + std::to_string(n_jobs) + " runs");
  parallel_for(n_jobs, cfg.threads, [&](int k) {
    const ArmSpec& arm = arms[static_cast<std::size_t>(k / n_seeds)];
    const int s = k % n_seeds;
    const MetaConfig mc = meta_config_from(p.at("meta"), task_spec.horizon, arm.weight_decay, loss_limit);
    // Same MLP trunk and task stream for every arm at a given seed index.
    const LearnedOptimizer init = LearnedOptimizer::create(
        arm.kind, features, derive_seed(cfg.seed, 0x1417, static_cast<std::uint64_t>(s)), gate);
    Job& job = jobs[static_cast<std::size_t>(k)];
    job.rec = meta_train(task, init, mc, derive_seed(cfg.seed, static_cast<std::uint64_t>(s)));
    job.initial = evaluate_meta_loss(task, init, eval_seeds, task_spec.horizon);
    job.final_loss = evaluate_meta_loss(task, init.with_theta(job.rec.theta), eval_seeds, task_spec.horizon);
    for (const auto& c : job.rec.checkpoints) {
      write_text_file(dir / "checkpoints" / checkpoint_name(arm.name, s, "step" + std::to_string(c.step)),
                      to_checkpoint_json(init.with_theta(c.theta).params, to_string(arm.kind)) + "\n");
    }
    write_text_file(dir / "checkpoints" / checkpoint_name(arm.name, s, "final"),
                    to_checkpoint_json(init.with_theta(job.rec.theta).params, to_string(arm.kind)) + "\n");
  });

  const NominalConfig& nominal = features.nominal;
  double nominal_loss = 0, noop_loss = 0;
  for (std::uint64_t s : eval_seeds) {
    nominal_loss += evaluate_reference(task, ReferenceOptimizer::kNominal, nominal, ScaleConstants{}.beta1, s,
                                       task_spec.horizon).mean_loss();
    noop_loss += evaluate_reference(task, ReferenceOptimizer::kNoOp, nominal, ScaleConstants{}.beta1, s,
                                    task_spec.horizon).mean_loss();
  }
  nominal_loss /= n_eval;
  noop_loss /= n_eval;

  CsvWriter train(dir / "meta_train.csv", {"arm", "seed", "step", "meta_loss", "smoothed_meta_loss",
                                           "grad_norm", "dropped_pairs", "skipped"});
  std::ofstream records(dir / "meta_train.jsonl", std::ios::binary);
  CsvWriter eval(dir / "eval.csv", {"arm", "seed", "initial_meta_loss", "final_meta_loss"});
  CsvWriter summary(dir / "summary.csv", {"arm", "weight_decay", "median_initial_meta_loss",
                                          "median_final_meta_loss", "diverged_seeds"});
  RunResult result;
  result.summary["nominal_meta_loss"] = finite_or_string(nominal_loss);
  result.summary["noop_meta_loss"] = finite_or_string(noop_loss);
  result.summary["feature_count"] = features.feature_count();
  result.summary["feature_fingerprint"] = features.fingerprint();
  result.summary["task_fingerprint"] = task.fingerprint();
  json arm_json = json::array();
  bool any_finite = false;
  for (std::size_t a = 0; a < arms.size(); ++a) {
    std::vector<double> initial, final_losses;
    int diverged = 0;
    for (int s = 0; s < n_seeds; ++s) {
      const Job& job = jobs[a * static_cast<std::size_t>(n_seeds) + static_cast<std::size_t>(s)];
      for (const auto& row : job.rec.rows) {
        train.row({arms[a].name, static_cast<std::int64_t>(s), static_cast<std::int64_t>(row.step),
                   row.meta_loss, row.smoothed, row.grad_norm,
                   static_cast<std::int64_t>(row.dropped_pairs), static_cast<std::int64_t>(row.skipped)});
        records << json{{"arm", arms[a].name},
                        {"seed", s},
                        {"step", row.step},
                        {"meta_loss", finite_or_string(row.meta_loss)},
                        {"smoothed_meta_loss", finite_or_string(row.smoothed)},
                        {"grad_norm", finite_or_string(row.grad_norm)},
                        {"divergence_count", row.dropped_pairs},
                        {"skipped", row.skipped}}.dump()
                << '\n';
      }
      eval.row({arms[a].name, static_cast<std::int64_t>(s), job.initial, job.final_loss});
      initial.push_back(job.initial);
      final_losses.push_back(job.final_loss);
      if (std::isfinite(job.final_loss)) any_finite = true;
      else ++diverged;
    }
    summary.row({arms[a].name, arms[a].weight_decay, median(initial), median(final_losses),
                 static_cast<std::int64_t>(diverged)});
    const LearnedOptimizer probe = LearnedOptimizer::create(arms[a].kind, features, 0, gate);
    arm_json.push_back({{"arm", arms[a].name},
                        {"kind", to_string(arms[a].kind)},
                        {"weight_decay", arms[a].weight_decay},
                        {"parameter_count", probe.params.parameter_count()},
                        {"median_initial_meta_loss", finite_or_string(median(initial))},
                        {"median_final_meta_loss", finite_or_string(median(final_losses))},
                        {"diverged_seeds", diverged}});
  }
  result.summary["arms"] = arm_json;
  if (!any_finite) result.exit_code = kExitAllDiverged;
  return result;
}

// ---------------------------------------------------------------- generalize-eval

RunResult run_generalize_eval(const ExperimentConfig& cfg, const fs::path& dir, std::ostream* log) {
  const json& p = cfg.params;
  const fs::path ckpt_dir = param<std::string>(p, "checkpoint_dir");
  if (ckpt_dir.empty()) throw ConfigError("checkpoint_dir is required");
  if (!fs::exists(ckpt_dir / "config.json"))
    throw ConfigError("checkpoint_dir has no config.json: " + ckpt_dir.string());
  const ExperimentConfig train_cfg =
      resolve(config_from_json(json::parse(read_text_file(ckpt_dir / "config.json"))));
  if (train_cfg.experiment != "star-meta-train")
    throw ConfigError("checkpoint_dir does not hold a star-meta-train run");
  const json& tp = train_cfg.params;
  const MlpTaskSpec base = task_spec_from_params(tp.at("task"));
  const FeatureConfig features = features_from_params(tp.at("features"));
  const int train_seeds = param<int>(tp, "seeds");
  auto arm_names = param<std::vector<std::string>>(p, "arms");
  if (arm_names.empty()) arm_names = param<std::vector<std::string>>(tp, "arms");
  const int n_eval = positive<int>(p, "eval_seeds");
  const int mult = positive<int>(p, "horizon_multiplier");
  const double loss_limit = positive<double>(p, "loss_limit");
  const int log_every = positive<int>(p, "log_every");
  const int horizon = mult * base.horizon;

  std::vector<LearnedOptimizer> opts;  // arm-major, then training seed
  for (const auto& name : arm_names) {
    const ArmSpec arm = parse_arm(name);
    for (int s = 0; s < train_seeds; ++s) {
      const fs::path file = ckpt_dir / "checkpoints" / checkpoint_name(name, s, "final");
      if (!fs::exists(file)) throw ConfigError("missing checkpoint " + file.string());
      LearnedOptimizer opt;
      std::string kind;
      try {
        opt.params = from_checkpoint_json(read_text_file(file), features.fingerprint(), &kind);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(file.string() + ": " + e.what());
      }
      opt.kind = optimizer_kind_from_string(kind);
      if (opt.kind != arm.kind) throw ConfigError(file.string() + ": kind does not match arm " + name);
      opt.features = features;
      opts.push_back(std::move(opt));
    }
  }
  const auto suite = generalization_suite(base, base.horizon);
  const auto eval_seeds = eval_seed_list(cfg.seed, n_eval, 0x6E);
  const int n_tasks = static_cast<int>(suite.size());
  const int n_jobs = static_cast<int>(opts.size()) * n_tasks * n_eval;
  std::vector<EvalCurve> curves(static_cast<std::size_t>(n_jobs));
  say(log, "generalize eval: " + std::to_string(n_jobs) + " runs of " + std::to_string(horizon) + " steps");
  parallel_for(n_jobs, cfg.threads, [&](int k) {
    const int e = k % n_eval;
    const int t = (k / n_eval) % n_tasks;
    const int o = k / (n_eval * n_tasks);
    curves[static_cast<std::size_t>(k)] =
        evaluate_run(*suite[static_cast<std::size_t>(t)], opts[static_cast<std::size_t>(o)],
                     eval_seeds[static_cast<std::size_t>(e)], horizon, loss_limit);
  });

  CsvWriter per_step(dir / "curves.csv",
                     {"arm", "checkpoint_seed", "task", "eval_seed", "step", "loss", "diverged"});
  CsvWriter summary(dir / "summary.csv", {"arm", "task", "runs", "diverged_runs", "divergence_fraction",
                                          "median_final_loss", "mean_steps_to_divergence"});
  RunResult result;
  json rows = json::array();
  bool any_finite = false;
  for (std::size_t a = 0; a < arm_names.size(); ++a) {
    for (int t = 0; t < n_tasks; ++t) {
      std::vector<double> finals;
      int diverged = 0;
      double steps_to_div = 0;
      for (int s = 0; s < train_seeds; ++s) {
        for (int e = 0; e < n_eval; ++e) {
          const int o = static_cast<int>(a) * train_seeds + s;
          const EvalCurve& c = curves[static_cast<std::size_t>((o * n_tasks + t) * n_eval + e)];
          const std::string& tname = suite[static_cast<std::size_t>(t)]->name();
          for (std::size_t i = 0; i < c.losses.size(); ++i) {
            if ((i + 1) % static_cast<std::size_t>(log_every) == 0 || i == 0 ||
                (i + 1 == c.losses.size() && !c.diverged))
              per_step.row({arm_names[a], static_cast<std::int64_t>(s), tname, static_cast<std::int64_t>(e),
                            static_cast<std::int64_t>(i), c.losses[i], static_cast<std::int64_t>(0)});
          }
          if (c.diverged) {
            ++diverged;
            steps_to_div += c.diverged_at;
            per_step.row({arm_names[a], static_cast<std::int64_t>(s), tname, static_cast<std::int64_t>(e),
                          static_cast<std::int64_t>(c.diverged_at), std::string(), static_cast<std::int64_t>(1)});
          } else {
            const std::size_t tail = std::min<std::size_t>(50, c.losses.size());
            double f = 0;
            for (std::size_t i = c.losses.size() - tail; i < c.losses.size(); ++i) f += c.losses[i];
            finals.push_back(f / static_cast<double>(tail));
            any_finite = true;
          }
        }
      }
      const int runs = train_seeds * n_eval;
      const double frac = static_cast<double>(diverged) / runs;
      const std::string& tname = suite[static_cast<std::size_t>(t)]->name();
      summary.row({arm_names[a], tname, static_cast<std::int64_t>(runs), static_cast<std::int64_t>(diverged),
                   frac, finals.empty() ? CsvField(std::string()) : CsvField(median(finals)),
                   diverged ? CsvField(steps_to_div / diverged) : CsvField(std::string())});
      rows.push_back({{"arm", arm_names[a]},
                      {"task", tname},
                      {"task_fingerprint", suite[static_cast<std::size_t>(t)]->fingerprint()},
                      {"divergence_fraction", frac},
                      {"median_final_loss", finals.empty() ? json(nullptr) : json(median(finals))}});
    }
  }
  result.summary["horizon"] = horizon;
  result.summary["rows"] = rows;
  if (!any_finite) result.exit_code = kExitAllDiverged;
  return result;
}

}  // namespace

QuadraticTask<double> nqm_from_params(const json& block) {
  try {
    return QuadraticTask<double>(matrix_param(block, "hessian"), matrix_param(block, "noise_cov"),
                                 vector_param(block, "init_mean"), matrix_param(block, "init_cov"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("nqm: ") + e.what());
  }
}

ClosedFormOptimum closed_form_optimum(const QuadraticTask<double>& task, int horizon,
                                      int iterations) {
  const Eigen::Index n = task.dim();
  // The loss depends on alpha I + P only, so descend over P with alpha = 0.
  LinearOptimizerSpec<double> spec{0.0, Eigen::MatrixXd::Identity(n, n) / task.lambda_max(), false};
  double f = expected_loss(task, spec, horizon);
  double lr = 0.05;
  for (int it = 0; it < iterations && lr > 1e-14; ++it) {
    const auto g = meta_gradient_fd(task, spec, horizon);
    while (lr > 1e-14) {
      LinearOptimizerSpec<double> trial = spec;
      trial.precond -= lr * g.d_precond;
      const double ft = expected_loss(task, trial, horizon);
      if (ft < f) {
        spec = trial;
        f = ft;
        lr *= 1.2;
        break;
      }
      lr *= 0.5;
    }
  }
  return {f, spec.precond};
}

ArmSpec parse_arm(const std::string& name) {
  ArmSpec arm;
  arm.name = name;
  std::string kind = name;
  const auto pos = name.find("_wd");
  if (pos != std::string::npos) {
    kind = name.substr(0, pos);
    const std::string num = name.substr(pos + 3);
    std::size_t used = 0;
    try {
      arm.weight_decay = std::stod(num, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (num.empty() || used != num.size() || !(arm.weight_decay >= 0.0))
      throw ConfigError("bad weight decay in arm '" + name + "'");
  }
  try {
    arm.kind = optimizer_kind_from_string(kind);
  } catch (const std::invalid_argument&) {
    throw ConfigError("unknown arm '" + name + "'");
  }
  if (arm.kind == OptimizerKind::kLinearNqm)
    throw ConfigError("arm '" + name + "' belongs to nqm-meta-train");
  return arm;
}

FeatureConfig features_from_params(const json& block) {
  FeatureConfig f;
  f.nominal.momentum_timescales = param<std::vector<double>>(block, "momentum_timescales");
  f.nominal.second_moment_timescales = param<std::vector<double>>(block, "second_moment_timescales");
  f.nominal.primary_momentum = param<std::size_t>(block, "primary_momentum");
  f.nominal.primary_second_moment = param<std::size_t>(block, "primary_second_moment");
  const auto comb = param<std::string>(block, "combination");
  if (comb == "preconditioned_aggmo") {
    f.nominal.combination = NominalCombination::kPreconditionedAggMo;
  } else if (comb == "average") {
    f.nominal.combination = NominalCombination::kAverage;
  } else {
    throw ConfigError("unknown nominal combination '" + comb + "'");
  }
  f.feature_eps = positive<double>(block, "feature_eps");
  f.normalization_floor = positive<double>(block, "normalization_floor");
  try {
    f.nominal.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return f;
}

MlpTaskSpec task_spec_from_params(const json& block) {
  MlpTaskSpec s;
  s.name = param<std::string>(block, "name");
  s.layout = param<std::vector<int>>(block, "layout");
  s.batch_size = param<int>(block, "batch_size");
  s.horizon = param<int>(block, "horizon");
  const json& d = block.at("data");
  try {
    s.activation = activation_from_string(param<std::string>(block, "activation"));
    s.data.kind = dataset_kind_from_string(param<std::string>(d, "kind"));
    s.data.input_dim = param<int>(d, "input_dim");
    s.data.classes = param<int>(d, "classes");
    s.data.points = param<int>(d, "points");
    s.data.noise = param<double>(d, "noise");
    s.data.seed = param<std::uint64_t>(d, "seed");
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return s;
}

RunResult run_experiment(const ExperimentConfig& raw, std::ostream* log) {
  const ExperimentConfig cfg = resolve(raw);
  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  write_text_file(dir / "config.json", to_json(cfg).dump(2) + "\n");
  const auto start = std::chrono::steady_clock::now();
  RunResult result;
  if (cfg.experiment == "stability-check") {
    result = run_stability_check(cfg, dir);
  } else if (cfg.experiment == "nqm-closed-form") {
    result = run_nqm_closed_form(cfg, dir, log);
  } else if (cfg.experiment == "variance-sweep") {
    result = run_variance_sweep(cfg, dir, log);
  } else if (cfg.experiment == "nqm-meta-train") {
    result = run_nqm_meta_train(cfg, dir, log);
  } else if (cfg.experiment == "star-meta-train") {
    result = run_star_meta_train(cfg, dir, log);
  } else {
    result = run_generalize_eval(cfg, dir, log);
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.run_dir = dir;
  result.summary["experiment"] = cfg.experiment;
  result.summary["exit_code"] = result.exit_code;
  write_text_file(dir / "summary.json", result.summary.dump(2) + "\n");
  write_text_file(dir / "timing.json", json{{"wall_clock_seconds", seconds}}.dump(2) + "\n");
  return result;
}

}  // namespace lopt::harness
