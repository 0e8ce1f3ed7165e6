#include "lopt/harness/config.hpp"

#include <fstream>
#include <sstream>

#include "lopt/nqm.hpp"

namespace lopt::harness {

using nlohmann::json;

namespace {

json nqm_block() {
  return {{"hessian", {{1.11, 0.596}, {0.596, 0.486}}},
          {"noise_cov", {{1.0, 0.0}, {0.0, 1.0}}},
          {"init_mean", {0.0, 0.0}},
          {"init_cov", {{10.0, 0.0}, {0.0, 10.0}}}};
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    // An integer default only accepts integers.
    return !(a.is_number_integer() && !b.is_number_integer());
  }
  return a.type() == b.type();
}

void overlay(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config block '" + path + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (!same_kind(slot, it.value()))
      throw ConfigError("config key '" + key + "' has the wrong type");
    if (slot.is_object()) {
      overlay(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

}  // namespace

const std::vector<std::string>& experiment_ids() {
  static const std::vector<std::string> ids{"stability-check", "nqm-closed-form",
                                            "variance-sweep",  "nqm-meta-train",
                                            "star-meta-train", "generalize-eval"};
  return ids;
}

json default_params(const std::string& experiment) {
  if (experiment == "stability-check") {
    return {{"hessian", {{1.11, 0.596}, {0.596, 0.486}}},
            {"alpha", 0.5},
            {"precond", {{0.0, 0.0}, {0.0, 0.0}}},
            {"d_bar", {1.0, 1.0}},
            {"certificates", {"nominal", "preconditioned", "robust"}}};
  }
  if (experiment == "nqm-closed-form") {
    return {{"nqm", nqm_block()},
            {"alpha_multipliers", {0.1, 0.3, 0.5, 0.7, 0.9}},
            {"precond", {{0.0, 0.0}, {0.0, 0.0}}},
            {"horizons", {1, 10, 50, 100}},
            {"mc_seeds", 10000}};
  }
  if (experiment == "variance-sweep") {
    return {{"nqm", nqm_block()},
            {"n_alpha", 50},
            {"horizons", {1, 2, 3, 4, 5, 10, 25, 50, 100, 150, 200, 250, 300, 400, 500, 600, 700,
                          800, 900, 1000}},
            {"seeds", 500},
            {"fd_step", 1e-5}};
  }
  if (experiment == "nqm-meta-train") {
    return {{"nqm", nqm_block()},
            {"alpha_multipliers", {0.0, 0.1, 0.2, 0.3, 0.4}},
            {"seeds", 5},
            {"horizon", 50},
            {"meta_steps", 1000},
            {"meta_lr", 3e-4},
            {"sigma", 0.01},
            {"n_pairs", 8},
            {"grad_clip", 1.0},
            {"smoothing", 0.95},
            {"sampling", "iid"},
            {"optimum_iterations", 20000},
            {"target_gap", 0.05},
            {"checkpoint_every", 0}};
  }
  if (experiment == "star-meta-train") {
    return {{"arms", {"star_wd0.1", "star_wd0.5", "blackbox", "hyperparam"}},
            {"seeds", 5},
            {"task",
             {{"name", "mlp_blobs"},
              {"layout", {2, 8, 8, 3}},
              {"activation", "relu"},
              {"batch_size", 32},
              {"horizon", 2000},
              {"data",
               {{"kind", "blobs"},
                {"input_dim", 2},
                {"classes", 3},
                {"points", 1024},
                {"noise", 0.6},
                {"seed", 17}}}}},
            {"meta",
             {{"sigma", 0.01},
              {"truncation", 50},
              {"n_pairs", 8},
              {"meta_lr", 1e-4},
              {"grad_clip", 1.0},
              {"meta_steps", 2000},
              {"smoothing", 0.98},
              {"checkpoint_every", 500},
              {"sampling", "iid"}}},
            {"features",
             {{"momentum_timescales", {0.1, 0.5, 0.9, 0.99, 0.999}},
              {"second_moment_timescales", {0.9, 0.99, 0.999}},
              {"primary_momentum", 2},
              {"primary_second_moment", 2},
              {"combination", "preconditioned_aggmo"},
              {"feature_eps", 1e-8},
              {"normalization_floor", 1e-8},
              {"learnable_gate", false}}},
            {"eval_seeds", 5},
            {"particle_loss_limit", 100.0}};
  }
  if (experiment == "generalize-eval") {
    return {{"checkpoint_dir", ""},
            {"arms", json::array()},
            {"eval_seeds", 5},
            {"horizon_multiplier", 5},
            {"loss_limit", kDivergenceThreshold},
            {"log_every", 50}};
  }
  throw ConfigError("unknown experiment '" + experiment + "'");
}

ExperimentConfig resolve(const ExperimentConfig& cfg) {
  ExperimentConfig out = cfg;
  out.params = default_params(cfg.experiment);
  overlay(out.params, cfg.params, "");
  if (out.threads < 1) throw ConfigError("threads must be >= 1");
  if (out.out_dir.empty()) out.out_dir = "runs/" + out.experiment;
  return out;
}

json to_json(const ExperimentConfig& cfg) {
  return {{"experiment", cfg.experiment},
          {"seed", cfg.seed},
          {"out_dir", cfg.out_dir},
          {"threads", cfg.threads},
          {"params", cfg.params}};
}

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k != "experiment" && k != "seed" && k != "out_dir" && k != "threads" && k != "params")
      throw ConfigError("unknown top-level config key '" + k + "'");
  }
  ExperimentConfig cfg;
  if (j.contains("experiment")) cfg.experiment = param<std::string>(j, "experiment");
  if (j.contains("seed")) cfg.seed = param<std::uint64_t>(j, "seed");
  if (j.contains("out_dir")) cfg.out_dir = param<std::string>(j, "out_dir");
  if (j.contains("threads")) cfg.threads = param<int>(j, "threads");
  if (j.contains("params")) cfg.params = j.at("params");
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return config_from_json(json::parse(ss.str()));
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
}

Eigen::MatrixXd matrix_param(const json& block, const std::string& key) {
  const auto rows = param<std::vector<std::vector<double>>>(block, key);
  if (rows.empty()) throw ConfigError("config key '" + key + "' is an empty matrix");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.front().size())
      throw ConfigError("config key '" + key + "' has ragged rows");
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

Eigen::VectorXd vector_param(const json& block, const std::string& key) {
  const auto v = param<std::vector<double>>(block, key);
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace lopt::harness
