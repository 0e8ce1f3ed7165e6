#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

namespace lopt::harness {

/// Invalid or inconsistent experiment configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  std::string experiment;
  std::uint64_t seed{0};
  std::string out_dir;  // empty: runs/<experiment>
  int threads{1};
  nlohmann::json params = nlohmann::json::object();

  bool operator==(const ExperimentConfig&) const = default;
};

const std::vector<std::string>& experiment_ids();

/// Complete parameter block with every default filled in.
nlohmann::json default_params(const std::string& experiment);

/// Overlays `cfg.params` on the defaults. Unknown keys and type mismatches
/// raise ConfigError.
ExperimentConfig resolve(const ExperimentConfig& cfg);

nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config_file(const std::string& path);

/// Typed lookup of a required key, raising ConfigError with the key name.
template <typename T>
T param(const nlohmann::json& block, const std::string& key) {
  if (!block.contains(key)) throw ConfigError("missing config key '" + key + "'");
  try {
    return block.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

Eigen::MatrixXd matrix_param(const nlohmann::json& block, const std::string& key);
Eigen::VectorXd vector_param(const nlohmann::json& block, const std::string& key);
nlohmann::json matrix_to_json(const Eigen::MatrixXd& m);

}  // namespace lopt::harness
