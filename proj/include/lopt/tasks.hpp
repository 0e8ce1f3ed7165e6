#pragma once

// Inner tasks: the noisy quadratic adapter and small synthetic-data MLP
// classifiers with hand-written backprop.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lopt/nqm.hpp"

namespace lopt {

/// One named tensor inside a flat parameter vector, stored column-major.
struct TensorSpec {
  std::string name;
  Eigen::Index rows{0};
  Eigen::Index cols{1};
  Eigen::Index offset{0};

  Eigen::Index size() const { return rows * cols; }
};

struct LossAndGrad {
  double loss{0};
  Eigen::VectorXd grad;
};

class InnerTask {
 public:
  virtual ~InnerTask() = default;

  virtual std::string name() const = 0;
  virtual const std::vector<TensorSpec>& tensors() const = 0;
  /// Default number of inner steps an optimizer is run for on this task.
  virtual int horizon() const = 0;
  virtual Eigen::VectorXd init_params(std::uint64_t seed) const = 0;
  virtual LossAndGrad loss_and_grad(const Eigen::VectorXd& params,
                                    std::uint64_t batch_seed) const = 0;
  /// Canonical JSON description of the task, including its data generator.
  virtual std::string describe() const = 0;

  Eigen::Index parameter_count() const;
  /// Hex digest of describe().
  std::string fingerprint() const;

 protected:
  /// Throws std::logic_error unless tensors tile [0, parameter_count) in order.
  static void check_layout(const std::vector<TensorSpec>& tensors);
};

/// The NQM as an inner task: the batch seed draws xi and the gradient is
/// H (phi - xi).
class QuadraticInnerTask final : public InnerTask {
 public:
  QuadraticInnerTask(QuadraticTask<double> task, int horizon);

  std::string name() const override { return "nqm"; }
  const std::vector<TensorSpec>& tensors() const override { return tensors_; }
  int horizon() const override { return horizon_; }
  Eigen::VectorXd init_params(std::uint64_t seed) const override;
  LossAndGrad loss_and_grad(const Eigen::VectorXd& params,
                            std::uint64_t batch_seed) const override;
  std::string describe() const override;

  /// The xi drawn for a batch seed.
  Eigen::VectorXd minimum(std::uint64_t batch_seed) const;
  const QuadraticTask<double>& quadratic() const { return task_; }

 private:
  QuadraticTask<double> task_;
  int horizon_;
  std::vector<TensorSpec> tensors_;
};

enum class DatasetKind { kBlobs, kRings };
enum class Activation { kRelu, kTanh };

std::string to_string(DatasetKind kind);
std::string to_string(Activation act);
DatasetKind dataset_kind_from_string(const std::string& s);
Activation activation_from_string(const std::string& s);

struct DatasetSpec {
  DatasetKind kind{DatasetKind::kBlobs};
  int input_dim{2};
  int classes{3};
  int points{1024};
  double noise{0.6};
  std::uint64_t seed{0};

  void validate() const;
};

/// Class-balanced synthetic data: point i has label i % classes.
struct Dataset {
  Eigen::MatrixXd x;  // points x input_dim
  std::vector<int> y;
};

Dataset make_dataset(const DatasetSpec& spec);

struct MlpTaskSpec {
  std::string name{"mlp"};
  std::vector<int> layout{2, 8, 8, 3};  // input, hidden..., output
  Activation activation{Activation::kRelu};
  DatasetSpec data;
  int batch_size{32};
  int horizon{2000};

  void validate() const;
};

/// Softmax cross-entropy MLP classifier. Tensors are w0, b0, w1, b1, ... with
/// w_l of shape fan_in x fan_out.
class MlpTask final : public InnerTask {
 public:
  explicit MlpTask(MlpTaskSpec spec);

  std::string name() const override { return spec_.name; }
  const std::vector<TensorSpec>& tensors() const override { return tensors_; }
  int horizon() const override { return spec_.horizon; }
  /// Weights N(0, gain^2 / fan_in) with gain sqrt(2) for relu and 1 for tanh; zero biases.
  Eigen::VectorXd init_params(std::uint64_t seed) const override;
  LossAndGrad loss_and_grad(const Eigen::VectorXd& params,
                            std::uint64_t batch_seed) const override;
  std::string describe() const override;

  /// Loss and gradient on explicit rows of the dataset.
  LossAndGrad loss_and_grad_on(const Eigen::VectorXd& params,
                               const std::vector<int>& rows) const;
  std::vector<int> batch_rows(std::uint64_t batch_seed) const;

  const MlpTaskSpec& spec() const { return spec_; }
  const Dataset& data() const { return data_; }

 private:
  MlpTaskSpec spec_;
  Dataset data_;
  std::vector<TensorSpec> tensors_;
};

/// The meta-training task of the toy experiments.
MlpTaskSpec default_mlp_task_spec();

/// (a) the base task, (b) a deeper and wider network, (c) tanh, (d) ring
/// data, (e) the base task with five times the horizon. `train_horizon`
/// overrides the base horizon.
std::vector<std::shared_ptr<const InnerTask>> generalization_suite(const MlpTaskSpec& base,
                                                                   int train_horizon);

}  // namespace lopt
