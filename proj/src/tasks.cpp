#include "lopt/tasks.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "lopt/rng.hpp"

namespace lopt {

namespace {

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

Eigen::Index InnerTask::parameter_count() const {
  const auto& ts = tensors();
  return ts.empty() ? 0 : ts.back().offset + ts.back().size();
}

std::string InnerTask::fingerprint() const { return fnv1a_hex(describe()); }

void InnerTask::check_layout(const std::vector<TensorSpec>& tensors) {
  Eigen::Index offset = 0;
  for (const auto& t : tensors) {
    if (t.offset != offset || t.rows < 1 || t.cols < 1)
      throw std::logic_error("InnerTask: tensor layout does not tile the parameter vector");
    offset += t.size();
  }
}

QuadraticInnerTask::QuadraticInnerTask(QuadraticTask<double> task, int horizon)
    : task_(std::move(task)), horizon_(horizon) {
  if (horizon_ < 1) throw std::invalid_argument("QuadraticInnerTask: horizon must be >= 1");
  tensors_.push_back({"phi", task_.dim(), 1, 0});
  check_layout(tensors_);
}

Eigen::VectorXd QuadraticInnerTask::init_params(std::uint64_t seed) const {
  CounterRng rng(seed, rng_stream::kInitState);
  return task_.init_mean() + task_.init_factor() * rng.normal_vector(task_.dim());
}

Eigen::VectorXd QuadraticInnerTask::minimum(std::uint64_t batch_seed) const {
  CounterRng rng(batch_seed, rng_stream::kMinimum);
  return task_.noise_factor() * rng.normal_vector(task_.dim());
}

LossAndGrad QuadraticInnerTask::loss_and_grad(const Eigen::VectorXd& params,
                                              std::uint64_t batch_seed) const {
  if (params.size() != task_.dim())
    throw std::invalid_argument("QuadraticInnerTask: parameter dimension mismatch");
  const Eigen::VectorXd r = params - minimum(batch_seed);
  LossAndGrad out;
  out.grad = task_.hessian() * r;
  out.loss = 0.5 * r.dot(out.grad);
  return out;
}

std::string QuadraticInnerTask::describe() const {
  auto mat = [](const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      std::vector<double> r(static_cast<std::size_t>(m.cols()));
      for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
      rows.push_back(r);
    }
    return rows;
  };
  nlohmann::json j;
  j["task"] = "nqm";
  j["hessian"] = mat(task_.hessian());
  j["noise_cov"] = mat(task_.noise_cov());
  j["init_mean"] = mat(task_.init_mean());
  j["init_cov"] = mat(task_.init_cov());
  j["horizon"] = horizon_;
  return j.dump();
}

std::string to_string(DatasetKind kind) { return kind == DatasetKind::kBlobs ? "blobs" : "rings"; }
std::string to_string(Activation act) { return act == Activation::kRelu ? "relu" : "tanh"; }

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "blobs") return DatasetKind::kBlobs;
  if (s == "rings") return DatasetKind::kRings;
  throw std::invalid_argument("unknown dataset kind '" + s + "'");
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

void DatasetSpec::validate() const {
  if (input_dim < 2) throw std::invalid_argument("DatasetSpec: input_dim must be >= 2");
  if (classes < 2) throw std::invalid_argument("DatasetSpec: classes must be >= 2");
  if (points < classes || points > 4096)
    throw std::invalid_argument("DatasetSpec: points must lie in [classes, 4096]");
  if (!(noise >= 0.0)) throw std::invalid_argument("DatasetSpec: noise must be >= 0");
}

Dataset make_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset d;
  d.x.resize(spec.points, spec.input_dim);
  d.y.resize(static_cast<std::size_t>(spec.points));
  CounterRng rng(spec.seed, 0);
  // Blob centres sit on a circle in the first two dimensions with random
  // offsets in any further ones.
  Eigen::MatrixXd centres(spec.classes, spec.input_dim);
  for (int c = 0; c < spec.classes; ++c) {
    const double angle = 2.0 * std::numbers::pi * c / spec.classes;
    centres(c, 0) = 2.5 * std::cos(angle);
    centres(c, 1) = 2.5 * std::sin(angle);
    for (int k = 2; k < spec.input_dim; ++k) centres(c, k) = rng.normal();
  }
  for (int i = 0; i < spec.points; ++i) {
    const int c = i % spec.classes;
    d.y[static_cast<std::size_t>(i)] = c;
    if (spec.kind == DatasetKind::kBlobs) {
      for (int k = 0; k < spec.input_dim; ++k) d.x(i, k) = centres(c, k) + spec.noise * rng.normal();
    } else {
      const double radius = 1.0 + c;
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      d.x(i, 0) = radius * std::cos(angle) + spec.noise * rng.normal();
      d.x(i, 1) = radius * std::sin(angle) + spec.noise * rng.normal();
      for (int k = 2; k < spec.input_dim; ++k) d.x(i, k) = spec.noise * rng.normal();
    }
  }
  return d;
}

void MlpTaskSpec::validate() const {
  if (layout.size() < 2) throw std::invalid_argument("MlpTaskSpec: layout needs input and output");
  for (int w : layout)
    if (w < 1) throw std::invalid_argument("MlpTaskSpec: layer widths must be positive");
  if (layout.front() != data.input_dim)
    throw std::invalid_argument("MlpTaskSpec: input width does not match dataset input_dim");
  if (layout.back() != data.classes)
    throw std::invalid_argument("MlpTaskSpec: output width does not match dataset classes");
  if (batch_size < 1) throw std::invalid_argument("MlpTaskSpec: batch_size must be >= 1");
  if (horizon < 1) throw std::invalid_argument("MlpTaskSpec: horizon must be >= 1");
  data.validate();
}

MlpTask::MlpTask(MlpTaskSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  data_ = make_dataset(spec_.data);
  Eigen::Index offset = 0;
  for (std::size_t l = 0; l + 1 < spec_.layout.size(); ++l) {
    const Eigen::Index in = spec_.layout[l];
    const Eigen::Index out = spec_.layout[l + 1];
    tensors_.push_back({"w" + std::to_string(l), in, out, offset});
    offset += in * out;
    tensors_.push_back({"b" + std::to_string(l), out, 1, offset});
    offset += out;
  }
  check_layout(tensors_);
}

Eigen::VectorXd MlpTask::init_params(std::uint64_t seed) const {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(parameter_count());
  CounterRng rng(seed, 0);
  const double gain = spec_.activation == Activation::kRelu ? std::sqrt(2.0) : 1.0;
  for (std::size_t k = 0; k < tensors_.size(); k += 2) {
    const TensorSpec& w = tensors_[k];
    const double scale = gain / std::sqrt(static_cast<double>(w.rows));
    for (Eigen::Index i = 0; i < w.size(); ++i) p(w.offset + i) = scale * rng.normal();
  }
  return p;
}

std::vector<int> MlpTask::batch_rows(std::uint64_t batch_seed) const {
  CounterRng rng(batch_seed, 0);
  std::vector<int> rows(static_cast<std::size_t>(spec_.batch_size));
  for (int& r : rows)
    r = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(spec_.data.points));
  return rows;
}

LossAndGrad MlpTask::loss_and_grad(const Eigen::VectorXd& params, std::uint64_t batch_seed) const {
  return loss_and_grad_on(params, batch_rows(batch_seed));
}

LossAndGrad MlpTask::loss_and_grad_on(const Eigen::VectorXd& params,
                                      const std::vector<int>& rows) const {
  if (params.size() != parameter_count())
    throw std::invalid_argument("MlpTask: parameter dimension mismatch");
  const auto n_layers = tensors_.size() / 2;
  const auto batch = static_cast<Eigen::Index>(rows.size());

  auto weight = [&](std::size_t l) {
    const TensorSpec& t = tensors_[2 * l];
    return Eigen::Map<const Eigen::MatrixXd>(params.data() + t.offset, t.rows, t.cols);
  };
  auto bias = [&](std::size_t l) {
    const TensorSpec& t = tensors_[2 * l + 1];
    return Eigen::Map<const Eigen::RowVectorXd>(params.data() + t.offset, t.rows);
  };

  // acts[l] is the input to layer l; pre[l] its pre-activation output.
  std::vector<Eigen::MatrixXd> acts(n_layers + 1);
  std::vector<Eigen::MatrixXd> pre(n_layers);
  acts[0].resize(batch, data_.x.cols());
  for (Eigen::Index i = 0; i < batch; ++i) acts[0].row(i) = data_.x.row(rows[static_cast<std::size_t>(i)]);
  for (std::size_t l = 0; l < n_layers; ++l) {
    pre[l] = (acts[l] * weight(l)).rowwise() + bias(l);
    if (l + 1 == n_layers) {
      acts[l + 1] = pre[l];
    } else if (spec_.activation == Activation::kRelu) {
      acts[l + 1] = pre[l].cwiseMax(0.0);
    } else {
      acts[l + 1] = pre[l].array().tanh().matrix();
    }
  }

  const Eigen::MatrixXd& logits = acts[n_layers];
  Eigen::MatrixXd delta(batch, logits.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < batch; ++i) {
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp().matrix();
    const double z = e.sum();
    const int label = data_.y[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])];
    loss += std::log(z) + mx - logits(i, label);
    delta.row(i) = e / z;
    delta(i, label) -= 1.0;
  }
  const double inv_b = 1.0 / static_cast<double>(batch);
  delta *= inv_b;

  LossAndGrad out;
  out.loss = loss * inv_b;
  out.grad.resize(params.size());
  for (std::size_t l = n_layers; l-- > 0;) {
    const TensorSpec& wt = tensors_[2 * l];
    const TensorSpec& bt = tensors_[2 * l + 1];
    Eigen::Map<Eigen::MatrixXd>(out.grad.data() + wt.offset, wt.rows, wt.cols).noalias() =
        acts[l].transpose() * delta;
    Eigen::Map<Eigen::RowVectorXd>(out.grad.data() + bt.offset, bt.rows) = delta.colwise().sum();
    if (l == 0) break;
    Eigen::MatrixXd back = delta * weight(l).transpose();
    if (spec_.activation == Activation::kRelu) {
      back.array() *= (pre[l - 1].array() > 0.0).cast<double>();
    } else {
      back.array() *= 1.0 - acts[l].array().square();
    }
    delta = std::move(back);
  }
  return out;
}

std::string MlpTask::describe() const {
  nlohmann::json j;
  j["task"] = "mlp";
  j["name"] = spec_.name;
  j["layout"] = spec_.layout;
  j["activation"] = to_string(spec_.activation);
  j["batch_size"] = spec_.batch_size;
  j["horizon"] = spec_.horizon;
  j["data"] = {{"kind", to_string(spec_.data.kind)},
               {"input_dim", spec_.data.input_dim},
               {"classes", spec_.data.classes},
               {"points", spec_.data.points},
               {"noise", spec_.data.noise},
               {"seed", spec_.data.seed}};
  return j.dump();
}

MlpTaskSpec default_mlp_task_spec() {
  MlpTaskSpec s;
  s.name = "mlp_blobs";
  s.layout = {2, 8, 8, 3};
  s.activation = Activation::kRelu;
  s.data = {DatasetKind::kBlobs, 2, 3, 1024, 0.6, 17};
  s.batch_size = 32;
  s.horizon = 2000;
  return s;
}

std::vector<std::shared_ptr<const InnerTask>> generalization_suite(const MlpTaskSpec& base,
                                                                   int train_horizon) {
  MlpTaskSpec a = base;
  a.horizon = train_horizon;
  a.name = base.name + "_base";

  MlpTaskSpec b = a;
  b.name = base.name + "_deep_wide";
  b.layout.assign({a.layout.front(), 16, 16, 16, a.layout.back()});

  MlpTaskSpec c = a;
  c.name = base.name + "_tanh";
  c.activation = a.activation == Activation::kRelu ? Activation::kTanh : Activation::kRelu;

  MlpTaskSpec d = a;
  d.name = base.name + "_rings";
  d.data.kind = a.data.kind == DatasetKind::kBlobs ? DatasetKind::kRings : DatasetKind::kBlobs;
  d.data.noise = d.data.kind == DatasetKind::kRings ? 0.15 : 0.6;
  d.data.seed = a.data.seed + 1;

  MlpTaskSpec e = a;
  e.name = base.name + "_long";
  e.horizon = 5 * train_horizon;

  std::vector<std::shared_ptr<const InnerTask>> suite;
  for (const auto& s : {a, b, c, d, e}) suite.push_back(std::make_shared<MlpTask>(s));
  return suite;
}

}  // namespace lopt
