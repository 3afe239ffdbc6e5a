#pragma once

// Small MLP classifier: per hidden layer
//   linear -> per-sample standardization -> gamma/beta affine -> relu
// followed by a linear head. The gamma/beta affine parameters form the
// adaptable set; every weight and bias is frozen during adaptation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "come/autodiff.hpp"
#include "come/data.hpp"
#include "come/random.hpp"

namespace come {

inline constexpr double kNormEpsilon = 1e-5;

struct ModelDims {
  std::size_t input = 16;
  std::vector<std::size_t> hidden{32, 32};
  std::size_t classes = 8;

  bool operator==(const ModelDims&) const = default;
};

enum class ParamRole { frozen, adaptable };

struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> values;
  ParamRole role = ParamRole::frozen;
};

using ParameterSnapshot = std::vector<std::vector<double>>;

class MLPClassifier {
 public:
  MLPClassifier() : MLPClassifier(ModelDims{}, 0) {}

  MLPClassifier(ModelDims dims, std::uint64_t seed) : dims_(std::move(dims)) {
    if (dims_.input == 0 || dims_.classes < 2) throw std::invalid_argument("model needs input >= 1 and classes >= 2");
    Rng rng(seed);
    std::size_t fan_in = dims_.input;
    for (std::size_t l = 0; l < dims_.hidden.size(); ++l) {
      const std::size_t width = dims_.hidden[l];
      if (width < 2) throw std::invalid_argument("hidden widths must be >= 2 for standardization");
      const std::string p = "hidden" + std::to_string(l) + ".";
      add_param(p + "weight", {fan_in, width}, gaussian(rng, fan_in * width, std::sqrt(2.0 / fan_in)), ParamRole::frozen);
      add_param(p + "bias", {width}, std::vector<double>(width, 0.0), ParamRole::frozen);
      add_param(p + "gamma", {width}, std::vector<double>(width, 1.0), ParamRole::adaptable);
      add_param(p + "beta", {width}, std::vector<double>(width, 0.0), ParamRole::adaptable);
      fan_in = width;
    }
    add_param("head.weight", {fan_in, dims_.classes}, gaussian(rng, fan_in * dims_.classes, std::sqrt(1.0 / fan_in)),
              ParamRole::frozen);
    add_param("head.bias", {dims_.classes}, std::vector<double>(dims_.classes, 0.0), ParamRole::frozen);
  }

  const ModelDims& dims() const { return dims_; }
  std::size_t num_classes() const { return dims_.classes; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  // Parameters as tensors; tracked on `tape` when `which` selects them.
  enum class Track { none, adaptable, all };
  std::vector<Tensor> bind(Tape* tape, Track which) const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) {
      Tensor t(p.shape, p.values);
      const bool track = tape && (which == Track::all || (which == Track::adaptable && p.role == ParamRole::adaptable));
      out.push_back(track ? tape->variable(std::move(t)) : std::move(t));
    }
    return out;
  }

  Tensor forward(const Tensor& batch) const { return forward(batch, bind(nullptr, Track::none)); }

  Tensor forward(const Tensor& batch, std::span<const Tensor> bound) const {
    if (batch.rank() != 2 || batch.cols() != dims_.input) {
      throw ShapeError("forward: expected [B x " + std::to_string(dims_.input) + "] input, got " +
                       to_string(batch.shape()));
    }
    if (bound.size() != params_.size()) throw std::invalid_argument("forward: parameter binding size mismatch");
    Tensor h = batch;
    std::size_t i = 0;
    for (std::size_t l = 0; l < dims_.hidden.size(); ++l, i += 4) {
      const Tensor z = add(matmul(h, bound[i]), bound[i + 1]);
      const Tensor centered = sub_rows(z, mean(z, 1));
      const Tensor sd = sqrt(add_scalar(mean(mul(centered, centered), 1), kNormEpsilon));
      const Tensor normalized = div_rows(centered, sd);
      h = relu(add(mul(normalized, bound[i + 2]), bound[i + 3]));
    }
    return add(matmul(h, bound[i]), bound[i + 1]);
  }

  ParameterSnapshot snapshot() const {
    ParameterSnapshot s;
    s.reserve(params_.size());
    for (const auto& p : params_) s.push_back(p.values);
    return s;
  }

  void restore(const ParameterSnapshot& s) {
    if (s.size() != params_.size()) throw std::invalid_argument("restore: snapshot does not match model");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i].size() != params_[i].values.size()) throw std::invalid_argument("restore: snapshot shape mismatch");
      params_[i].values = s[i];
    }
  }

 private:
  static std::vector<double> gaussian(Rng& rng, std::size_t n, double sd) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal(0.0, sd);
    return v;
  }

  void add_param(std::string name, Shape shape, std::vector<double> values, ParamRole role) {
    params_.push_back(Parameter{std::move(name), std::move(shape), std::move(values), role});
  }

  ModelDims dims_;
  std::vector<Parameter> params_;
};

// Non-owning view over one side of the adaptable/frozen partition.
class ParameterView {
 public:
  ParameterView(MLPClassifier& model, ParamRole role) {
    auto& ps = model.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps[i].role == role) {
        items_.push_back(&ps[i]);
        indices_.push_back(i);
      }
    }
  }

  std::size_t size() const { return items_.size(); }
  Parameter& operator[](std::size_t i) { return *items_[i]; }
  const Parameter& operator[](std::size_t i) const { return *items_[i]; }
  // Position of the i-th viewed parameter in model.parameters().
  std::size_t model_index(std::size_t i) const { return indices_[i]; }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto* p : items_) n += p->values.size();
    return n;
  }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }

 private:
  std::vector<Parameter*> items_;
  std::vector<std::size_t> indices_;
};

inline ParameterView adaptable_parameters(MLPClassifier& model) { return {model, ParamRole::adaptable}; }
inline ParameterView frozen_parameters(MLPClassifier& model) { return {model, ParamRole::frozen}; }

// ---- source pretraining ------------------------------------------------------

struct PretrainConfig {
  std::size_t epochs = 30;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::uint64_t seed = 3;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("pretrain learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("pretrain momentum must be in [0, 1)");
    if (batch_size == 0) throw std::invalid_argument("pretrain batch_size must be > 0");
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PretrainResult {
  MLPClassifier model;
  ParameterSnapshot theta0;  // copy of every parameter at the end of training
  std::vector<double> epoch_loss;
};

inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  return scale(mean(gather(log_softmax_rows(logits), labels)), -1.0);
}

// SGD with momentum on cross-entropy over every parameter.
inline PretrainResult pretrain(MLPClassifier model, const LabeledBatch& data, const PretrainConfig& cfg) {
  cfg.validate();
  const std::size_t n = data.size();
  if (n == 0) throw std::invalid_argument("pretrain: empty dataset");
  for (int y : data.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= model.num_classes()) {
      throw std::invalid_argument("pretrain: label " + std::to_string(y) + " out of range");
    }
  }
  Rng rng(cfg.seed);
  std::vector<std::vector<double>> velocity;
  for (const auto& p : model.parameters()) velocity.emplace_back(p.values.size(), 0.0);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  PretrainResult result{model, {}, {}};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      std::vector<std::size_t> rows(order.begin() + start, order.begin() + stop);
      std::vector<std::size_t> labels;
      for (std::size_t r : rows) labels.push_back(static_cast<std::size_t>(data.labels[r]));

      Tape tape;
      const auto bound = result.model.bind(&tape, MLPClassifier::Track::all);
      const Tensor x = take_rows(data.features, rows);
      const std::string where = "epoch " + std::to_string(epoch) + ", batch starting at " + std::to_string(start);
      Tensor loss;
      try {
        loss = cross_entropy(result.model.forward(x, bound), labels);
      } catch (const DomainError& e) {
        throw TrainingDiverged("pretrain diverged at " + where + ": " + e.what());
      }
      if (!std::isfinite(loss.item())) {
        throw TrainingDiverged("pretrain diverged at " + where + ": loss " + std::to_string(loss.item()));
      }
      total += loss.item() * static_cast<double>(rows.size());
      const Gradients grads = tape.backward(loss);
      auto& params = result.model.parameters();
      for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor g = grads.wrt(bound[i]);
        for (std::size_t j = 0; j < g.size(); ++j) {
          velocity[i][j] = cfg.momentum * velocity[i][j] + g[j];
          params[i].values[j] -= cfg.learning_rate * velocity[i][j];
        }
      }
    }
    result.epoch_loss.push_back(total / static_cast<double>(n));
  }
  result.theta0 = result.model.snapshot();
  return result;
}

inline std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

// Fraction of non-outlier rows predicted correctly.
inline double evaluate_accuracy(const MLPClassifier& model, const LabeledBatch& data) {
  const auto pred = argmax_rows(model.forward(data.features));
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.is_outlier(i)) continue;
    ++total;
    correct += pred[i] == static_cast<std::size_t>(data.labels[i]);
  }
  if (total == 0) throw std::invalid_argument("evaluate_accuracy: no in-distribution rows");
  return static_cast<double>(correct) / static_cast<double>(total);
}

// ---- checkpoint file -----------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  MLPClassifier model;
  ParameterSnapshot theta0;
};

inline nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
  using nlohmann::json;
  const auto& dims = ckpt.model.dims();
  json params = json::array();
  for (const auto& p : ckpt.model.parameters()) {
    params.push_back({{"name", p.name},
                      {"shape", p.shape},
                      {"role", p.role == ParamRole::adaptable ? "adaptable" : "frozen"},
                      {"values", p.values}});
  }
  return {{"format", "come-mlp-checkpoint"},
          {"version", kCheckpointVersion},
          {"dims", {{"input", dims.input}, {"hidden", dims.hidden}, {"classes", dims.classes}}},
          {"activation", "relu"},
          {"parameters", std::move(params)},
          {"theta0", ckpt.theta0}};
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "come-mlp-checkpoint") throw std::runtime_error("not a come-mlp checkpoint");
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + j.at("version").dump());
  }
  if (j.at("activation").get<std::string>() != "relu") throw std::runtime_error("unsupported activation");
  ModelDims dims;
  dims.input = j.at("dims").at("input").get<std::size_t>();
  dims.hidden = j.at("dims").at("hidden").get<std::vector<std::size_t>>();
  dims.classes = j.at("dims").at("classes").get<std::size_t>();
  Checkpoint ckpt{MLPClassifier(dims, 0), {}};
  auto& params = ckpt.model.parameters();
  const auto& stored = j.at("parameters");
  if (stored.size() != params.size()) throw std::runtime_error("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (stored[i].at("name").get<std::string>() != params[i].name ||
        stored[i].at("shape").get<Shape>() != params[i].shape) {
      throw std::runtime_error("checkpoint parameter " + std::to_string(i) + " does not match the architecture");
    }
    params[i].values = stored[i].at("values").get<std::vector<double>>();
    if (params[i].values.size() != numel(params[i].shape)) {
      throw std::runtime_error("checkpoint parameter " + params[i].name + " has wrong length");
    }
  }
  ckpt.theta0 = j.at("theta0").get<ParameterSnapshot>();
  if (ckpt.theta0.size() != params.size()) throw std::runtime_error("checkpoint theta0 does not match parameters");
  return ckpt;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << checkpoint_to_json(ckpt).dump() << '\n';
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  return checkpoint_from_json(nlohmann::json::parse(in));
}

}  // namespace come
