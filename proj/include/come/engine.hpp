#pragma once

// Online test-time adaptation: for each incoming batch, forward the live model,
// optionally drop high-entropy rows, minimise the configured objective on the
// rest and take one SGD-with-momentum step on the adaptable (gamma/beta)
// parameters. Telemetry always describes the pre-update model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "come/autodiff.hpp"
#include "come/data.hpp"
#include "come/model.hpp"
#include "come/objectives.hpp"
#include "come/opinion.hpp"

namespace come {

struct AdaptConfig {
  ObjectiveConfig objective;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::optional<double> entropy_filter;  // rows with softmax entropy >= E0 are excluded from the loss
  bool episodic_reset = false;           // restore theta0 at lifelong segment boundaries
  std::uint64_t seed = 5;
  bool stop_on_collapse = false;  // end the run at the sustained-entropy collapse step

  void validate() const {
    objective.validate();
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("adapt learning_rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("adapt momentum must be in [0, 1)");
    if (entropy_filter && !(*entropy_filter > 0.0)) throw std::invalid_argument("entropy_filter must be > 0");
  }
};

// Collapse: sustained near-zero mean entropy or non-finite numbers.
inline constexpr double kCollapseEntropy = 1e-4;
inline constexpr std::size_t kCollapseStreak = 20;

struct RowRecord {
  double confidence = 0.0;       // max softmax probability
  double uncertainty = 0.0;      // K / S
  double uncertainty_lse = 0.0;  // K / LSE(f), NaN when LSE(f) <= 0
  double entropy = 0.0;          // softmax entropy
  std::size_t predicted = 0;
  int label = 0;
  bool correct = false;
  bool outlier = false;
  bool filtered = false;
};

struct TrajectoryRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double acc = std::numeric_limits<double>::quiet_NaN();  // in-distribution rows only
  double mean_conf = 0.0;
  double mean_u = 0.0;
  double mean_entropy = 0.0;
  std::size_t filtered = 0;
  std::size_t retained = 0;
  bool updated = false;
  double mean_abs_du = 0.0;       // mean |u - u0| over rows, K / S form
  double delta_lse = 0.0;         // running max |u - u0| in K / LSE form
  double confidence_bound = 1.0;  // max over rows of the u0-based confidence bound
  bool aborted = false;
  std::string diagnostic;
  std::vector<RowRecord> rows;
};

class AdaptState;
TrajectoryRecord adapt_step(AdaptState& state, const LabeledBatch& batch, const AdaptConfig& cfg);

class AdaptState {
 public:
  AdaptState(MLPClassifier model, ParameterSnapshot theta0)
      : model_(std::move(model)), source_(model_), theta0_(std::move(theta0)) {
    source_.restore(theta0_);
    reset_momentum();
  }

  MLPClassifier& model() { return model_; }
  const MLPClassifier& model() const { return model_; }
  const MLPClassifier& source_model() const { return source_; }
  const ParameterSnapshot& theta0() const { return theta0_; }
  std::size_t step() const { return step_; }

  // Restores theta <- theta0 and zeroes momentum.
  void reset() {
    model_.restore(theta0_);
    reset_momentum();
  }

 private:
  friend TrajectoryRecord adapt_step(AdaptState&, const LabeledBatch&, const AdaptConfig&);

  void reset_momentum() {
    velocity_.clear();
    for (const auto& p : model_.parameters())
      velocity_.emplace_back(p.role == ParamRole::adaptable ? p.values.size() : 0, 0.0);
  }

  MLPClassifier model_;
  MLPClassifier source_;
  ParameterSnapshot theta0_;
  std::vector<std::vector<double>> velocity_;
  std::size_t step_ = 0;
  double delta_lse_ = 0.0;
};

// v <- m v + g; theta <- theta - lr v
inline void sgd_momentum_update(std::span<double> theta, std::span<const double> grad, std::span<double> velocity,
                                double lr, double momentum) {
  for (std::size_t j = 0; j < theta.size(); ++j) {
    velocity[j] = momentum * velocity[j] + grad[j];
    theta[j] -= lr * velocity[j];
  }
}

namespace detail {

inline double row_entropy(std::span<const double> f) {
  const double lse = come::logsumexp(f);
  double h = 0.0;
  for (double v : f) {
    const double logp = v - lse;
    h -= std::exp(logp) * logp;
  }
  return h;
}

inline double row_uncertainty(std::span<const double> f, EvidenceActivation act) {
  if (act == EvidenceActivation::exponential) {
    return static_cast<double>(f.size()) * std::exp(-come::logsumexp(f));
  }
  std::vector<double> r(f.begin(), f.end());
  for (double& v : r) v = std::max(v, 0.0);
  return static_cast<double>(f.size()) * std::exp(-come::logsumexp(r));
}

inline double row_uncertainty_lse(std::span<const double> f) {
  const double lse = come::logsumexp(f);
  return lse > 0.0 ? static_cast<double>(f.size()) / lse : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace detail

inline TrajectoryRecord adapt_step(AdaptState& state, const LabeledBatch& batch, const AdaptConfig& cfg) {
  const std::size_t b = batch.size();
  const std::size_t k = state.model_.num_classes();
  if (batch.features.rows() != b) throw ShapeError("adapt_step: feature rows and labels disagree");

  TrajectoryRecord rec;
  rec.step = state.step_++;

  Tape tape;
  const bool learn = cfg.learning_rate > 0.0;
  const auto bound = state.model_.bind(learn ? &tape : nullptr, MLPClassifier::Track::adaptable);
  Tensor logits, source_logits;
  try {
    logits = state.model_.forward(batch.features, bound);
    source_logits = state.source_.forward(batch.features);
  } catch (const DomainError& e) {
    rec.loss = std::numeric_limits<double>::quiet_NaN();
    rec.aborted = true;
    rec.diagnostic = "forward failed at step " + std::to_string(rec.step) + ": " + e.what();
    return rec;
  }
  const auto pred = argmax_rows(logits);

  // Telemetry from pre-update logits.
  rec.rows.resize(b);
  std::vector<std::size_t> retained;
  std::size_t in_dist = 0, correct = 0;
  double delta = state.delta_lse_;
  for (std::size_t r = 0; r < b; ++r) {
    auto f = logits.row(r);
    auto f0 = source_logits.row(r);
    RowRecord& row = rec.rows[r];
    const double lse = come::logsumexp(f);
    row.confidence = std::exp(*std::max_element(f.begin(), f.end()) - lse);
    row.uncertainty = detail::row_uncertainty(f, cfg.objective.activation);
    row.uncertainty_lse = detail::row_uncertainty_lse(f);
    row.entropy = detail::row_entropy(f);
    row.predicted = pred[r];
    row.label = batch.labels[r];
    row.outlier = batch.is_outlier(r);
    row.correct = !row.outlier && pred[r] == static_cast<std::size_t>(row.label);
    row.filtered = cfg.entropy_filter && row.entropy >= *cfg.entropy_filter;
    if (!row.filtered) retained.push_back(r);
    if (!row.outlier) {
      ++in_dist;
      correct += row.correct;
    }
    rec.mean_conf += row.confidence;
    rec.mean_u += row.uncertainty;
    rec.mean_entropy += row.entropy;
    rec.mean_abs_du += std::abs(row.uncertainty - detail::row_uncertainty(f0, cfg.objective.activation));
    const double u0 = detail::row_uncertainty_lse(f0);
    if (std::isfinite(row.uncertainty_lse) && std::isfinite(u0)) delta = std::max(delta, std::abs(row.uncertainty_lse - u0));
  }
  const double nb = static_cast<double>(b);
  rec.mean_conf /= nb;
  rec.mean_u /= nb;
  rec.mean_entropy /= nb;
  rec.mean_abs_du /= nb;
  if (in_dist > 0) rec.acc = static_cast<double>(correct) / static_cast<double>(in_dist);
  rec.retained = retained.size();
  rec.filtered = b - retained.size();
  state.delta_lse_ = delta;
  rec.delta_lse = delta;

  // The bound holds for rows whose logits are strictly positive and whose
  // source uncertainty exceeds the realised divergence; elsewhere it is vacuous.
  rec.confidence_bound = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    auto f = logits.row(r);
    const double u0 = detail::row_uncertainty_lse(source_logits.row(r));
    const bool positive = std::all_of(f.begin(), f.end(), [](double v) { return v > 0.0; });
    double bound_r = 1.0;
    if (positive && std::isfinite(u0) && u0 - delta > 0.0) bound_r = theorem1_confidence_bound(u0, delta, k);
    rec.confidence_bound = std::max(rec.confidence_bound, bound_r);
  }

  auto abort = [&](std::string why) {
    rec.aborted = true;
    rec.diagnostic = std::move(why);
    return rec;
  };
  for (double v : logits.values()) {
    if (!std::isfinite(v)) {
      rec.loss = std::numeric_limits<double>::quiet_NaN();
      return abort("non-finite logits at step " + std::to_string(rec.step));
    }
  }

  const bool any_retained = !retained.empty();
  std::vector<std::size_t> pseudo;
  if (cfg.objective.kind == ObjectiveKind::pseudo_label) {
    const auto src_pred = argmax_rows(source_logits);
    for (std::size_t r : retained) pseudo.push_back(src_pred[r]);
  }
  if (!any_retained) {
    // Nothing to learn from; report the objective over the whole batch.
    std::vector<std::size_t> all_pseudo;
    if (cfg.objective.kind == ObjectiveKind::pseudo_label) all_pseudo = argmax_rows(source_logits);
    rec.loss = objective_loss(detach(logits), cfg.objective, all_pseudo).item();
    return rec;
  }
  const Tensor used = retained.size() == b ? logits : take_rows(logits, retained);
  const Tensor loss = objective_loss(used, cfg.objective, pseudo);
  rec.loss = loss.item();
  if (!std::isfinite(rec.loss)) return abort("non-finite loss at step " + std::to_string(rec.step));
  if (!learn) return rec;

  const Gradients grads = tape.backward(loss);
  auto& params = state.model_.parameters();
  std::vector<Tensor> g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].role != ParamRole::adaptable) continue;
    g[i] = grads.wrt(bound[i]);
    for (double v : g[i].values()) {
      if (!std::isfinite(v)) return abort("non-finite gradient for " + params[i].name + " at step " + std::to_string(rec.step));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].role != ParamRole::adaptable) continue;
    sgd_momentum_update(params[i].values, g[i].values(), state.velocity_[i], cfg.learning_rate, cfg.momentum);
  }
  rec.updated = true;
  return rec;
}

struct RunResult {
  std::vector<TrajectoryRecord> records;
  MLPClassifier final_model;
  bool collapsed = false;
  bool aborted = false;
  std::optional<std::size_t> collapse_step;
  std::string diagnostic;
};

inline RunResult run(AdaptState& state, const std::vector<LabeledBatch>& stream, const AdaptConfig& cfg) {
  cfg.validate();
  if (stream.empty()) throw std::invalid_argument("run: empty stream");
  RunResult result;
  result.records.reserve(stream.size());
  std::size_t streak = 0;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    if (cfg.episodic_reset && i > 0 && stream[i].segment != stream[i - 1].segment) state.reset();
    TrajectoryRecord rec = adapt_step(state, stream[i], cfg);
    const bool aborted = rec.aborted;
    const double entropy = rec.mean_entropy;
    result.records.push_back(std::move(rec));
    if (aborted) {
      result.aborted = result.collapsed = true;
      result.collapse_step = i;
      result.diagnostic = result.records.back().diagnostic;
      break;
    }
    streak = entropy < kCollapseEntropy ? streak + 1 : 0;
    if (streak >= kCollapseStreak && !result.collapsed) {
      result.collapsed = true;
      result.collapse_step = i;
      result.diagnostic = "mean entropy below " + std::to_string(kCollapseEntropy) + " for " +
                          std::to_string(kCollapseStreak) + " steps";
      if (cfg.stop_on_collapse) break;
    }
  }
  result.final_model = state.model();
  return result;
}

// Pure evaluation of the source model over the stream.
inline RunResult no_adapt_baseline(const MLPClassifier& model, const ParameterSnapshot& theta0,
                                   const std::vector<LabeledBatch>& stream) {
  AdaptState state(model, theta0);
  AdaptConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.objective.kind = ObjectiveKind::em;
  return run(state, stream, cfg);
}

// ---- trajectory files ------------------------------------------------------------

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trajectory_csv(const std::vector<TrajectoryRecord>& records) {
  std::string out = "step,loss,acc,mean_conf,mean_u,mean_entropy,filtered\n";
  for (const auto& r : records) {
    out += std::to_string(r.step) + ',' + format_double(r.loss) + ',' + format_double(r.acc) + ',' +
           format_double(r.mean_conf) + ',' + format_double(r.mean_u) + ',' + format_double(r.mean_entropy) + ',' +
           std::to_string(r.filtered) + '\n';
  }
  return out;
}

inline std::string row_records_jsonl(const std::vector<TrajectoryRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    for (std::size_t i = 0; i < r.rows.size(); ++i) {
      const auto& row = r.rows[i];
      nlohmann::json j = {{"step", r.step},
                          {"row", i},
                          {"confidence", row.confidence},
                          {"uncertainty", row.uncertainty},
                          {"correct", row.correct},
                          {"outlier", row.outlier}};
      out += j.dump();
      out += '\n';
    }
  }
  return out;
}

}  // namespace come
