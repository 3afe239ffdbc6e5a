#pragma once

// Experiment configuration: one JSON document holding the task, model,
// pretraining, scenario, adaptation and metric settings. Parsing is strict:
// every key is required (entropy_filter may be null) and unknown keys fail.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "come/engine.hpp"
#include "come/metrics.hpp"
#include "come/model.hpp"
#include "come/scenarios.hpp"

namespace come {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MetricOptions {
  ScoreKind score = ScoreKind::one_minus_maxprob;
  double tpr = 0.95;
  std::size_t histogram_bins = 20;
  std::size_t clean_eval_samples = 2000;
  std::uint64_t clean_eval_seed = 7;
};

struct ExperimentConfig {
  SourceTaskConfig task;
  std::vector<std::size_t> hidden{32, 32};
  std::uint64_t model_seed = 2;
  PretrainConfig pretrain{20, 0.05, 0.9, 64, 3};
  ScenarioSpec scenario{ScenarioMode::standard,
                        {CorruptionSpec::make(CorruptionKind::affine_shift, 5, 6)},
                        0.5, 64, 300, 4};
  AdaptConfig adapt{{ObjectiveKind::come, 2.0, 1.0, EvidenceActivation::exponential}, 1.2, 0.9, std::nullopt, false, 5};
  MetricOptions metrics;
  std::string output_dir = "runs";

  ModelDims dims() const { return {task.dim, hidden, task.classes}; }
};

namespace detail {

inline std::string join_path(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

// Checks that `j` is an object with exactly the keys in `allowed`.
inline void check_keys(const nlohmann::json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError((where.empty() ? std::string("config") : where) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + join_path(where, key) + "'");
  }
  for (const auto& key : allowed) {
    if (!j.contains(key)) throw ConfigError("missing field '" + join_path(where, key) + "'");
  }
}

template <typename T>
T field(const nlohmann::json& j, const std::string& where, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("field '" + join_path(where, key) + "' has the wrong type: " + j.at(key).dump());
  }
}

inline std::uint64_t seed_field(const nlohmann::json& j, const std::string& where, const std::string& key) {
  if (!j.at(key).is_number_unsigned()) throw ConfigError("field '" + join_path(where, key) + "' must be a non-negative integer");
  return j.at(key).get<std::uint64_t>();
}

inline std::size_t count_field(const nlohmann::json& j, const std::string& where, const std::string& key) {
  if (!j.at(key).is_number_unsigned()) throw ConfigError("field '" + join_path(where, key) + "' must be a non-negative integer");
  return j.at(key).get<std::size_t>();
}

template <typename F>
auto rethrow_as_config(const std::string& where, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  json schedule = json::array();
  for (const auto& s : c.scenario.schedule) {
    schedule.push_back({{"kind", to_string(s.kind)},
                        {"severity", s.severity},
                        {"scale_table", s.scale_table},
                        {"transform_seed", s.transform_seed}});
  }
  return {
      {"task",
       {{"classes", c.task.classes},
        {"dim", c.task.dim},
        {"samples_per_class", c.task.samples_per_class},
        {"sigma_clean", c.task.sigma_clean},
        {"min_separation_deg", c.task.min_separation_deg},
        {"outlier_classes", c.task.outlier_classes},
        {"seed", c.task.seed}}},
      {"model", {{"hidden", c.hidden}, {"seed", c.model_seed}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"learning_rate", c.pretrain.learning_rate},
        {"momentum", c.pretrain.momentum},
        {"batch_size", c.pretrain.batch_size},
        {"seed", c.pretrain.seed}}},
      {"scenario",
       {{"mode", to_string(c.scenario.mode)},
        {"schedule", schedule},
        {"outlier_ratio", c.scenario.outlier_ratio},
        {"batch_size", c.scenario.batch_size},
        {"num_batches", c.scenario.num_batches},
        {"seed", c.scenario.seed}}},
      {"adapt",
       {{"objective",
         {{"kind", to_string(c.adapt.objective.kind)},
          {"p", c.adapt.objective.p},
          {"tau", c.adapt.objective.tau},
          {"activation", to_string(c.adapt.objective.activation)}}},
        {"learning_rate", c.adapt.learning_rate},
        {"momentum", c.adapt.momentum},
        {"entropy_filter", c.adapt.entropy_filter ? json(*c.adapt.entropy_filter) : json(nullptr)},
        {"episodic_reset", c.adapt.episodic_reset},
        {"seed", c.adapt.seed},
        {"stop_on_collapse", c.adapt.stop_on_collapse}}},
      {"metrics",
       {{"score", to_string(c.metrics.score)},
        {"tpr", c.metrics.tpr},
        {"histogram_bins", c.metrics.histogram_bins},
        {"clean_eval_samples", c.metrics.clean_eval_samples},
        {"clean_eval_seed", c.metrics.clean_eval_seed}}},
      {"output_dir", c.output_dir},
  };
}

inline void validate(const ExperimentConfig& c) {
  using detail::rethrow_as_config;
  if (c.task.classes < 2) throw ConfigError("task.classes must be >= 2");
  if (c.task.dim < 2) throw ConfigError("task.dim must be >= 2");
  if (c.task.samples_per_class == 0) throw ConfigError("task.samples_per_class must be >= 1");
  if (!(c.task.sigma_clean > 0.0)) throw ConfigError("task.sigma_clean must be > 0");
  if (!(c.task.min_separation_deg >= 0.0 && c.task.min_separation_deg < 180.0)) {
    throw ConfigError("task.min_separation_deg must be in [0, 180)");
  }
  if (c.hidden.empty()) throw ConfigError("model.hidden must list at least one layer");
  for (std::size_t h : c.hidden)
    if (h == 0) throw ConfigError("model.hidden widths must be >= 1");
  rethrow_as_config("pretrain", [&] { c.pretrain.validate(); });
  rethrow_as_config("scenario", [&] { c.scenario.validate(); });
  if (c.scenario.mode == ScenarioMode::open_world && c.task.outlier_classes == 0) {
    throw ConfigError("scenario.mode open_world needs task.outlier_classes >= 1");
  }
  rethrow_as_config("adapt", [&] { c.adapt.validate(); });
  if (!(c.adapt.learning_rate > 0.0)) throw ConfigError("adapt.learning_rate must be > 0");
  if (!(c.metrics.tpr > 0.0 && c.metrics.tpr <= 1.0)) throw ConfigError("metrics.tpr must be in (0, 1]");
  if (c.metrics.histogram_bins == 0) throw ConfigError("metrics.histogram_bins must be >= 1");
  if (c.metrics.clean_eval_samples == 0) throw ConfigError("metrics.clean_eval_samples must be >= 1");
  if (c.output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using namespace detail;
  check_keys(j, "", {"task", "model", "pretrain", "scenario", "adapt", "metrics", "output_dir"});
  ExperimentConfig c;

  const auto& t = j.at("task");
  check_keys(t, "task", {"classes", "dim", "samples_per_class", "sigma_clean", "min_separation_deg", "outlier_classes", "seed"});
  c.task.classes = count_field(t, "task", "classes");
  c.task.dim = count_field(t, "task", "dim");
  c.task.samples_per_class = count_field(t, "task", "samples_per_class");
  c.task.sigma_clean = field<double>(t, "task", "sigma_clean");
  c.task.min_separation_deg = field<double>(t, "task", "min_separation_deg");
  c.task.outlier_classes = count_field(t, "task", "outlier_classes");
  c.task.seed = seed_field(t, "task", "seed");

  const auto& m = j.at("model");
  check_keys(m, "model", {"hidden", "seed"});
  c.hidden = field<std::vector<std::size_t>>(m, "model", "hidden");
  c.model_seed = seed_field(m, "model", "seed");

  const auto& p = j.at("pretrain");
  check_keys(p, "pretrain", {"epochs", "learning_rate", "momentum", "batch_size", "seed"});
  c.pretrain.epochs = count_field(p, "pretrain", "epochs");
  c.pretrain.learning_rate = field<double>(p, "pretrain", "learning_rate");
  c.pretrain.momentum = field<double>(p, "pretrain", "momentum");
  c.pretrain.batch_size = count_field(p, "pretrain", "batch_size");
  c.pretrain.seed = seed_field(p, "pretrain", "seed");

  const auto& s = j.at("scenario");
  check_keys(s, "scenario", {"mode", "schedule", "outlier_ratio", "batch_size", "num_batches", "seed"});
  c.scenario.mode = rethrow_as_config("scenario.mode", [&] { return parse_scenario(field<std::string>(s, "scenario", "mode")); });
  const auto& sched = s.at("schedule");
  if (!sched.is_array()) throw ConfigError("field 'scenario.schedule' must be an array");
  c.scenario.schedule.clear();
  for (std::size_t i = 0; i < sched.size(); ++i) {
    const std::string where = "scenario.schedule[" + std::to_string(i) + "]";
    check_keys(sched[i], where, {"kind", "severity", "scale_table", "transform_seed"});
    CorruptionSpec cs;
    cs.kind = rethrow_as_config(where + ".kind", [&] { return parse_corruption(field<std::string>(sched[i], where, "kind")); });
    cs.severity = field<int>(sched[i], where, "severity");
    const auto table = field<std::vector<double>>(sched[i], where, "scale_table");
    if (table.size() != cs.scale_table.size()) throw ConfigError("field '" + where + ".scale_table' must hold 5 values");
    std::copy(table.begin(), table.end(), cs.scale_table.begin());
    cs.transform_seed = seed_field(sched[i], where, "transform_seed");
    c.scenario.schedule.push_back(cs);
  }
  c.scenario.outlier_ratio = field<double>(s, "scenario", "outlier_ratio");
  c.scenario.batch_size = count_field(s, "scenario", "batch_size");
  c.scenario.num_batches = count_field(s, "scenario", "num_batches");
  c.scenario.seed = seed_field(s, "scenario", "seed");

  const auto& a = j.at("adapt");
  check_keys(a, "adapt", {"objective", "learning_rate", "momentum", "entropy_filter", "episodic_reset", "seed",
                            "stop_on_collapse"});
  const auto& o = a.at("objective");
  check_keys(o, "adapt.objective", {"kind", "p", "tau", "activation"});
  c.adapt.objective.kind =
      rethrow_as_config("adapt.objective.kind", [&] { return parse_objective(field<std::string>(o, "adapt.objective", "kind")); });
  c.adapt.objective.p = field<double>(o, "adapt.objective", "p");
  c.adapt.objective.tau = field<double>(o, "adapt.objective", "tau");
  c.adapt.objective.activation = rethrow_as_config(
      "adapt.objective.activation", [&] { return parse_activation(field<std::string>(o, "adapt.objective", "activation")); });
  c.adapt.learning_rate = field<double>(a, "adapt", "learning_rate");
  c.adapt.momentum = field<double>(a, "adapt", "momentum");
  if (a.at("entropy_filter").is_null()) {
    c.adapt.entropy_filter.reset();
  } else {
    c.adapt.entropy_filter = field<double>(a, "adapt", "entropy_filter");
  }
  c.adapt.episodic_reset = field<bool>(a, "adapt", "episodic_reset");
  c.adapt.seed = seed_field(a, "adapt", "seed");
  c.adapt.stop_on_collapse = a.contains("stop_on_collapse") && field<bool>(a, "adapt", "stop_on_collapse");

  const auto& mt = j.at("metrics");
  check_keys(mt, "metrics", {"score", "tpr", "histogram_bins", "clean_eval_samples", "clean_eval_seed"});
  c.metrics.score = rethrow_as_config("metrics.score", [&] { return parse_score(field<std::string>(mt, "metrics", "score")); });
  c.metrics.tpr = field<double>(mt, "metrics", "tpr");
  c.metrics.histogram_bins = count_field(mt, "metrics", "histogram_bins");
  c.metrics.clean_eval_samples = count_field(mt, "metrics", "clean_eval_samples");
  c.metrics.clean_eval_seed = seed_field(mt, "metrics", "clean_eval_seed");

  c.output_dir = field<std::string>(j, "", "output_dir");
  validate(c);
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

// Shifts every seed by `offset`; offset 0 is the identity.
inline ExperimentConfig with_seed_offset(ExperimentConfig c, std::uint64_t offset) {
  c.task.seed += offset;
  c.model_seed += offset;
  c.pretrain.seed += offset;
  c.scenario.seed += offset;
  for (auto& s : c.scenario.schedule) s.transform_seed += offset;
  c.adapt.seed += offset;
  c.metrics.clean_eval_seed += offset;
  return c;
}

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Hash of the canonical (key-sorted, compact) JSON form.
inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a(config_to_json(c).dump())); }

// Hash of the parts that determine the pretrained checkpoint.
inline std::string pretrain_hash(const ExperimentConfig& c) {
  const auto j = config_to_json(c);
  return hex64(fnv1a(nlohmann::json{{"task", j["task"]}, {"model", j["model"]}, {"pretrain", j["pretrain"]}}.dump()));
}

}  // namespace come
