#pragma once

// Command implementations behind the `come` executable. Each returns a process
// exit code: 0 success (collapse included), 2 usage or config error, 3 internal
// invariant violation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "come/config.hpp"
#include "come/engine.hpp"
#include "come/metrics.hpp"
#include "come/model.hpp"
#include "come/objectives.hpp"
#include "come/opinion.hpp"
#include "come/random.hpp"
#include "come/scenarios.hpp"

namespace come {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitInternal = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Writes to a sibling temp file, then renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out << content;
    if (!out.flush()) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::filesystem::path checkpoint_path(const ExperimentConfig& c) {
  return std::filesystem::path(c.output_dir) / ("checkpoint-" + pretrain_hash(c) + ".json");
}

inline std::filesystem::path pretrain_report_path(const ExperimentConfig& c) {
  return std::filesystem::path(c.output_dir) / ("pretrain-" + pretrain_hash(c) + ".json");
}

struct RunFiles {
  std::filesystem::path trajectory, rows, summary, histogram;
};

inline RunFiles run_files(const ExperimentConfig& c) {
  const std::filesystem::path dir(c.output_dir);
  const std::string id = config_hash(c);
  return {dir / (id + "-trajectory.csv"), dir / (id + "-rows.jsonl"), dir / (id + "-summary.json"),
          dir / (id + "-confidence-hist.csv")};
}

inline SourceTaskData make_task(const ExperimentConfig& c) { return make_source_task(c.task); }

struct PretrainOutcome {
  Checkpoint checkpoint;
  double clean_acc = 0.0;
  double train_acc = 0.0;
  std::vector<double> epoch_loss;
};

inline PretrainOutcome pretrain_from_config(const ExperimentConfig& c, const SourceTaskData& data) {
  auto trained = pretrain(MLPClassifier(c.dims(), c.model_seed), data.train, c.pretrain);
  PretrainOutcome out{{trained.model, trained.theta0}, 0.0, 0.0, trained.epoch_loss};
  out.clean_acc = evaluate_accuracy(trained.model, sample_clean(data.task, c.metrics.clean_eval_samples, c.metrics.clean_eval_seed));
  out.train_acc = evaluate_accuracy(trained.model, data.train);
  return out;
}

inline nlohmann::json pretrain_report(const ExperimentConfig& c, const PretrainOutcome& p) {
  return {{"clean_acc", p.clean_acc},
          {"train_acc", p.train_acc},
          {"epoch_loss", p.epoch_loss},
          {"seed", {{"task", c.task.seed}, {"model", c.model_seed}, {"pretrain", c.pretrain.seed}}},
          {"config_hash", config_hash(c)},
          {"pretrain_hash", pretrain_hash(c)},
          {"checkpoint", checkpoint_path(c).filename().string()}};
}

inline void save_pretrain(const ExperimentConfig& c, const PretrainOutcome& p) {
  write_file_atomic(checkpoint_path(c), checkpoint_to_json(p.checkpoint).dump() + "\n");
  write_file_atomic(pretrain_report_path(c), pretrain_report(c, p).dump(2) + "\n");
}

// Loads the checkpoint for `c`; pretrains and saves it first when `create` is set.
inline Checkpoint obtain_checkpoint(const ExperimentConfig& c, const SourceTaskData& data, bool create) {
  const auto path = checkpoint_path(c);
  if (std::filesystem::exists(path)) return read_checkpoint(path.string());
  if (!create) throw UsageError("checkpoint " + path.string() + " not found; run `come pretrain` with this config first");
  auto p = pretrain_from_config(c, data);
  save_pretrain(c, p);
  return p.checkpoint;
}

// Lifelong and mixed streams need several shifts; a one-entry schedule is
// widened to every corruption kind at the same severity.
inline ScenarioSpec scenario_for(const ExperimentConfig& c, ScenarioMode mode) {
  ScenarioSpec s = c.scenario;
  s.mode = mode;
  if ((mode == ScenarioMode::lifelong || mode == ScenarioMode::mixed) && s.schedule.size() == 1) {
    const auto base = s.schedule[0];
    s.schedule.clear();
    for (auto kind : {CorruptionKind::additive_gaussian, CorruptionKind::feature_dropout, CorruptionKind::affine_shift})
      s.schedule.push_back(CorruptionSpec::make(kind, base.severity, base.transform_seed));
  }
  return s;
}

inline nlohmann::json summary_json(const ExperimentConfig& c, const RunResult& r, const Summary& s,
                                   std::uint64_t stream_h) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"acc", num(s.acc)},
          {"fpr95", num(s.fpr95)},
          {"auroc", num(s.auroc)},
          {"mean_conf", num(s.mean_conf)},
          {"mean_u", num(s.mean_u)},
          {"mean_abs_du", num(s.mean_abs_du)},
          {"n", s.n},
          {"steps", r.records.size()},
          {"collapsed", r.collapsed},
          {"aborted", r.aborted},
          {"collapse_step", r.collapse_step ? nlohmann::json(*r.collapse_step) : nlohmann::json(nullptr)},
          {"diagnostic", r.diagnostic},
          {"objective", to_string(c.adapt.objective.kind)},
          {"scenario", to_string(c.scenario.mode)},
          {"score", to_string(c.metrics.score)},
          {"stream_hash", hex64(stream_h)},
          {"config_hash", config_hash(c)}};
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

inline int cmd_pretrain(const std::string& config_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = load_config(config_path);
    const auto data = make_task(cfg);
    const auto p = pretrain_from_config(cfg, data);
    save_pretrain(cfg, p);
    out << "checkpoint " << checkpoint_path(cfg).string() << '\n'
        << "report " << pretrain_report_path(cfg).string() << '\n'
        << "clean_acc " << format_double(p.clean_acc) << '\n';
    return kExitOk;
  });
}

struct AdaptOutcome {
  RunResult result;
  Summary summary;
  std::uint64_t stream_hash = 0;
};

inline AdaptOutcome adapt_in_memory(const ExperimentConfig& c, const SourceTaskData& data, const Checkpoint& ckpt) {
  const auto stream = build_stream(data.task, c.scenario);
  AdaptState state(ckpt.model, ckpt.theta0);
  AdaptOutcome o;
  o.result = run(state, stream, c.adapt);
  o.summary = summarize(o.result.records, c.metrics.score, c.metrics.tpr);
  o.stream_hash = stream_hash(stream);
  return o;
}

inline int cmd_adapt(const std::string& config_path, const std::optional<std::string>& objective,
                     const std::optional<std::string>& scenario, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    auto cfg = load_config(config_path);
    try {
      if (objective) cfg.adapt.objective.kind = parse_objective(*objective);
      if (scenario) cfg.scenario = scenario_for(cfg, parse_scenario(*scenario));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    validate(cfg);
    const auto data = make_task(cfg);
    const auto ckpt = obtain_checkpoint(cfg, data, false);
    const auto o = adapt_in_memory(cfg, data, ckpt);
    const auto files = run_files(cfg);
    std::vector<double> conf;
    for (const auto& rec : o.result.records)
      for (const auto& row : rec.rows) conf.push_back(row.confidence);
    write_file_atomic(files.trajectory, trajectory_csv(o.result.records));
    write_file_atomic(files.rows, row_records_jsonl(o.result.records));
    write_file_atomic(files.histogram, histogram_csv(histogram(conf, cfg.metrics.histogram_bins)));
    write_file_atomic(files.summary, summary_json(cfg, o.result, o.summary, o.stream_hash).dump(2) + "\n");
    out << "trajectory " << files.trajectory.string() << '\n'
        << "rows " << files.rows.string() << '\n'
        << "histogram " << files.histogram.string() << '\n'
        << "summary " << files.summary.string() << '\n'
        << "acc " << format_double(o.summary.acc) << " collapsed " << (o.result.collapsed ? "true" : "false") << '\n';
    return kExitOk;
  });
}

struct CompareRow {
  std::string seed;  // seed offset, or "mean"
  std::string objective;
  std::string scenario;
  double acc = 0.0, fpr95 = 0.0, auroc = 0.0, mean_conf = 0.0;
  double collapsed = 0.0;  // 0/1 per seed, fraction for means
  std::string stream_hash;
};

// Runs every (seed, scenario, objective) on identical streams.
inline std::vector<CompareRow> compare_rows(const ExperimentConfig& base, const std::vector<ObjectiveKind>& objectives,
                                            const std::vector<ScenarioMode>& scenarios, std::size_t seeds) {
  std::vector<CompareRow> rows;
  for (std::size_t s = 0; s < seeds; ++s) {
    const auto seeded = with_seed_offset(base, s);
    const auto data = make_task(seeded);
    const auto ckpt = obtain_checkpoint(seeded, data, true);
    for (auto mode : scenarios) {
      auto cfg = seeded;
      cfg.scenario = scenario_for(seeded, mode);
      for (auto kind : objectives) {
        cfg.adapt.objective.kind = kind;
        const auto o = adapt_in_memory(cfg, data, ckpt);
        rows.push_back({std::to_string(s), to_string(kind), to_string(mode), o.summary.acc, o.summary.fpr95,
                        o.summary.auroc, o.summary.mean_conf, o.result.collapsed ? 1.0 : 0.0, hex64(o.stream_hash)});
      }
    }
  }
  std::vector<CompareRow> means;
  for (auto mode : scenarios) {
    for (auto kind : objectives) {
      CompareRow m{"mean", to_string(kind), to_string(mode), 0, 0, 0, 0, 0, ""};
      for (const auto& r : rows) {
        if (r.objective != m.objective || r.scenario != m.scenario) continue;
        m.acc += r.acc;
        m.fpr95 += r.fpr95;
        m.auroc += r.auroc;
        m.mean_conf += r.mean_conf;
        m.collapsed += r.collapsed;
      }
      const double n = static_cast<double>(seeds);
      m.acc /= n;
      m.fpr95 /= n;
      m.auroc /= n;
      m.mean_conf /= n;
      m.collapsed /= n;
      means.push_back(m);
    }
  }
  rows.insert(rows.end(), means.begin(), means.end());
  return rows;
}

inline std::string compare_csv(const std::vector<CompareRow>& rows, const std::string& hash) {
  std::map<std::pair<std::string, std::string>, const CompareRow*> em;
  for (const auto& r : rows)
    if (r.objective == "em") em[{r.seed, r.scenario}] = &r;
  std::string out = "seed,objective,scenario,acc,fpr95,auroc,mean_conf,collapsed,stream_hash,d_acc_vs_em,d_fpr95_vs_em,config_hash\n";
  for (const auto& r : rows) {
    const auto it = em.find({r.seed, r.scenario});
    const std::string d_acc = it == em.end() ? "" : format_double(r.acc - it->second->acc);
    const std::string d_fpr = it == em.end() ? "" : format_double(r.fpr95 - it->second->fpr95);
    out += r.seed + ',' + r.objective + ',' + r.scenario + ',' + format_double(r.acc) + ',' + format_double(r.fpr95) +
           ',' + format_double(r.auroc) + ',' + format_double(r.mean_conf) + ',' + format_double(r.collapsed) + ',' +
           r.stream_hash + ',' + d_acc + ',' + d_fpr + ',' + hash + '\n';
  }
  return out;
}

inline int cmd_compare(const std::string& config_path, const std::vector<std::string>& objectives,
                       const std::vector<std::string>& scenarios, std::size_t seeds, std::ostream& out,
                       std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = load_config(config_path);
    if (seeds == 0) throw UsageError("--seeds must be >= 1");
    std::vector<ObjectiveKind> kinds;
    std::vector<ScenarioMode> modes;
    try {
      for (const auto& o : objectives) kinds.push_back(parse_objective(o));
      for (const auto& s : scenarios) modes.push_back(parse_scenario(s));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    if (kinds.empty()) throw UsageError("at least one objective is required");
    if (modes.empty()) modes = {ScenarioMode::standard, ScenarioMode::open_world, ScenarioMode::lifelong,
                                ScenarioMode::imbalanced, ScenarioMode::mixed};
    // The table file name covers the config plus the requested matrix.
    std::string key = config_hash(cfg) + "|" + std::to_string(seeds);
    for (auto k : kinds) key += std::string("|") + to_string(k);
    for (auto m : modes) key += std::string("|") + to_string(m);
    const std::string id = hex64(fnv1a(key));
    const auto rows = compare_rows(cfg, kinds, modes, seeds);
    const auto path = std::filesystem::path(cfg.output_dir) / ("compare-" + id + ".csv");
    write_file_atomic(path, compare_csv(rows, config_hash(cfg)));
    out << "table " << path.string() << '\n';
    return kExitOk;
  });
}

// ---- randomized property suites ------------------------------------------------------

struct SuiteReport {
  std::string name;
  std::size_t trials = 0;
  double worst = 0.0;  // largest observed violation margin (or error)
  bool passed = true;
  std::string counterexample;
};

namespace detail {

inline std::string vec_string(std::span<const double> v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s + "]";
}

inline std::vector<double> random_logits(Rng& rng, std::size_t k, double lo, double hi) {
  std::vector<double> f(k);
  for (double& v : f) v = rng.uniform(lo, hi);
  return f;
}

}  // namespace detail

inline SuiteReport suite_opinion_algebra(Rng& rng, std::size_t trials) {
  SuiteReport r{"opinion_algebra", trials, 0.0, true, ""};
  for (std::size_t t = 0; t < trials && r.passed; ++t) {
    const std::size_t k = 2 + rng.below(9);
    const auto f = detail::random_logits(rng, k, -10.0, 10.0);
    const auto d = dirichlet_from_logits(f, EvidenceActivation::exponential);
    const auto m = opinion_from_dirichlet(d);
    double total = m.uncertainty;
    for (double b : m.beliefs) total += b;
    const double e1 = std::abs(total - 1.0);
    const auto p = expected_probability(d);
    const auto q = softmax(f);
    double e2 = 0.0;
    for (std::size_t i = 0; i < k; ++i) e2 = std::max(e2, std::abs(p[i] - q[i]));
    r.worst = std::max({r.worst, e1, e2});
    if (e1 > 1e-9 || e2 > 1e-12) {
      r.passed = false;
      r.counterexample = detail::vec_string(f);
    }
  }
  return r;
}

inline SuiteReport suite_sandwich(Rng& rng, std::size_t trials, bool inject_fault) {
  SuiteReport r{"uncertainty_sandwich", trials, 0.0, true, ""};
  for (std::size_t t = 0; t < trials && r.passed; ++t) {
    const std::size_t k = 2 + rng.below(9);
    const auto f = detail::random_logits(rng, k, 1e-3, 20.0);
    const double u = uncertainty_mass_lse(f);
    for (double p : {1.0, 2.0, 4.0}) {
      auto b = lemma1_bounds(f, p);
      if (inject_fault) b.upper *= 0.5;
      const double margin = std::max(b.lower - u, u - b.upper);
      r.worst = t == 0 && p == 1.0 ? margin : std::max(r.worst, margin);
      if (margin > 1e-12) {
        r.passed = false;
        r.counterexample = detail::vec_string(f) + " p=" + format_double(p);
        break;
      }
    }
  }
  return r;
}

inline SuiteReport suite_confidence_bound(Rng& rng, std::size_t trials) {
  SuiteReport r{"confidence_bound", trials, 0.0, true, ""};
  for (std::size_t t = 0; t < trials && r.passed; ++t) {
    const std::size_t k = 2 + rng.below(9);
    const auto f = detail::random_logits(rng, k, 1e-3, 20.0);
    const double u = uncertainty_mass_lse(f);
    const double delta = rng.uniform(0.0, u);
    const double u0 = u + rng.uniform(-delta, delta);
    if (!(u0 - delta > 0.0)) continue;
    const auto p = softmax(f);
    const double conf = *std::max_element(p.begin(), p.end());
    const double margin = conf - theorem1_confidence_bound(u0, delta, k);
    r.worst = t == 0 ? margin : std::max(r.worst, margin);
    if (margin > 1e-12) {
      r.passed = false;
      r.counterexample = detail::vec_string(f) + " u0=" + format_double(u0) + " delta=" + format_double(delta);
    }
  }
  return r;
}

// Central finite differences of `numeric` compared with the reverse-mode
// gradient of `loss` at `logits`.
template <typename Loss, typename Numeric>
double gradient_error(const Tensor& logits, Loss&& loss, Numeric&& numeric, double h = 1e-5) {
  Tape tape;
  const Tensor x = tape.variable(logits);
  const Tensor g = tape.backward(loss(x)).wrt(x);
  double worst = 0.0;
  std::vector<double> v(logits.values().begin(), logits.values().end());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + h;
    const double up = numeric(Tensor(logits.shape(), v)).item();
    v[i] = keep - h;
    const double down = numeric(Tensor(logits.shape(), v)).item();
    v[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(g[i] - fd) / std::max({1.0, std::abs(g[i]), std::abs(fd)}));
  }
  return worst;
}

template <typename Loss>
double gradient_error(const Tensor& logits, Loss&& loss, double h = 1e-5) {
  return gradient_error(logits, loss, loss, h);
}

// The stop-gradient is invisible to finite differences, so the numeric side of
// the come check freezes the row norms at their values at `at`.
inline Tensor come_loss_frozen_norm(const Tensor& x, const Tensor& at, const ObjectiveConfig& cfg) {
  const Tensor frozen = p_norm(at, cfg.p, 1);
  const Tensor direction = div_rows(x, p_norm(x, cfg.p, 1));
  return opinion_entropy_loss(scale(mul_rows(direction, frozen), cfg.tau), cfg.activation);
}

inline double objective_gradient_error(const Tensor& logits, const ObjectiveConfig& cfg,
                                       std::span<const std::size_t> pseudo = {}) {
  auto loss = [&](const Tensor& x) { return objective_loss(x, cfg, pseudo); };
  if (cfg.kind != ObjectiveKind::come) return gradient_error(logits, loss);
  return gradient_error(logits, loss, [&](const Tensor& x) { return come_loss_frozen_norm(x, logits, cfg); });
}

inline std::vector<std::pair<std::string, ObjectiveConfig>> gradient_check_objectives() {
  std::vector<std::pair<std::string, ObjectiveConfig>> out;
  out.push_back({"em", {ObjectiveKind::em}});
  for (double tau : {1.0, 2.0})
    for (double p : {1.0, 2.0})
      out.push_back({"come(tau=" + format_double(tau) + ",p=" + format_double(p) + ")",
                     {ObjectiveKind::come, p, tau, EvidenceActivation::exponential}});
  out.push_back({"pseudo_label", {ObjectiveKind::pseudo_label}});
  out.push_back({"energy", {ObjectiveKind::energy}});
  return out;
}

inline SuiteReport suite_gradients(Rng& rng, std::size_t trials) {
  SuiteReport r{"gradient_check", trials, 0.0, true, ""};
  const auto objectives = gradient_check_objectives();
  for (std::size_t t = 0; t < trials && r.passed; ++t) {
    const auto& [name, cfg] = objectives[t % objectives.size()];
    const std::size_t b = 1 + rng.below(3), k = 2 + rng.below(4);
    std::vector<double> v(b * k);
    // Zero is a kink of both the 1-norm and the clamped belief entropy.
    for (double& x : v) {
      do x = rng.normal(0.0, 2.0);
      while (std::abs(x) < 1e-2);
    }
    std::vector<std::size_t> pseudo(b);
    for (auto& y : pseudo) y = rng.below(k);
    const Tensor logits = Tensor::matrix(b, k, v);
    const double err = objective_gradient_error(logits, cfg, pseudo);
    r.worst = std::max(r.worst, err);
    if (!(err <= 1e-6)) {
      r.passed = false;
      r.counterexample = name + " " + detail::vec_string(v);
    }
  }
  return r;
}

inline std::vector<SuiteReport> run_verify_suites(std::uint64_t seed, std::size_t trials, bool inject_fault) {
  Rng root(seed);
  Rng a = root.fork(1), b = root.fork(2), c = root.fork(3), d = root.fork(4);
  return {suite_opinion_algebra(a, trials), suite_sandwich(b, trials, inject_fault), suite_confidence_bound(c, trials),
          suite_gradients(d, trials)};
}

inline int cmd_verify(std::uint64_t seed, std::size_t trials, bool inject_fault, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (trials == 0) throw UsageError("--trials must be >= 1");
    out << "seed " << seed << " trials " << trials << (inject_fault ? " inject_fault" : "") << '\n';
    bool ok = true;
    for (const auto& r : run_verify_suites(seed, trials, inject_fault)) {
      char worst[32];
      std::snprintf(worst, sizeof worst, "%.3e", r.worst);
      out << (r.passed ? "PASS " : "FAIL ") << r.name << " trials=" << r.trials << " worst=" << worst << '\n';
      if (!r.passed) out << "  counterexample " << r.counterexample << '\n';
      ok = ok && r.passed;
    }
    return ok ? kExitOk : kExitInternal;
  });
}

}  // namespace come
