#pragma once

// Synthetic source task (gaussian clusters around unit-norm class means),
// corruptions with five severity levels, outlier classes, and the test-stream
// orderings: standard, open-world, lifelong, imbalanced and mixed.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "come/autodiff.hpp"
#include "come/data.hpp"
#include "come/random.hpp"

namespace come {

class SeparationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SourceTaskConfig {
  std::size_t classes = 8;
  std::size_t dim = 16;
  std::size_t samples_per_class = 500;
  double sigma_clean = 0.2;
  double min_separation_deg = 60.0;
  std::size_t outlier_classes = 4;
  std::uint64_t seed = 1;
};

struct SourceTask {
  std::size_t k = 0;
  std::size_t d = 0;
  std::vector<std::vector<double>> means;          // k unit vectors
  std::vector<std::vector<double>> outlier_means;  // unit vectors far from every class mean
  double sigma_clean = 0.2;
  double min_separation_deg = 60.0;
  std::uint64_t seed = 0;
};

struct SourceTaskData {
  SourceTask task;
  LabeledBatch train;
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void normalize(std::vector<double>& v) {
  const double n = std::sqrt(dot(v, v));
  for (double& x : v) x /= n;
}

inline std::vector<double> random_unit(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  do {
    for (double& x : v) x = rng.normal();
  } while (dot(v, v) < 1e-12);
  normalize(v);
  return v;
}

inline double angle_deg(const std::vector<double>& a, const std::vector<double>& b) {
  return std::acos(std::clamp(dot(a, b), -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

inline constexpr int kMaxSeparationIterations = 10000;

// Pairwise repulsion on the unit sphere until every angle meets the minimum.
inline std::vector<std::vector<double>> separated_means(Rng& rng, std::size_t k, std::size_t d, double min_deg) {
  std::vector<std::vector<double>> means(k);
  for (auto& m : means) m = random_unit(rng, d);
  const double max_cos = std::cos(min_deg * std::numbers::pi / 180.0);
  for (int iter = 0; iter < kMaxSeparationIterations; ++iter) {
    bool ok = true;
    auto next = means;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        if (i == j) continue;
        const double c = dot(means[i], means[j]);
        if (c > max_cos - 1e-9) {
          ok = false;
          for (std::size_t t = 0; t < d; ++t) next[i][t] -= 0.1 * (c - max_cos + 0.05) * means[j][t];
        }
      }
    if (ok) return means;
    for (auto& m : next) normalize(m);
    means = std::move(next);
  }
  throw SeparationError("could not place " + std::to_string(k) + " class means " + std::to_string(min_deg) +
                        " degrees apart in dimension " + std::to_string(d) + "; try a larger dimension");
}

}  // namespace detail

inline SourceTaskData make_source_task(const SourceTaskConfig& cfg) {
  if (cfg.classes < 2) throw std::invalid_argument("source task needs at least 2 classes");
  if (cfg.dim < 2) throw std::invalid_argument("source task needs dimension >= 2");
  if (!(cfg.sigma_clean > 0.0)) throw std::invalid_argument("sigma_clean must be > 0");
  Rng rng(cfg.seed);
  SourceTaskData out;
  SourceTask& task = out.task;
  task.k = cfg.classes;
  task.d = cfg.dim;
  task.sigma_clean = cfg.sigma_clean;
  task.min_separation_deg = cfg.min_separation_deg;
  task.seed = cfg.seed;
  task.means = detail::separated_means(rng, cfg.classes, cfg.dim, cfg.min_separation_deg);

  Rng outlier_rng = rng.fork(1);
  for (std::size_t o = 0; o < cfg.outlier_classes; ++o) {
    bool placed = false;
    for (int attempt = 0; attempt < detail::kMaxSeparationIterations && !placed; ++attempt) {
      auto cand = detail::random_unit(outlier_rng, cfg.dim);
      placed = std::all_of(task.means.begin(), task.means.end(), [&](const auto& m) {
        return detail::angle_deg(cand, m) >= cfg.min_separation_deg;
      });
      if (placed) task.outlier_means.push_back(std::move(cand));
    }
    if (!placed) {
      throw SeparationError("could not place an outlier mean " + std::to_string(cfg.min_separation_deg) +
                            " degrees from every class mean; try a larger dimension");
    }
  }

  const std::size_t n = cfg.classes * cfg.samples_per_class;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % cfg.classes);
  Rng sample_rng = rng.fork(2);
  sample_rng.shuffle(labels);
  std::vector<double> x(n * cfg.dim);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < cfg.dim; ++t)
      x[i * cfg.dim + t] = task.means[labels[i]][t] + sample_rng.normal(0.0, cfg.sigma_clean);
  out.train = LabeledBatch{Tensor::matrix(n, cfg.dim, std::move(x)), std::move(labels), "clean", 0, 0};
  return out;
}

inline SourceTaskData make_source_task(std::size_t k, std::size_t d, std::uint64_t seed) {
  SourceTaskConfig cfg;
  cfg.classes = k;
  cfg.dim = d;
  cfg.seed = seed;
  return make_source_task(cfg);
}

// Clean rows around the class means for the given labels.
inline Tensor sample_features(const SourceTask& task, const std::vector<int>& labels, Rng& rng) {
  std::vector<double> x(labels.size() * task.d);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& mu = task.means.at(static_cast<std::size_t>(labels[i]));
    for (std::size_t t = 0; t < task.d; ++t) x[i * task.d + t] = mu[t] + rng.normal(0.0, task.sigma_clean);
  }
  return Tensor::matrix(labels.size(), task.d, std::move(x));
}

inline LabeledBatch sample_clean(const SourceTask& task, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> labels(count);
  for (int& y : labels) y = static_cast<int>(rng.below(task.k));
  Tensor x = sample_features(task, labels, rng);
  return LabeledBatch{std::move(x), std::move(labels), "clean", 0, 0};
}

// ---- corruptions ---------------------------------------------------------------

enum class CorruptionKind { additive_gaussian, feature_dropout, affine_shift };

inline const char* to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::additive_gaussian: return "additive_gaussian";
    case CorruptionKind::feature_dropout: return "feature_dropout";
    case CorruptionKind::affine_shift: return "affine_shift";
  }
  return "?";
}

inline CorruptionKind parse_corruption(const std::string& s) {
  if (s == "additive_gaussian") return CorruptionKind::additive_gaussian;
  if (s == "feature_dropout") return CorruptionKind::feature_dropout;
  if (s == "affine_shift") return CorruptionKind::affine_shift;
  throw std::invalid_argument("unknown corruption kind '" + s + "'");
}

// Severity 1..5 indexes a strictly increasing scale table:
//   additive_gaussian  noise stddev in units of sigma_clean
//   feature_dropout    per-feature drop probability
//   affine_shift       fraction of a 90 degree rotation plus a translation of 0.5
inline std::array<double, 5> default_scale_table(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::additive_gaussian: return {0.25, 0.5, 1.0, 1.5, 2.0};
    case CorruptionKind::feature_dropout: return {0.1, 0.2, 0.3, 0.4, 0.5};
    case CorruptionKind::affine_shift: return {0.2, 0.4, 0.6, 0.8, 1.0};
  }
  return {};
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::additive_gaussian;
  int severity = 5;
  std::array<double, 5> scale_table = default_scale_table(CorruptionKind::additive_gaussian);
  std::uint64_t transform_seed = 0;  // fixes the affine_shift rotation plane and translation

  static CorruptionSpec make(CorruptionKind kind, int severity, std::uint64_t transform_seed = 0) {
    return CorruptionSpec{kind, severity, default_scale_table(kind), transform_seed};
  }

  void validate() const {
    if (severity < 1 || severity > 5) throw std::invalid_argument("corruption severity must be in 1..5");
    for (std::size_t i = 1; i < scale_table.size(); ++i) {
      if (!(scale_table[i] > scale_table[i - 1])) throw std::invalid_argument("corruption scale table must increase");
    }
  }

  double scale() const { return scale_table[static_cast<std::size_t>(severity - 1)]; }
  std::string tag() const { return std::string(to_string(kind)) + "@" + std::to_string(severity); }
};

inline LabeledBatch corrupt(const LabeledBatch& batch, const CorruptionSpec& spec, std::uint64_t seed,
                            double sigma_clean = 1.0) {
  spec.validate();
  const double s = spec.scale();
  const std::size_t n = batch.features.rows(), d = batch.features.cols();
  std::vector<double> x(batch.features.values().begin(), batch.features.values().end());
  Rng rng(seed);
  switch (spec.kind) {
    case CorruptionKind::additive_gaussian:
      if (s != 0.0)
        for (double& v : x) v += rng.normal(0.0, s * sigma_clean);
      break;
    case CorruptionKind::feature_dropout:
      for (double& v : x)
        if (rng.uniform() < s) v = 0.0;
      break;
    case CorruptionKind::affine_shift: {
      if (s == 0.0) break;
      Rng t(spec.transform_seed);
      auto u = detail::random_unit(t, d);
      auto w = detail::random_unit(t, d);
      const double uw = detail::dot(u, w);
      for (std::size_t i = 0; i < d; ++i) w[i] -= uw * u[i];
      detail::normalize(w);
      const auto shift = detail::random_unit(t, d);
      const double theta = s * std::numbers::pi / 2.0;
      const double c = std::cos(theta) - 1.0, sn = std::sin(theta);
      for (std::size_t r = 0; r < n; ++r) {
        double* row = x.data() + r * d;
        double pu = 0.0, pw = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          pu += row[i] * u[i];
          pw += row[i] * w[i];
        }
        // rotate the (u, w) component by theta, leave the orthogonal complement
        for (std::size_t i = 0; i < d; ++i) {
          row[i] += c * (pu * u[i] + pw * w[i]) + sn * (pu * w[i] - pw * u[i]) + 0.5 * s * shift[i];
        }
      }
      break;
    }
  }
  LabeledBatch out = batch;
  out.features = Tensor(batch.features.shape(), std::move(x));
  out.corruption = spec.tag();
  return out;
}

// Rows around the outlier means, labelled kOutlierLabel.
inline LabeledBatch make_outliers(const SourceTask& task, std::size_t count, std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("make_outliers: count must be >= 1");
  if (task.outlier_means.empty()) throw SeparationError("task has no outlier means");
  Rng rng(seed);
  std::vector<double> x(count * task.d);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& mu = task.outlier_means[rng.below(task.outlier_means.size())];
    for (std::size_t t = 0; t < task.d; ++t) x[i * task.d + t] = mu[t] + rng.normal(0.0, task.sigma_clean);
  }
  return LabeledBatch{Tensor::matrix(count, task.d, std::move(x)), std::vector<int>(count, kOutlierLabel), "outlier",
                      0, 0};
}

// ---- streams -------------------------------------------------------------------

enum class ScenarioMode { standard, open_world, lifelong, imbalanced, mixed };

inline const char* to_string(ScenarioMode m) {
  switch (m) {
    case ScenarioMode::standard: return "standard";
    case ScenarioMode::open_world: return "open_world";
    case ScenarioMode::lifelong: return "lifelong";
    case ScenarioMode::imbalanced: return "imbalanced";
    case ScenarioMode::mixed: return "mixed";
  }
  return "?";
}

inline ScenarioMode parse_scenario(const std::string& s) {
  if (s == "standard") return ScenarioMode::standard;
  if (s == "open_world") return ScenarioMode::open_world;
  if (s == "lifelong") return ScenarioMode::lifelong;
  if (s == "imbalanced") return ScenarioMode::imbalanced;
  if (s == "mixed") return ScenarioMode::mixed;
  throw std::invalid_argument("unknown scenario '" + s + "'");
}

struct ScenarioSpec {
  ScenarioMode mode = ScenarioMode::standard;
  std::vector<CorruptionSpec> schedule{CorruptionSpec::make(CorruptionKind::additive_gaussian, 5)};
  double outlier_ratio = 0.5;  // used by open_world only
  std::size_t batch_size = 64;
  std::size_t num_batches = 300;
  std::uint64_t seed = 4;

  void validate() const {
    if (schedule.empty()) throw std::invalid_argument("scenario schedule is empty");
    for (const auto& c : schedule) c.validate();
    if (batch_size == 0) throw std::invalid_argument("scenario batch_size must be >= 1");
    if (num_batches == 0) throw std::invalid_argument("scenario num_batches must be >= 1");
    if (!(outlier_ratio >= 0.0 && outlier_ratio < 1.0)) throw std::invalid_argument("outlier_ratio must be in [0, 1)");
    if (mode == ScenarioMode::open_world && !(outlier_ratio > 0.0)) {
      throw std::invalid_argument("open_world scenario needs outlier_ratio > 0");
    }
    if (mode == ScenarioMode::lifelong && schedule.size() < 2) {
      throw std::invalid_argument("lifelong scenario needs a schedule of at least 2 corruptions");
    }
  }

  // Outlier rows per open-world batch, rounded to the nearest integer.
  std::size_t outliers_per_batch() const {
    return static_cast<std::size_t>(std::lround(outlier_ratio * static_cast<double>(batch_size)));
  }
};

namespace detail {

inline LabeledBatch concat_batches(const LabeledBatch& a, const LabeledBatch& b) {
  std::vector<double> x(a.features.values().begin(), a.features.values().end());
  x.insert(x.end(), b.features.values().begin(), b.features.values().end());
  std::vector<int> y = a.labels;
  y.insert(y.end(), b.labels.begin(), b.labels.end());
  const std::size_t d = a.features.cols();
  return LabeledBatch{Tensor::matrix(y.size(), d, std::move(x)), std::move(y), a.corruption, a.index, a.segment};
}

inline LabeledBatch permute_rows(const LabeledBatch& b, const std::vector<std::size_t>& order) {
  LabeledBatch out = b;
  out.features = take_rows(b.features, order);
  for (std::size_t i = 0; i < order.size(); ++i) out.labels[i] = b.labels[order[i]];
  return out;
}

}  // namespace detail

inline std::vector<LabeledBatch> build_stream(const SourceTask& task, const ScenarioSpec& spec) {
  spec.validate();
  std::vector<LabeledBatch> stream;
  stream.reserve(spec.num_batches);
  Rng rng(spec.seed);
  const std::size_t bsz = spec.batch_size;

  auto clean_batch = [&](std::vector<int> labels) {
    Tensor x = sample_features(task, labels, rng);
    return LabeledBatch{std::move(x), std::move(labels), "clean", 0, 0};
  };
  auto random_labels = [&](std::size_t n) {
    std::vector<int> y(n);
    for (int& v : y) v = static_cast<int>(rng.below(task.k));
    return y;
  };

  for (std::size_t b = 0; b < spec.num_batches; ++b) {
    const std::uint64_t batch_seed = mix_seed(spec.seed, b);
    LabeledBatch batch;
    std::size_t segment = 0;
    switch (spec.mode) {
      case ScenarioMode::standard:
        batch = corrupt(clean_batch(random_labels(bsz)), spec.schedule[0], batch_seed, task.sigma_clean);
        break;
      case ScenarioMode::open_world: {
        const std::size_t n_out = spec.outliers_per_batch();
        LabeledBatch in = clean_batch(random_labels(bsz - n_out));
        if (n_out > 0) {
          LabeledBatch out = make_outliers(task, n_out, mix_seed(batch_seed, 1));
          in = bsz == n_out ? out : detail::concat_batches(in, out);
        }
        batch = corrupt(in, spec.schedule[0], batch_seed, task.sigma_clean);
        std::vector<std::size_t> order(bsz);
        for (std::size_t i = 0; i < bsz; ++i) order[i] = i;
        rng.shuffle(order);
        batch = detail::permute_rows(batch, order);
        break;
      }
      case ScenarioMode::lifelong:
        segment = b * spec.schedule.size() / spec.num_batches;
        batch = corrupt(clean_batch(random_labels(bsz)), spec.schedule[segment], batch_seed, task.sigma_clean);
        break;
      case ScenarioMode::imbalanced: {
        const int cls = static_cast<int>(b * task.k / spec.num_batches);
        batch = corrupt(clean_batch(std::vector<int>(bsz, cls)), spec.schedule[0], batch_seed, task.sigma_clean);
        break;
      }
      case ScenarioMode::mixed: {
        LabeledBatch clean = clean_batch(random_labels(bsz));
        std::vector<std::size_t> which(bsz);
        for (auto& w : which) w = rng.below(spec.schedule.size());
        std::vector<double> x(clean.features.values().begin(), clean.features.values().end());
        const std::size_t d = task.d;
        for (std::size_t s = 0; s < spec.schedule.size(); ++s) {
          std::vector<std::size_t> rows;
          for (std::size_t i = 0; i < bsz; ++i)
            if (which[i] == s) rows.push_back(i);
          if (rows.empty()) continue;
          LabeledBatch part{take_rows(clean.features, rows), {}, "", 0, 0};
          part.labels.assign(rows.size(), 0);
          const LabeledBatch hit = corrupt(part, spec.schedule[s], mix_seed(batch_seed, s + 1), task.sigma_clean);
          for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t t = 0; t < d; ++t) x[rows[i] * d + t] = hit.features[i * d + t];
        }
        batch = clean;
        batch.features = Tensor::matrix(bsz, d, std::move(x));
        batch.corruption = "mixed";
        break;
      }
    }
    batch.index = b;
    batch.segment = segment;
    stream.push_back(std::move(batch));
  }
  return stream;
}

// ---- stream dump (line-delimited JSON) --------------------------------------------

inline nlohmann::json batch_to_json(const LabeledBatch& b, ScenarioMode mode) {
  return {{"index", b.index},
          {"mode", to_string(mode)},
          {"corruption", b.corruption},
          {"segment", b.segment},
          {"features", std::vector<double>(b.features.values().begin(), b.features.values().end())},
          {"labels", b.labels}};
}

inline LabeledBatch batch_from_json(const nlohmann::json& j) {
  LabeledBatch b;
  b.index = j.at("index").get<std::size_t>();
  b.corruption = j.at("corruption").get<std::string>();
  b.segment = j.value("segment", std::size_t{0});
  b.labels = j.at("labels").get<std::vector<int>>();
  auto x = j.at("features").get<std::vector<double>>();
  if (b.labels.empty() || x.size() % b.labels.size() != 0) throw std::runtime_error("malformed stream record");
  const std::size_t d = x.size() / b.labels.size();
  b.features = Tensor::matrix(b.labels.size(), d, std::move(x));
  return b;
}

inline void write_stream(const std::string& path, const std::vector<LabeledBatch>& stream, ScenarioMode mode) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (const auto& b : stream) out << batch_to_json(b, mode).dump() << '\n';
}

inline std::vector<LabeledBatch> read_stream(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open stream " + path);
  std::vector<LabeledBatch> stream;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    stream.push_back(batch_from_json(nlohmann::json::parse(line)));
  }
  return stream;
}

// FNV-1a over the bytes of every feature value and label.
inline std::uint64_t stream_hash(const std::vector<LabeledBatch>& stream) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& b : stream) {
    feed(b.features.values().data(), b.features.size() * sizeof(double));
    feed(b.labels.data(), b.labels.size() * sizeof(int));
  }
  return h;
}

}  // namespace come
