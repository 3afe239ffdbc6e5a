#pragma once

// Accuracy, FPR at a fixed TPR, AUROC and confidence histograms. Positives are
// rows that should look suspicious: misclassified in-distribution rows and
// every outlier row.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "come/engine.hpp"
#include "come/opinion.hpp"

namespace come {

struct ScoredSample {
  double score = 0.0;  // higher means more suspect
  bool positive = false;
  bool outlier = false;
};

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline double accuracy(const std::vector<TrajectoryRecord>& records) {
  std::size_t correct = 0, total = 0;
  for (const auto& r : records)
    for (const auto& row : r.rows) {
      if (row.outlier) continue;
      ++total;
      correct += row.correct;
    }
  if (total == 0) throw MetricError("accuracy: no in-distribution rows");
  return static_cast<double>(correct) / static_cast<double>(total);
}

namespace detail {
inline void check_both_classes(const std::vector<ScoredSample>& samples, const char* op) {
  const bool pos = std::any_of(samples.begin(), samples.end(), [](const auto& s) { return s.positive; });
  const bool neg = std::any_of(samples.begin(), samples.end(), [](const auto& s) { return !s.positive; });
  if (!pos || !neg) throw MetricError(std::string(op) + ": needs at least one positive and one negative sample");
}
}  // namespace detail

// Threshold t is the largest value with #(positives >= t) / P >= tpr_target;
// returns #(negatives >= t) / N.
inline double fpr_at_tpr(const std::vector<ScoredSample>& samples, double tpr_target = 0.95) {
  detail::check_both_classes(samples, "fpr_at_tpr");
  std::vector<double> pos, neg;
  for (const auto& s : samples) (s.positive ? pos : neg).push_back(s.score);
  std::sort(pos.begin(), pos.end(), std::greater<>());
  const double p = static_cast<double>(pos.size());
  double threshold = pos.back();
  for (std::size_t i = 0; i < pos.size(); ++i) {
    if (i + 1 < pos.size() && pos[i + 1] == pos[i]) continue;  // count every tie at this score
    if (static_cast<double>(i + 1) / p >= tpr_target) {
      threshold = pos[i];
      break;
    }
  }
  const auto above = std::count_if(neg.begin(), neg.end(), [threshold](double s) { return s >= threshold; });
  return static_cast<double>(above) / static_cast<double>(neg.size());
}

// P(positive score > negative score) + 0.5 P(tie), from the rank-sum statistic.
inline double auroc(const std::vector<ScoredSample>& samples) {
  detail::check_both_classes(samples, "auroc");
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return samples[a].score < samples[b].score; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && samples[order[j]].score == samples[order[i]].score) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1 .. j
    for (std::size_t t = i; t < j; ++t) {
      if (samples[order[t]].positive) {
        rank_sum += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const double p = static_cast<double>(n_pos);
  const double n = static_cast<double>(samples.size() - n_pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

enum class ScoreKind { one_minus_maxprob, uncertainty_mass };

inline const char* to_string(ScoreKind k) {
  return k == ScoreKind::one_minus_maxprob ? "one_minus_maxprob" : "uncertainty_mass";
}

inline ScoreKind parse_score(const std::string& s) {
  if (s == "one_minus_maxprob") return ScoreKind::one_minus_maxprob;
  if (s == "uncertainty_mass") return ScoreKind::uncertainty_mass;
  throw std::invalid_argument("unknown score kind '" + s + "'");
}

inline double score_from_probabilities(const std::vector<double>& p) {
  if (p.empty()) throw MetricError("score: empty probability vector");
  return 1.0 - *std::max_element(p.begin(), p.end());
}

inline double score_from_opinion(const Opinion& m) { return m.uncertainty; }

inline double score_from_row(const RowRecord& row, ScoreKind kind) {
  return kind == ScoreKind::one_minus_maxprob ? 1.0 - row.confidence : row.uncertainty;
}

inline std::vector<ScoredSample> scored_samples(const std::vector<TrajectoryRecord>& records, ScoreKind kind) {
  std::vector<ScoredSample> out;
  for (const auto& r : records)
    for (const auto& row : r.rows) out.push_back({score_from_row(row, kind), row.outlier || !row.correct, row.outlier});
  return out;
}

struct Histogram {
  std::vector<double> edges;  // bins + 1 edges over [0, 1]
  std::vector<std::size_t> counts;
};

// Equal-width bins over [0, 1]; values outside are clamped into the end bins.
inline Histogram histogram(const std::vector<double>& values, std::size_t bins) {
  if (bins == 0) throw MetricError("histogram: bins must be >= 1");
  Histogram h;
  h.counts.assign(bins, 0);
  for (std::size_t i = 0; i <= bins; ++i) h.edges.push_back(static_cast<double>(i) / static_cast<double>(bins));
  for (double v : values) {
    const double c = std::clamp(v, 0.0, 1.0);
    auto bin = static_cast<std::size_t>(c * static_cast<double>(bins));
    h.counts[std::min(bin, bins - 1)]++;
  }
  return h;
}

inline std::string histogram_csv(const Histogram& h) {
  std::string out = "bin_left,bin_right,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    out += format_double(h.edges[i]) + ',' + format_double(h.edges[i + 1]) + ',' + std::to_string(h.counts[i]) + '\n';
  }
  return out;
}

struct Summary {
  double acc = 0.0;
  double fpr95 = 0.0;
  double auroc = 0.0;
  double mean_conf = 0.0;
  double mean_u = 0.0;
  double mean_abs_du = 0.0;
  std::size_t n = 0;
};

inline Summary summarize(const std::vector<TrajectoryRecord>& records, ScoreKind kind = ScoreKind::one_minus_maxprob,
                         double tpr = 0.95) {
  Summary s;
  s.acc = accuracy(records);
  const auto samples = scored_samples(records, kind);
  const bool both = std::any_of(samples.begin(), samples.end(), [](const auto& x) { return x.positive; }) &&
                    std::any_of(samples.begin(), samples.end(), [](const auto& x) { return !x.positive; });
  s.fpr95 = both ? fpr_at_tpr(samples, tpr) : std::nan("");
  s.auroc = both ? auroc(samples) : std::nan("");
  double du = 0.0;
  for (const auto& r : records) {
    for (const auto& row : r.rows) {
      s.mean_conf += row.confidence;
      s.mean_u += row.uncertainty;
    }
    s.n += r.rows.size();
    du += r.mean_abs_du * static_cast<double>(r.rows.size());
  }
  if (s.n > 0) {
    s.mean_conf /= static_cast<double>(s.n);
    s.mean_u /= static_cast<double>(s.n);
    s.mean_abs_du = du / static_cast<double>(s.n);
  }
  return s;
}

}  // namespace come
