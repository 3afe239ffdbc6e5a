#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "come/metrics.hpp"
#include "come/random.hpp"

using namespace come;

namespace {

std::vector<ScoredSample> make(const std::vector<double>& pos, const std::vector<double>& neg) {
  std::vector<ScoredSample> s;
  for (double v : pos) s.push_back({v, true, false});
  for (double v : neg) s.push_back({v, false, false});
  return s;
}

double brute_fpr(const std::vector<ScoredSample>& s, double target) {
  std::set<double> cands;
  for (const auto& x : s) cands.insert(x.score);
  double p = 0, n = 0;
  for (const auto& x : s) (x.positive ? p : n) += 1;
  for (auto it = cands.rbegin(); it != cands.rend(); ++it) {
    double tp = 0, fp = 0;
    for (const auto& x : s)
      if (x.score >= *it) (x.positive ? tp : fp) += 1;
    if (tp / p >= target) return fp / n;
  }
  return 1.0;
}

double brute_auroc(const std::vector<ScoredSample>& s) {
  double wins = 0, pairs = 0;
  for (const auto& a : s)
    for (const auto& b : s)
      if (a.positive && !b.positive) {
        pairs += 1;
        wins += a.score > b.score ? 1.0 : a.score == b.score ? 0.5 : 0.0;
      }
  return wins / pairs;
}

std::vector<ScoredSample> random_samples(Rng& rng, std::size_t n, bool ties) {
  std::vector<ScoredSample> s(n);
  for (auto& x : s) {
    x.score = ties ? static_cast<double>(rng.below(7)) / 6.0 : rng.uniform();
    x.positive = rng.uniform() < 0.4;
  }
  s[0].positive = true;
  s[1].positive = false;
  return s;
}

TrajectoryRecord record(const std::vector<std::pair<bool, bool>>& correct_outlier) {
  TrajectoryRecord r;
  for (auto [c, o] : correct_outlier) {
    RowRecord row;
    row.correct = c;
    row.outlier = o;
    row.confidence = c ? 0.9 : 0.4;
    row.uncertainty = c ? 0.1 : 0.6;
    r.rows.push_back(row);
  }
  return r;
}

}  // namespace

TEST(Accuracy, Examples) {
  EXPECT_EQ(accuracy({record({{true, false}, {true, false}})}), 1.0);
  EXPECT_EQ(accuracy({record({{true, false}, {false, false}})}), 0.5);
  EXPECT_EQ(accuracy({record({{true, false}, {false, false}}), record({{false, true}, {false, true}})}), 0.5);
  EXPECT_THROW(accuracy({record({{false, true}})}), MetricError);
}

TEST(FprAtTpr, Examples) {
  EXPECT_DOUBLE_EQ(fpr_at_tpr(make({0.9, 0.8}, {0.1, 0.85})), 0.5);
  EXPECT_EQ(fpr_at_tpr(make({0.9, 0.8, 0.7}, {0.1, 0.2})), 0.0);
  EXPECT_EQ(fpr_at_tpr(make({0.5, 0.5, 0.5}, {0.5, 0.5})), 1.0);
  EXPECT_THROW(fpr_at_tpr(make({0.5}, {})), MetricError);
  EXPECT_THROW(fpr_at_tpr(make({}, {0.5})), MetricError);
}

TEST(FprAtTpr, MatchesBruteForce) {
  Rng rng(51);
  for (int t = 0; t < 300; ++t) {
    const auto s = random_samples(rng, 2 + rng.below(199), t % 2 == 0);
    for (double target : {0.5, 0.8, 0.95, 1.0}) EXPECT_EQ(fpr_at_tpr(s, target), brute_fpr(s, target)) << t;
  }
}

TEST(FprAtTpr, NonIncreasingWhenANegativeScoreDrops) {
  Rng rng(52);
  for (int t = 0; t < 200; ++t) {
    auto s = random_samples(rng, 40, t % 2 == 0);
    const double before = fpr_at_tpr(s);
    for (auto& x : s)
      if (!x.positive) {
        x.score -= rng.uniform(0.0, 0.5);
        break;
      }
    EXPECT_LE(fpr_at_tpr(s), before);
  }
}

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(make({0.9, 0.8}, {0.1, 0.2})), 1.0);
  EXPECT_EQ(auroc(make({0.3, 0.3}, {0.3, 0.3, 0.3})), 0.5);
  const auto six = make({0.9, 0.4, 0.6}, {0.6, 0.2, 0.5});
  EXPECT_DOUBLE_EQ(auroc(six), brute_auroc(six));
  EXPECT_DOUBLE_EQ(auroc(six), 6.5 / 9.0);  // 3 + 1 + (2 + tie)
}

TEST(Auroc, MatchesPairwiseOracleAndIgnoresMonotoneTransforms) {
  Rng rng(53);
  for (int t = 0; t < 300; ++t) {
    auto s = random_samples(rng, 2 + rng.below(199), t % 2 == 0);
    const double a = auroc(s);
    EXPECT_NEAR(a, brute_auroc(s), 1e-12);
    for (auto& x : s) x.score = std::exp(3.0 * x.score) - 7.0;
    EXPECT_NEAR(auroc(s), a, 1e-12);
  }
}

TEST(Scores, Examples) {
  EXPECT_DOUBLE_EQ(score_from_probabilities({0.25, 0.25, 0.25, 0.25}), 0.75);
  EXPECT_EQ(score_from_probabilities({0.0, 1.0, 0.0}), 0.0);
  EXPECT_EQ(score_from_opinion(Opinion{{0, 0, 0}, 1.0}), 1.0);
  RowRecord row;
  row.confidence = 0.7;
  row.uncertainty = 0.2;
  EXPECT_DOUBLE_EQ(score_from_row(row, ScoreKind::one_minus_maxprob), 0.3);
  EXPECT_EQ(score_from_row(row, ScoreKind::uncertainty_mass), 0.2);
}

TEST(Scores, OutliersAndMistakesArePositive) {
  const auto s = scored_samples({record({{true, false}, {false, false}, {false, true}})}, ScoreKind::one_minus_maxprob);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_FALSE(s[0].positive);
  EXPECT_TRUE(s[1].positive);
  EXPECT_TRUE(s[2].positive);
  EXPECT_TRUE(s[2].outlier);
}

TEST(Histogram, Examples) {
  EXPECT_EQ(histogram({0.5}, 2).counts, (std::vector<std::size_t>{0, 1}));
  std::vector<double> grid;
  for (int i = 0; i < 10; ++i) grid.push_back(0.05 + 0.1 * i);
  EXPECT_EQ(histogram(grid, 10).counts, std::vector<std::size_t>(10, 1));
  EXPECT_EQ(histogram({0.0, 1.0}, 4).counts, (std::vector<std::size_t>{1, 0, 0, 1}));
  EXPECT_THROW(histogram({0.5}, 0), MetricError);
  const auto h = histogram({}, 3);
  EXPECT_EQ(h.edges.size(), 4u);
  EXPECT_EQ(histogram_csv(histogram({0.5}, 2)), "bin_left,bin_right,count\n0,0.5,0\n0.5,1,1\n");
}

TEST(Histogram, ConservesCount) {
  Rng rng(54);
  std::vector<double> v(1000);
  for (double& x : v) x = rng.uniform();
  const auto h = histogram(v, 17);
  std::size_t total = 0;
  for (auto c : h.counts) total += c;
  EXPECT_EQ(total, v.size());
}

TEST(Summary, AggregatesRows) {
  const std::vector<TrajectoryRecord> recs = {record({{true, false}, {false, false}}), record({{true, false}, {false, true}})};
  const auto s = summarize(recs);
  EXPECT_EQ(s.n, 4u);
  EXPECT_DOUBLE_EQ(s.acc, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.mean_conf, (0.9 + 0.4 + 0.9 + 0.4) / 4);
  EXPECT_DOUBLE_EQ(s.mean_u, (0.1 + 0.6 + 0.1 + 0.6) / 4);
  EXPECT_EQ(s.fpr95, 0.0);
  EXPECT_EQ(s.auroc, 1.0);
  EXPECT_NEAR(s.acc + (1.0 - s.acc), 1.0, 1e-15);
  const auto all_right = summarize({record({{true, false}})});
  EXPECT_TRUE(std::isnan(all_right.fpr95));
}
