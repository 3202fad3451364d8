#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "clipflow/scorer_eval.hpp"
#include "test_util.hpp"

using namespace clipflow;
using clipflow::testing::random_vector;

namespace {

std::vector<ScoredSample> make(std::initializer_list<std::pair<double, int>> xs, const std::string& ds = "d") {
  std::vector<ScoredSample> out;
  for (auto [s, l] : xs) out.push_back({s, l, ds});
  return out;
}

// Mean precision at the rank of each positive, ranks from an explicit
// descending sort of distinct scores.
double brute_ap(std::vector<ScoredSample> s) {
  std::stable_sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  double sum = 0;
  int pos = 0;
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (s[k].label != 1) continue;
    int hits = 0;
    for (std::size_t j = 0; j <= k; ++j) hits += s[j].label;
    sum += static_cast<double>(hits) / static_cast<double>(k + 1);
    ++pos;
  }
  return sum / pos;
}

double brute_threshold(const std::vector<ScoredSample>& s) {
  std::vector<double> v;
  for (const auto& x : s) v.push_back(x.score);
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  double best = -1, best_t = 0;
  for (std::size_t i = 0; i + 1 < v.size(); ++i) {
    const double t = v[i] + 0.5 * (v[i + 1] - v[i]);
    const double b = balanced_accuracy(s, t);
    if (b > best + 1e-12) {
      best = b;
      best_t = t;
    }
  }
  return best_t;
}

}  // namespace

TEST(Score, IdentityModelValues) {
  Model m;
  m.adapter = identity_adapter(128);
  m.flow = init_flow({128, 2, 8, 1.9}, 0);
  Eigen::VectorXd x = Eigen::VectorXd::Constant(128, 3.0);
  EXPECT_NEAR(anomaly_score(x, m), 1.0 / 256.0, 1e-15);

  m.adapter.normalize = false;
  std::mt19937_64 rng(1);
  x = random_vector(128, rng);
  const double ll = log_likelihood(x, m.flow);
  EXPECT_NEAR(anomaly_score(x, m), -ll / 128.0 - 0.5 * std::log(2 * std::numbers::pi), 1e-12);
  x = Eigen::VectorXd::Constant(128, std::sqrt(2.0));
  EXPECT_NEAR(anomaly_score(x, m), 1.0, 1e-12);
}

TEST(Score, MatchesLikelihoodForRandomFlow) {
  Model m;
  m.adapter = init_adapter(10, 6, 2);
  m.flow = init_flow({6, 3, 8, 1.9}, 3);
  clipflow::testing::randomize_flow(m.flow, 4, 0.3);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20; ++i) {
    const Eigen::VectorXd raw = random_vector(10, rng);
    const double ll = log_likelihood(adapt(raw, m.adapter), m.flow);
    EXPECT_NEAR(anomaly_score(raw, m), -ll / 6.0 - 0.5 * std::log(2 * std::numbers::pi), 1e-12);
  }
}

TEST(AveragePrecision, Examples) {
  EXPECT_DOUBLE_EQ(average_precision(make({{0.9, 1}, {0.8, 1}, {0.2, 0}, {0.1, 0}})), 1.0);
  EXPECT_DOUBLE_EQ(average_precision(make({{0.9, 1}, {0.8, 0}, {0.7, 1}, {0.1, 0}})), 5.0 / 6.0);
  EXPECT_DOUBLE_EQ(average_precision(make({{0.1, 1}, {0.9, 0}})), 0.5);
  EXPECT_THROW(average_precision(make({{0.9, 1}, {0.8, 1}})), ConfigError);
  EXPECT_THROW(average_precision(make({{0.9, 0}})), ConfigError);
  EXPECT_THROW(average_precision(make({{0.9, 2}, {0.1, 0}})), ConfigError);
}

TEST(AveragePrecision, MatchesBruteForce) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> n_dist(2, 40), bit(0, 1);
  std::normal_distribution<double> score(0, 1);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<ScoredSample> s;
    const int n = n_dist(rng);
    for (int i = 0; i < n; ++i) s.push_back({score(rng), bit(rng), "d"});
    s[0].label = 1;
    s[1].label = 0;
    EXPECT_NEAR(average_precision(s), brute_ap(s), 1e-12);
  }
}

TEST(AveragePrecision, InvariantUnderMonotoneTransform) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> score(0, 1);
  std::vector<ScoredSample> s;
  for (int i = 0; i < 50; ++i) s.push_back({score(rng), i % 3 == 0 ? 1 : 0, "d"});
  auto t = s;
  for (auto& x : t) x.score = std::exp(2 * x.score) + 5;
  EXPECT_EQ(average_precision(s), average_precision(t));
}

TEST(Threshold, SeparableExample) {
  const auto s = make({{0.1, 0}, {0.2, 0}, {0.8, 1}, {0.9, 1}});
  EXPECT_DOUBLE_EQ(pick_threshold(s), 0.5);
  EXPECT_DOUBLE_EQ(accuracy(s, 0.5), 1.0);
}

TEST(Threshold, TiesGoToLowerThreshold) {
  const auto s = make({{0.1, 0}, {0.2, 1}, {0.3, 0}, {0.4, 1}});
  EXPECT_DOUBLE_EQ(pick_threshold(s), 0.15);
  EXPECT_DOUBLE_EQ(balanced_accuracy(s, 0.15), 0.75);
  EXPECT_DOUBLE_EQ(balanced_accuracy(s, 0.35), 0.75);
}

TEST(Threshold, NeedsBothClasses) {
  EXPECT_THROW(pick_threshold(make({{0.1, 1}, {0.2, 1}})), ConfigError);
  EXPECT_THROW(pick_threshold(make({{0.1, 0}})), ConfigError);
}

TEST(Threshold, MatchesBruteForceSweep) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> n_dist(2, 30), bit(0, 1), level(0, 9);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<ScoredSample> s;
    const int n = n_dist(rng);
    // Coarse score levels force ties.
    for (int i = 0; i < n; ++i) s.push_back({0.1 * level(rng), bit(rng), "d"});
    s[0].label = 1;
    s[1].label = 0;
    bool distinct = false;
    for (const auto& x : s) distinct |= x.score != s[0].score;
    if (!distinct) continue;
    const double t = pick_threshold(s);
    EXPECT_DOUBLE_EQ(t, brute_threshold(s));
  }
}

TEST(Threshold, OtherCriteria) {
  // 3 negatives then 1 positive below a block of positives.
  const auto s = make({{1, 0}, {2, 0}, {3, 0}, {4, 1}, {5, 0}, {6, 1}, {7, 1}});
  const double acc_t = pick_threshold(s, ThresholdCriterion::accuracy);
  EXPECT_DOUBLE_EQ(acc_t, 3.5);
  EXPECT_NEAR(accuracy(s, acc_t), 6.0 / 7.0, 1e-15);
  EXPECT_DOUBLE_EQ(pick_threshold(s, ThresholdCriterion::eer), 4.5);
  EXPECT_EQ(parse_criterion("eer"), ThresholdCriterion::eer);
  EXPECT_THROW(parse_criterion("f1"), ConfigError);
}

TEST(Accuracy, Examples) {
  const auto s = make({{0.1, 0}, {0.6, 0}, {0.7, 1}, {0.4, 1}});
  EXPECT_DOUBLE_EQ(accuracy(s, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(accuracy(s, 0.65), 0.75);
  // Strict comparison: a score equal to the threshold is predicted natural.
  EXPECT_DOUBLE_EQ(accuracy(make({{0.5, 0}, {0.5, 1}}), 0.5), 0.5);
  EXPECT_THROW(accuracy({}, 0.0), ConfigError);
}

TEST(Benchmark, MeanOverUsableDatasets) {
  std::vector<ScoredSample> s = make({{0.9, 1}, {0.8, 1}, {0.1, 0}}, "a");
  for (auto x : make({{0.1, 1}, {0.9, 0}}, "b")) s.push_back(x);
  for (auto x : make({{0.3, 0}, {0.4, 0}}, "c")) s.push_back(x);
  const EvalReport r = benchmark_scored(s, 0.5);
  ASSERT_EQ(r.datasets.size(), 3u);
  EXPECT_EQ(r.datasets[0].name, "a");
  EXPECT_DOUBLE_EQ(r.datasets[0].ap, 1.0);
  EXPECT_DOUBLE_EQ(r.datasets[1].ap, 0.5);
  EXPECT_TRUE(r.datasets[2].skipped);
  EXPECT_EQ(r.used, 2u);
  EXPECT_DOUBLE_EQ(r.mean_ap, 0.75);
  EXPECT_DOUBLE_EQ(r.mean_accuracy, 0.5 * (1.0 + 0.0));

  const std::string csv = report_csv(r);
  EXPECT_EQ(csv, report_csv(benchmark_scored(s, 0.5)));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "dataset,n_natural,n_generated,ap,accuracy,status");
  EXPECT_NE(csv.find("c,2,0,,,skipped: single-class"), std::string::npos);
  EXPECT_NE(csv.find("mean,4,3,0.750000,0.500000"), std::string::npos);
  EXPECT_NE(report_text(r).find("mAP 75.00%"), std::string::npos);
}

TEST(Benchmark, AllSkippedIsAnError) {
  EXPECT_THROW(benchmark_scored(make({{0.3, 0}, {0.4, 0}}, "c"), 0.5), ConfigError);
}

TEST(Benchmark, ReadsManifestsAndFeatureFiles) {
  clipflow::testing::TempDir dir;
  Model m;
  m.adapter = identity_adapter(4, false);
  m.flow = init_flow({4, 1, 4, 1.9}, 0);
  FeatureMatrix nat(2, 4), gen(2, 4);
  nat << 0.1f, 0, 0, 0, 0, 0.2f, 0, 0;
  gen << 3, 0, 0, 0, 0, 0, 4, 0;
  write_feature_file(nat, dir / "nat.feat");
  write_feature_file(gen, dir / "gen.feat");
  const auto manifest = parse_manifest("nat.feat\t0\tsyn\ttest\ngen.feat\t1\tsyn\ttest\n", dir.path());
  const EvalReport r = benchmark(m, {manifest}, 1.0);
  EXPECT_DOUBLE_EQ(r.mean_ap, 1.0);
  EXPECT_DOUBLE_EQ(r.mean_accuracy, 1.0);
  EXPECT_EQ(r.datasets[0].n_natural, 2u);
  EXPECT_EQ(r.datasets[0].n_generated, 2u);
}
