#pragma once

// Anomaly scores and the detection metrics computed from them. Label 1
// (generated / anomalous) is the positive class and should score high.

#include <Eigen/Dense>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clipflow/error.hpp"
#include "clipflow/feature_adapter.hpp"
#include "clipflow/feature_store.hpp"
#include "clipflow/flow_model.hpp"
#include "clipflow/model_file.hpp"

namespace clipflow {

struct ScoredSample {
  double score = 0.0;
  int label = 0;  // 1 = generated / anomalous
  std::string dataset;
};

/// Negative log-likelihood per dimension, without the ln(2 pi)/2 constant:
///   (||u||^2 - 2 logdet) / (2C)  ==  -log_likelihood(z)/C - ln(2 pi)/2
inline double anomaly_score(const Eigen::VectorXd& raw, const Model& model) {
  const FlowResult r = forward(adapt(raw, model.adapter), model.flow);
  return (r.u.squaredNorm() - 2.0 * r.logdet) / (2.0 * static_cast<double>(model.flow.dim));
}

inline std::vector<double> score_features(const FeatureMatrix& features, const Model& model) {
  if (features.cols() != model.adapter.in_dim())
    throw ConfigError("features have dim " + std::to_string(features.cols()) + " but the model expects " +
                      std::to_string(model.adapter.in_dim()));
  std::vector<double> out(static_cast<std::size_t>(features.rows()));
  for (Eigen::Index i = 0; i < features.rows(); ++i)
    out[static_cast<std::size_t>(i)] = anomaly_score(features.row(i).transpose().cast<double>(), model);
  return out;
}

namespace detail {

inline void count_classes(std::span<const ScoredSample> s, std::size_t& pos, std::size_t& neg) {
  pos = neg = 0;
  for (const auto& x : s) {
    if (x.label != 0 && x.label != 1) throw ConfigError("labels are binary");
    (x.label == 1 ? pos : neg)++;
  }
}

}  // namespace detail

/// Step-interpolated AP: rank by score descending (stable), then
/// sum over positive ranks k of precision(k), divided by the positive count.
inline double average_precision(std::span<const ScoredSample> samples) {
  std::size_t pos, neg;
  detail::count_classes(samples, pos, neg);
  if (pos == 0 || neg == 0) throw ConfigError("AP undefined: need both classes");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return samples[a].score > samples[b].score; });
  double sum = 0.0;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (samples[order[k]].label == 1) {
      ++tp;
      sum += static_cast<double>(tp) / static_cast<double>(k + 1);
    }
  }
  return sum / static_cast<double>(pos);
}

/// Fraction of samples with (score > threshold) == (label == 1).
inline double accuracy(std::span<const ScoredSample> samples, double threshold) {
  if (samples.empty()) throw ConfigError("accuracy of an empty sample set");
  std::size_t correct = 0;
  for (const auto& s : samples) correct += ((s.score > threshold) == (s.label == 1)) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

/// Mean of the per-class recalls at `threshold`.
inline double balanced_accuracy(std::span<const ScoredSample> samples, double threshold) {
  std::size_t pos, neg;
  detail::count_classes(samples, pos, neg);
  if (pos == 0 || neg == 0) throw ConfigError("balanced accuracy needs both classes");
  std::size_t tp = 0, tn = 0;
  for (const auto& s : samples) {
    if (s.label == 1 && s.score > threshold) ++tp;
    if (s.label == 0 && !(s.score > threshold)) ++tn;
  }
  return 0.5 * (static_cast<double>(tp) / static_cast<double>(pos) + static_cast<double>(tn) / static_cast<double>(neg));
}

enum class ThresholdCriterion { balanced, accuracy, eer };

inline ThresholdCriterion parse_criterion(std::string_view s) {
  if (s == "balanced") return ThresholdCriterion::balanced;
  if (s == "accuracy") return ThresholdCriterion::accuracy;
  if (s == "eer") return ThresholdCriterion::eer;
  throw ConfigError("unknown threshold criterion \"" + std::string(s) + "\" (expected accuracy, balanced or eer)");
}

/// Sweeps the midpoints between consecutive distinct sorted scores and
/// returns the one that is best under `criterion`; ties go to the lower
/// threshold. Objectives are compared as exact integer counts.
inline double pick_threshold(std::span<const ScoredSample> samples,
                             ThresholdCriterion criterion = ThresholdCriterion::balanced) {
  std::size_t pos, neg;
  detail::count_classes(samples, pos, neg);
  if (pos == 0 || neg == 0) throw ConfigError("threshold selection needs both classes");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return samples[a].score < samples[b].score; });

  const auto P = static_cast<std::int64_t>(pos);
  const auto N = static_cast<std::int64_t>(neg);
  // Larger is better for every criterion.
  auto objective = [&](std::int64_t tp, std::int64_t tn) -> std::int64_t {
    switch (criterion) {
      case ThresholdCriterion::balanced: return tp * N + tn * P;
      case ThresholdCriterion::accuracy: return tp + tn;
      case ThresholdCriterion::eer: {
        const std::int64_t fp = N - tn;
        const std::int64_t fn = P - tp;
        return -std::abs(fp * P - fn * N);
      }
    }
    return 0;
  };

  bool found = false;
  std::int64_t best = 0;
  double best_t = samples[order.front()].score;
  std::int64_t pos_below = 0, neg_below = 0;  // samples predicted negative
  for (std::size_t i = 0; i + 1 < order.size(); ++i) {
    (samples[order[i]].label == 1 ? pos_below : neg_below)++;
    const double a = samples[order[i]].score;
    const double b = samples[order[i + 1]].score;
    if (!(a < b)) continue;
    const std::int64_t v = objective(P - pos_below, neg_below);
    if (!found || v > best) {
      found = true;
      best = v;
      best_t = a + 0.5 * (b - a);
    }
  }
  return best_t;
}

// ---------------------------------------------------------------------------
// Benchmark reports

struct DatasetResult {
  std::string name;
  std::size_t n_natural = 0;
  std::size_t n_generated = 0;
  double ap = 0.0;
  double accuracy = 0.0;
  bool skipped = false;
  std::string reason;
};

struct EvalReport {
  std::vector<DatasetResult> datasets;
  double mean_ap = 0.0;
  double mean_accuracy = 0.0;
  std::size_t used = 0;
  double threshold = 0.0;
};

/// Groups samples by dataset (first-appearance order) and aggregates.
/// Datasets lacking a class are reported as skipped and excluded from means.
inline EvalReport benchmark_scored(std::span<const ScoredSample> samples, double threshold) {
  std::vector<std::string> names;
  std::map<std::string, std::vector<ScoredSample>> groups;
  for (const auto& s : samples) {
    auto [it, inserted] = groups.try_emplace(s.dataset);
    if (inserted) names.push_back(s.dataset);
    it->second.push_back(s);
  }
  EvalReport rep;
  rep.threshold = threshold;
  for (const auto& name : names) {
    const auto& g = groups.at(name);
    DatasetResult d;
    d.name = name;
    detail::count_classes(g, d.n_generated, d.n_natural);
    if (d.n_generated == 0 || d.n_natural == 0) {
      d.skipped = true;
      d.reason = "skipped: single-class";
    } else {
      d.ap = average_precision(g);
      d.accuracy = accuracy(g, threshold);
      rep.mean_ap += d.ap;
      rep.mean_accuracy += d.accuracy;
      ++rep.used;
    }
    rep.datasets.push_back(std::move(d));
  }
  if (rep.used == 0) throw ConfigError("no dataset contains both natural and generated samples");
  rep.mean_ap /= static_cast<double>(rep.used);
  rep.mean_accuracy /= static_cast<double>(rep.used);
  return rep;
}

/// Scores the test-role entries of each manifest; dataset names are taken
/// from the manifests.
inline EvalReport benchmark(const Model& model, const std::vector<DatasetManifest>& manifests, double threshold) {
  std::vector<ScoredSample> all;
  for (const auto& m : manifests) {
    for (const auto& e : m.with_role(Role::test)) {
      const auto scores = score_features(read_feature_file(e.path), model);
      for (double s : scores) all.push_back({s, static_cast<int>(e.label), e.dataset});
    }
  }
  if (all.empty()) throw ConfigError("manifests contain no test entries");
  return benchmark_scored(all, threshold);
}

inline std::string report_csv(const EvalReport& r) {
  std::string out = "dataset,n_natural,n_generated,ap,accuracy,status\n";
  std::size_t tn = 0, tg = 0;
  for (const auto& d : r.datasets) {
    tn += d.n_natural;
    tg += d.n_generated;
    if (d.skipped) {
      out += fmt::format("{},{},{},,,{}\n", d.name, d.n_natural, d.n_generated, d.reason);
    } else {
      out += fmt::format("{},{},{},{:.6f},{:.6f},ok\n", d.name, d.n_natural, d.n_generated, d.ap, d.accuracy);
    }
  }
  out += fmt::format("mean,{},{},{:.6f},{:.6f},threshold={:.9g} datasets={}\n", tn, tg, r.mean_ap, r.mean_accuracy,
                     r.threshold, r.used);
  return out;
}

inline std::string report_text(const EvalReport& r) {
  std::string out = fmt::format("{:<24} {:>9} {:>9} {:>8} {:>8}\n", "dataset", "natural", "generated", "AP", "acc");
  for (const auto& d : r.datasets) {
    if (d.skipped) {
      out += fmt::format("{:<24} {:>9} {:>9}   {}\n", d.name, d.n_natural, d.n_generated, d.reason);
    } else {
      out += fmt::format("{:<24} {:>9} {:>9} {:>7.2f}% {:>7.2f}%\n", d.name, d.n_natural, d.n_generated,
                         100.0 * d.ap, 100.0 * d.accuracy);
    }
  }
  out += fmt::format("mAP {:.2f}%  mean accuracy {:.2f}%  over {} dataset(s), threshold {:.6g}\n", 100.0 * r.mean_ap,
                     100.0 * r.mean_accuracy, r.used, r.threshold);
  return out;
}

}  // namespace clipflow
