#pragma once

// Feature taxonomy: correlation of a binary feature indicator with class
// membership, the discriminativeness test with an additive margin, and the
// Good / Spurious / Local / LocalSpurious classification.

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "spurcl/error.hpp"
#include "spurcl/sample.hpp"

namespace spurcl::features {

struct FeaturePredicate {
  int id = 0;
  std::string name;
  std::function<bool(const Sample&)> w;
};

enum class FeatureKind { Good, Spurious, Local, LocalSpurious, NonDiscriminative };

inline const char* to_string(FeatureKind k) {
  switch (k) {
    case FeatureKind::Good: return "good";
    case FeatureKind::Spurious: return "spurious";
    case FeatureKind::Local: return "local";
    case FeatureKind::LocalSpurious: return "local_spurious";
    case FeatureKind::NonDiscriminative: return "non_discriminative";
  }
  return "?";
}

/// Phi coefficient between 1[w(x)=1] and 1[label=y]; 0 when either indicator
/// is constant over the dataset.
inline double correlation(std::span<const Sample> data, const FeaturePredicate& pred, int y) {
  if (data.empty()) throw DataError("correlation: empty dataset");
  double n11 = 0, n10 = 0, n01 = 0, n00 = 0;  // (w, label==y)
  for (const auto& s : data) {
    const bool w = pred.w(s);
    const bool c = s.y == y;
    if (w && c) ++n11;
    else if (w) ++n10;
    else if (c) ++n01;
    else ++n00;
  }
  const double w1 = n11 + n10, w0 = n01 + n00, c1 = n11 + n01, c0 = n10 + n00;
  if (w1 == 0 || w0 == 0 || c1 == 0 || c0 == 0) return 0.0;
  const double phi = (n11 * n00 - n10 * n01) / std::sqrt(w1 * w0 * c1 * c0);
  return std::clamp(phi, -1.0, 1.0);
}

inline std::vector<int> classes_in(std::span<const Sample> data) {
  std::set<int> s;
  for (const auto& x : data) s.insert(x.y);
  return {s.begin(), s.end()};
}

/// True iff c(D,z,y) >= c(D,z,y') + tau for every other class y' in D.
inline bool is_discriminative(std::span<const Sample> data, const FeaturePredicate& pred, int y, double tau) {
  if (!(tau > 0.0)) throw ConfigError("tau", "must be positive");
  const auto classes = classes_in(data);
  if (classes.size() < 2) throw DataError("is_discriminative: dataset holds a single class");
  const double cy = correlation(data, pred, y);
  for (int other : classes) {
    if (other == y) continue;
    if (!(cy >= correlation(data, pred, other) + tau)) return false;
  }
  return true;
}

struct FeatureReport {
  int feature_id = 0;
  std::string name;
  int y = 0;
  int task_id = 0;
  // Per-class correlations on the task, the whole scenario and the test set.
  std::vector<std::pair<int, double>> task_correlations;
  std::vector<std::pair<int, double>> scenario_correlations;
  std::vector<std::pair<int, double>> test_correlations;
  bool discriminative_task = false;
  bool discriminative_scenario = false;
  bool discriminative_test = false;
  FeatureKind kind = FeatureKind::NonDiscriminative;
  double margin_tau = 0.2;
};

struct ClassifyOptions {
  double tau = 0.2;
  /// Report discriminative-on-task features as Local without looking at the
  /// scenario and test sets.
  bool skip_global_checks = false;
};

namespace detail {

inline std::vector<std::pair<int, double>> per_class(std::span<const Sample> data, const FeaturePredicate& p) {
  std::vector<std::pair<int, double>> out;
  for (int c : classes_in(data)) out.emplace_back(c, correlation(data, p, c));
  return out;
}

}  // namespace detail

inline FeatureReport classify_feature(const FeaturePredicate& pred, int y, std::span<const Sample> task,
                                      std::span<const Sample> scenario_train, std::span<const Sample> clean_test,
                                      const ClassifyOptions& opt = {}) {
  if (task.empty() || scenario_train.empty() || clean_test.empty())
    throw DataError("classify_feature: empty input dataset");
  FeatureReport r;
  r.feature_id = pred.id;
  r.name = pred.name;
  r.y = y;
  r.task_id = task.front().task_id;
  r.margin_tau = opt.tau;
  r.task_correlations = detail::per_class(task, pred);
  r.discriminative_task = is_discriminative(task, pred, y, opt.tau);
  if (!r.discriminative_task) {
    r.kind = FeatureKind::NonDiscriminative;
    return r;
  }
  if (opt.skip_global_checks) {
    r.kind = FeatureKind::Local;
    return r;
  }
  r.scenario_correlations = detail::per_class(scenario_train, pred);
  r.test_correlations = detail::per_class(clean_test, pred);
  r.discriminative_scenario = is_discriminative(scenario_train, pred, y, opt.tau);
  r.discriminative_test = is_discriminative(clean_test, pred, y, opt.tau);
  if (!r.discriminative_scenario) r.kind = FeatureKind::LocalSpurious;
  else if (r.discriminative_test) r.kind = FeatureKind::Good;
  else r.kind = FeatureKind::Spurious;
  return r;
}

// Predicate factories.

/// Ground truth for injected features: true iff the sample carries the
/// spurious feature with this id.
inline FeaturePredicate injected_feature(int spurious_id) {
  return {spurious_id, "injected_" + std::to_string(spurious_id),
          [spurious_id](const Sample& s) { return s.spurious_present && s.spurious_id == spurious_id; }};
}

/// 1 iff x[dim] > threshold (or < threshold when `above` is false).
inline FeaturePredicate threshold_feature(int id, std::size_t dim, double threshold, bool above = true) {
  return {id, "x[" + std::to_string(dim) + "]" + (above ? ">" : "<") + std::to_string(threshold),
          [=](const Sample& s) { return above ? s.x.at(dim) > threshold : s.x.at(dim) < threshold; }};
}

}  // namespace spurcl::features
