#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "spurcl/error.hpp"
#include "spurcl/nn.hpp"
#include "spurcl/sample.hpp"

namespace spurcl {

/// Predicted class restricted to `mask` (all outputs when empty). Ties go to
/// the lowest class index.
inline int masked_argmax(std::span<const double> logits, std::span<const int> mask) {
  if (mask.empty()) return static_cast<int>(nn::argmax(logits));
  int best = -1;
  double best_v = -std::numeric_limits<double>::infinity();
  std::vector<int> sorted(mask.begin(), mask.end());
  std::sort(sorted.begin(), sorted.end());
  for (int c : sorted) {
    const double v = logits[static_cast<std::size_t>(c)];
    if (best < 0 || v > best_v) {
      best = c;
      best_v = v;
    }
  }
  return best;
}

/// Logits of one head for every sample, eval mode, in chunks.
inline nn::Matrix predict_logits(const nn::ModelParams& model, std::span<const Sample> data, std::size_t head = 0) {
  if (head >= model.heads.size()) throw ShapeError("predict_logits: no such head");
  nn::Matrix out(data.size(), model.heads[head].n_outputs());
  constexpr std::size_t kChunk = 512;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const auto part = data.subspan(start, std::min(kChunk, data.size() - start));
    const auto cache = nn::forward_with_mask(model, nn::to_matrix(part), nn::Matrix{});
    for (std::size_t i = 0; i < part.size(); ++i) {
      const auto row = cache.logits[head].row(i);
      std::copy(row.begin(), row.end(), out.row(start + i).begin());
    }
  }
  return out;
}

inline double accuracy(const nn::ModelParams& model, std::span<const Sample> data, std::size_t head = 0,
                       std::span<const int> mask = {}) {
  if (data.empty()) throw DataError("accuracy: empty dataset");
  const auto logits = predict_logits(model, data, head);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    correct += masked_argmax(logits.row(i), mask) == data[i].y;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Mean of the clean-test accuracies recorded after each task.
inline double omega(std::span<const double> post_task_accuracies) {
  if (post_task_accuracies.empty()) throw DataError("omega: no accuracies");
  double s = 0.0;
  for (double a : post_task_accuracies) s += a;
  return s / static_cast<double>(post_task_accuracies.size());
}

// ---------------------------------------------------------------------------
// Run log

inline constexpr int kPostTaskEpoch = -1;

inline const std::string kSplitCleanTest = "clean_test";
inline const std::string kSplitTrain = "train";
inline std::string eval_spurious_split(int task) { return "eval_spurious_" + std::to_string(task); }

struct MetricEntry {
  int task_idx = 0;
  int epoch = kPostTaskEpoch;  // -1 marks the evaluation after a task finished
  std::string split;
  std::string metric;
  double value = 0.0;

  friend bool operator==(const MetricEntry&, const MetricEntry&) = default;
};

struct RunRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::vector<MetricEntry> entries;

  void add(int task, int epoch, std::string split, std::string metric, double value) {
    entries.push_back({task, epoch, std::move(split), std::move(metric), value});
  }

  /// Values of `split`/`metric` logged after each task, in task order.
  std::vector<double> post_task(const std::string& split, const std::string& metric = "accuracy") const {
    std::vector<double> out;
    for (const auto& e : entries)
      if (e.epoch == kPostTaskEpoch && e.split == split && e.metric == metric) out.push_back(e.value);
    return out;
  }

  std::optional<double> find(int task, int epoch, const std::string& split, const std::string& metric) const {
    for (const auto& e : entries)
      if (e.task_idx == task && e.epoch == epoch && e.split == split && e.metric == metric) return e.value;
    return std::nullopt;
  }

  int n_tasks() const {
    int n = 0;
    for (const auto& e : entries) n = std::max(n, e.task_idx + 1);
    return n;
  }

  double omega() const {
    const auto acc = post_task(kSplitCleanTest);
    return spurcl::omega(acc);
  }
};

struct OverfitRow {
  int task = 0;
  double eval_spurious = 0.0;  // on the task's own held-out split, right after the task
  double clean_test = 0.0;
};

/// Pairs each task's spurious-evaluation accuracy with the clean-test
/// accuracy measured at the same point.
inline std::vector<OverfitRow> overfit_report(const RunRecord& record) {
  std::vector<OverfitRow> out;
  for (int t = 0; t < record.n_tasks(); ++t) {
    const auto spur = record.find(t, kPostTaskEpoch, eval_spurious_split(t), "accuracy");
    const auto clean = record.find(t, kPostTaskEpoch, kSplitCleanTest, "accuracy");
    if (!spur || !clean)
      throw DataError("overfit_report: task " + std::to_string(t) + " lacks eval_spurious or clean_test accuracy");
    out.push_back({t, *spur, *clean});
  }
  if (out.empty()) throw DataError("overfit_report: empty record");
  return out;
}

}  // namespace spurcl
