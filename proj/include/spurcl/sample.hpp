#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace spurcl {

/// One labeled datum. Images are stored flat, channel-planar (all R, then
/// all G, then all B), the same layout as the CIFAR-10 binary records.
struct Sample {
  std::vector<float> x;
  int y = 0;
  int mode_id = -1;  // original 10-way class or synthetic mode; -1 if unknown
  bool spurious_present = false;
  int spurious_id = -1;
  int task_id = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

using Dataset = std::vector<Sample>;

struct TaskData {
  int task_id = 0;
  Dataset train;
  Dataset eval_spurious;  // held out, carries the task's spurious features

  friend bool operator==(const TaskData&, const TaskData&) = default;
};

struct Scenario {
  std::vector<TaskData> tasks;
  Dataset clean_test;  // never carries spurious features
  int n_classes = 2;
  /// Classes introduced by each task. Domain-incremental scenarios list every
  /// class for every task.
  std::vector<std::vector<int>> task_classes;

  std::size_t input_dim() const {
    return tasks.empty() || tasks.front().train.empty() ? 0 : tasks.front().train.front().x.size();
  }

  friend bool operator==(const Scenario&, const Scenario&) = default;
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

inline int linf_distance(Rgb a, Rgb b) {
  auto d = [](std::uint8_t u, std::uint8_t v) { return u > v ? u - v : v - u; };
  int m = d(a.r, b.r);
  if (d(a.g, b.g) > m) m = d(a.g, b.g);
  if (d(a.b, b.b) > m) m = d(a.b, b.b);
  return m;
}

}  // namespace spurcl
