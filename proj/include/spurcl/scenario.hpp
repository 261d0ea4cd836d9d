#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "spurcl/cifar.hpp"
#include "spurcl/error.hpp"
#include "spurcl/rng.hpp"
#include "spurcl/sample.hpp"

namespace spurcl {

struct ImageShape {
  std::size_t height = cifar::kHeight;
  std::size_t width = cifar::kWidth;
  std::size_t channels = cifar::kChannels;
  std::size_t size() const { return height * width * channels; }
};

struct SquarePos {
  std::size_t row = 0;
  std::size_t col = 0;
};

/// Overwrite a square_size x square_size block at `pos` with `color`/255.
inline void inject_square(std::span<float> image, ImageShape shape, Rgb color, SquarePos pos,
                          std::size_t square_size = 2) {
  if (image.size() != shape.size()) throw ShapeError("inject_square: image size does not match shape");
  if (shape.channels != 3) throw ShapeError("inject_square: expected 3 channels");
  if (square_size == 0 || pos.row + square_size > shape.height || pos.col + square_size > shape.width) {
    throw DataError("inject_square: square at (" + std::to_string(pos.row) + "," +
                    std::to_string(pos.col) + ") does not fit the image");
  }
  const std::array<float, 3> rgb = {color.r / 255.0f, color.g / 255.0f, color.b / 255.0f};
  const std::size_t plane = shape.height * shape.width;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t r = pos.row; r < pos.row + square_size; ++r)
      for (std::size_t k = pos.col; k < pos.col + square_size; ++k)
        image[c * plane + r * shape.width + k] = rgb[c];
}

inline std::vector<float> with_square(std::vector<float> image, ImageShape shape, Rgb color,
                                      SquarePos pos, std::size_t square_size = 2) {
  inject_square(image, shape, color, pos, square_size);
  return image;
}

// ---------------------------------------------------------------------------
// Support

/// Number of modes kept per class for support fraction s; throws unless
/// s * modes_per_class is a positive integer.
inline int support_mode_count(double support_s, int modes_per_class) {
  const double k = support_s * modes_per_class;
  const double rounded = std::round(k);
  if (!(support_s > 0.0 && support_s <= 1.0) || std::abs(k - rounded) > 1e-9 || rounded < 1) {
    throw ConfigError("support_s", "support " + std::to_string(support_s) + " x " +
                                       std::to_string(modes_per_class) +
                                       " modes is not a positive integer");
  }
  return static_cast<int>(rounded);
}

/// For each class, a uniformly drawn subset of its mode indices (local,
/// 0..modes_per_class-1, ascending).
inline std::vector<std::vector<int>> sample_support(double support_s, int modes_per_class,
                                                    int n_classes, Rng& rng) {
  const int k = support_mode_count(support_s, modes_per_class);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n_classes));
  for (auto& cls : out) {
    for (std::size_t i : rng.choose(static_cast<std::size_t>(modes_per_class), static_cast<std::size_t>(k)))
      cls.push_back(static_cast<int>(i));
  }
  return out;
}

inline std::size_t spurious_count(double p, std::size_t n) {
  return static_cast<std::size_t>(std::floor(p * static_cast<double>(n) + 1e-9));
}

// ---------------------------------------------------------------------------
// CIFAR-backed scenarios

struct SpuriousSpec {
  double correlation_p = 1.0;
  std::vector<std::array<Rgb, 2>> colors;  // [task][class]; sampled from seed when empty
  int square_size = 2;
  double support_s = 1.0;
  int n_tasks = 10;
  std::uint64_t seed = 0;
  // Per-task caps on the source pools (0 keeps everything).
  std::size_t train_per_task = 0;
  std::size_t eval_per_task = 0;
  std::size_t clean_test_size = 0;
};

inline constexpr int kCifarModesPerClass = 5;
inline constexpr int kMinClassColorDistance = 64;
inline constexpr int kMinTaskColorDistance = 32;

inline void validate(const SpuriousSpec& spec) {
  if (!(spec.correlation_p >= 0.0 && spec.correlation_p <= 1.0))
    throw ConfigError("correlation_p", "must be in [0,1]");
  if (spec.n_tasks < 1) throw ConfigError("n_tasks", "must be >= 1");
  if (spec.square_size < 1 || spec.square_size > 32) throw ConfigError("square_size", "must be in 1..32");
  support_mode_count(spec.support_s, kCifarModesPerClass);
  if (!spec.colors.empty()) {
    if (spec.colors.size() != static_cast<std::size_t>(spec.n_tasks))
      throw ConfigError("colors", "expected one color pair per task");
    for (std::size_t t = 0; t < spec.colors.size(); ++t)
      if (spec.colors[t][0] == spec.colors[t][1])
        throw ConfigError("colors[" + std::to_string(t) + "]", "class colors must differ");
  }
}

/// Two colors per task. Within a task the class colors differ by at least 64
/// in L-infinity; each color differs by at least 32 from the same class's
/// colors in all earlier tasks.
inline std::vector<std::array<Rgb, 2>> sample_task_colors(int n_tasks, Rng& rng) {
  auto draw = [&] {
    return Rgb{static_cast<std::uint8_t>(rng.below(256)), static_cast<std::uint8_t>(rng.below(256)),
               static_cast<std::uint8_t>(rng.below(256))};
  };
  std::vector<std::array<Rgb, 2>> out;
  for (int t = 0; t < n_tasks; ++t) {
    bool ok = false;
    for (int attempt = 0; attempt < 1'000'000 && !ok; ++attempt) {
      const std::array<Rgb, 2> pair = {draw(), draw()};
      ok = linf_distance(pair[0], pair[1]) >= kMinClassColorDistance;
      for (const auto& prev : out) {
        if (!ok) break;
        ok = linf_distance(prev[0], pair[0]) >= kMinTaskColorDistance &&
             linf_distance(prev[1], pair[1]) >= kMinTaskColorDistance;
      }
      if (ok) out.push_back(pair);
    }
    if (!ok) throw ConfigError("n_tasks", "cannot place separated colors for " + std::to_string(n_tasks) + " tasks");
  }
  return out;
}

/// Source data split once per seed: 90/10 per mode into train and held-out
/// evaluation pools, plus the untouched test set.
struct CifarSource {
  Dataset train_pool;
  Dataset eval_pool;
  Dataset test;
};

inline Sample sample_from_record(const cifar::Record& rec) {
  Sample s;
  s.x = rec.image;
  s.mode_id = rec.label;
  s.y = cifar::binarize_label(rec.label);
  return s;
}

inline CifarSource make_cifar_source(const std::vector<cifar::Record>& train,
                                     const std::vector<cifar::Record>& test, std::uint64_t seed) {
  CifarSource src;
  Rng rng(derive_seed(seed, "split"));
  for (int mode = 0; mode < 10; ++mode) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < train.size(); ++i)
      if (train[i].label == mode) members.push_back(i);
    const std::size_t n_eval = members.size() / 10;
    std::vector<char> is_eval(members.size(), 0);
    for (std::size_t j : rng.choose(members.size(), n_eval)) is_eval[j] = 1;
    for (std::size_t j = 0; j < members.size(); ++j)
      (is_eval[j] ? src.eval_pool : src.train_pool).push_back(sample_from_record(train[members[j]]));
  }
  for (const auto& rec : test) src.test.push_back(sample_from_record(rec));
  return src;
}

namespace detail {

inline Dataset take_supported(const Dataset& pool, const std::vector<std::vector<int>>& support,
                              std::size_t cap, Rng& rng) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto& modes = cifar::modes_of_binary_class(pool[i].y);
    const auto& sel = support[static_cast<std::size_t>(pool[i].y)];
    for (int local : sel)
      if (modes[static_cast<std::size_t>(local)] == pool[i].mode_id) keep.push_back(i);
  }
  if (cap > 0 && keep.size() > cap) {
    std::vector<std::size_t> sub;
    for (std::size_t j : rng.choose(keep.size(), cap)) sub.push_back(keep[j]);
    keep = std::move(sub);
  }
  Dataset out;
  out.reserve(keep.size());
  for (std::size_t i : keep) out.push_back(pool[i]);
  return out;
}

inline void mark_squares(Dataset& data, const SpuriousSpec& spec, int task_id, Rng& rng) {
  const ImageShape shape;
  const std::size_t n = data.size();
  const std::size_t side = static_cast<std::size_t>(spec.square_size);
  const auto& colors = spec.colors[static_cast<std::size_t>(task_id)];
  for (auto& s : data) s.task_id = task_id;
  for (std::size_t i : rng.choose(n, spurious_count(spec.correlation_p, n))) {
    Sample& s = data[i];
    const SquarePos pos{static_cast<std::size_t>(rng.below(shape.height - side + 1)),
                        static_cast<std::size_t>(rng.below(shape.width - side + 1))};
    inject_square(s.x, shape, colors[static_cast<std::size_t>(s.y)], pos, side);
    s.spurious_present = true;
    s.spurious_id = task_id * 2 + s.y;
  }
}

}  // namespace detail

/// One SpuriousCIFAR2 task. `spec.colors` must already hold this task's pair.
inline TaskData build_task(const CifarSource& source, const SpuriousSpec& spec, int task_id, Rng& rng) {
  if (static_cast<std::size_t>(task_id) >= spec.colors.size())
    throw ConfigError("colors", "no colors for task " + std::to_string(task_id));
  const auto support = sample_support(spec.support_s, kCifarModesPerClass, 2, rng);
  TaskData task;
  task.task_id = task_id;
  task.train = detail::take_supported(source.train_pool, support, spec.train_per_task, rng);
  task.eval_spurious = detail::take_supported(source.eval_pool, support, spec.eval_per_task, rng);
  if (task.train.empty()) throw DataError("build_task: support selects no training data for task " + std::to_string(task_id));
  detail::mark_squares(task.train, spec, task_id, rng);
  detail::mark_squares(task.eval_spurious, spec, task_id, rng);
  return task;
}

/// Fills in `spec.colors` from the seed when it is empty.
inline void resolve_colors(SpuriousSpec& spec) {
  if (spec.colors.empty()) {
    Rng color_rng(derive_seed(spec.seed, "colors"));
    spec.colors = sample_task_colors(spec.n_tasks, color_rng);
  }
}

inline Scenario build_scenario(SpuriousSpec spec, const CifarSource& source) {
  validate(spec);
  resolve_colors(spec);
  Scenario sc;
  sc.n_classes = 2;
  for (int t = 0; t < spec.n_tasks; ++t) {
    Rng rng(derive_seed(spec.seed, "task", static_cast<std::uint64_t>(t)));
    sc.tasks.push_back(build_task(source, spec, t, rng));
    sc.task_classes.push_back({0, 1});
  }
  if (spec.clean_test_size > 0 && source.test.size() > spec.clean_test_size) {
    Rng rng(derive_seed(spec.seed, "clean_test"));
    for (std::size_t i : rng.choose(source.test.size(), spec.clean_test_size))
      sc.clean_test.push_back(source.test[i]);
  } else {
    sc.clean_test = source.test;
  }
  for (auto& s : sc.clean_test) {
    s.task_id = 0;
    s.spurious_present = false;
    s.spurious_id = -1;
  }
  return sc;
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian-mode scenarios
//
// Each class owns `modes_per_class` Gaussian modes (the analog of the five
// original CIFAR classes behind a binary label). The spurious feature is an
// additive per-task, per-class pattern on a block of input dimensions.

struct SynthSpec {
  int dim = 20;
  int n_classes = 2;
  int modes_per_class = 5;
  double mean_scale = 3.0;
  double mode_std = 1.0;
  int spurious_begin = 0;
  int spurious_end = 4;
  double spurious_magnitude = 4.0;
  int n_train = 1000;     // per task
  int n_eval = 200;       // per task, spurious evaluation split
  int n_clean_test = 1000;
  int classes_per_task = 0;  // 0: every task holds every class (domain-incremental)
  int n_tasks = 10;
  double correlation_p = 1.0;
  double support_s = 1.0;
  std::uint64_t seed = 0;

  friend bool operator==(const SynthSpec&, const SynthSpec&) = default;
};

inline void validate(const SynthSpec& s) {
  if (s.dim < 1) throw ConfigError("synth.dim", "must be >= 1");
  if (s.n_classes < 2) throw ConfigError("synth.n_classes", "must be >= 2");
  if (s.modes_per_class < 1) throw ConfigError("synth.modes_per_class", "must be >= 1");
  if (!(s.mode_std > 0.0)) throw ConfigError("synth.mode_std", "must be > 0");
  if (s.spurious_begin < 0 || s.spurious_end > s.dim || s.spurious_begin >= s.spurious_end)
    throw ConfigError("synth.spurious_block", "must be a non-empty range inside [0, dim)");
  if (s.n_train < 1) throw ConfigError("synth.n_train", "must be >= 1");
  if (s.n_eval < 0 || s.n_clean_test < 1) throw ConfigError("synth.n_clean_test", "must be >= 1");
  if (s.n_tasks < 1) throw ConfigError("n_tasks", "must be >= 1");
  if (!(s.correlation_p >= 0.0 && s.correlation_p <= 1.0)) throw ConfigError("correlation_p", "must be in [0,1]");
  if (s.classes_per_task < 0) throw ConfigError("synth.classes_per_task", "must be >= 0");
  if (s.classes_per_task > 0 && s.classes_per_task * s.n_tasks != s.n_classes)
    throw ConfigError("synth.classes_per_task", "classes_per_task * n_tasks must equal n_classes");
  support_mode_count(s.support_s, s.modes_per_class);
}

/// Resolved generator: the drawn mode means and per-task spurious patterns.
struct SynthModel {
  SynthSpec spec;
  std::vector<std::vector<double>> mode_means;             // [class * modes_per_class + k][dim]
  std::vector<std::vector<std::vector<double>>> patterns;  // [task][class][block]

  std::vector<int> task_classes(int task_id) const {
    std::vector<int> out;
    if (spec.classes_per_task == 0) {
      for (int c = 0; c < spec.n_classes; ++c) out.push_back(c);
    } else {
      for (int c = 0; c < spec.classes_per_task; ++c) out.push_back(task_id * spec.classes_per_task + c);
    }
    return out;
  }
  int task_of_class(int y) const { return spec.classes_per_task == 0 ? 0 : y / spec.classes_per_task; }
};

inline SynthModel make_synth_model(const SynthSpec& spec) {
  validate(spec);
  SynthModel m;
  m.spec = spec;
  Rng mean_rng(derive_seed(spec.seed, "synth.means"));
  const int n_modes = spec.n_classes * spec.modes_per_class;
  m.mode_means.assign(static_cast<std::size_t>(n_modes), std::vector<double>(static_cast<std::size_t>(spec.dim)));
  for (auto& mean : m.mode_means)
    for (auto& v : mean) v = spec.mean_scale * mean_rng.normal();

  // Patterns are sign vectors scaled by the magnitude. The classes of one
  // task must disagree in at least half of the block's components.
  Rng pat_rng(derive_seed(spec.seed, "synth.patterns"));
  const int block = spec.spurious_end - spec.spurious_begin;
  auto draw = [&] {
    std::vector<double> p(static_cast<std::size_t>(block));
    for (auto& v : p) v = pat_rng.bernoulli(0.5) ? spec.spurious_magnitude : -spec.spurious_magnitude;
    return p;
  };
  auto disagreements = [](const std::vector<double>& a, const std::vector<double>& b) {
    int d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] != b[i]);
    return d;
  };
  const int min_disagree = std::max(1, (block + 1) / 2);
  m.patterns.resize(static_cast<std::size_t>(spec.n_tasks));
  for (int t = 0; t < spec.n_tasks; ++t) {
    auto& task_patterns = m.patterns[static_cast<std::size_t>(t)];
    for (int c = 0; c < spec.n_classes; ++c) {
      auto p = draw();
      for (int guard = 0; guard < 10'000; ++guard) {
        bool ok = true;
        for (const auto& q : task_patterns) ok = ok && disagreements(p, q) >= min_disagree;
        if (ok) break;
        p = draw();
      }
      task_patterns.push_back(std::move(p));
    }
  }
  return m;
}

/// Draw one sample of class `y`: the mean of a uniformly chosen supported
/// mode plus isotropic Gaussian noise, plus the task's class pattern when
/// `spurious` is set. `supported_modes` holds local mode indices of `y`.
inline Sample synth_sample(const SynthModel& model, int y, int task_id, bool spurious,
                           std::span<const int> supported_modes, Rng& rng) {
  const SynthSpec& s = model.spec;
  if (y < 0 || y >= s.n_classes) throw DataError("synth_sample: label out of range");
  if (supported_modes.empty()) throw DataError("synth_sample: empty support");
  const int local = supported_modes[static_cast<std::size_t>(rng.below(supported_modes.size()))];
  const int mode = y * s.modes_per_class + local;
  Sample out;
  out.y = y;
  out.mode_id = mode;
  out.task_id = task_id;
  out.x.resize(static_cast<std::size_t>(s.dim));
  const auto& mean = model.mode_means[static_cast<std::size_t>(mode)];
  for (int d = 0; d < s.dim; ++d)
    out.x[static_cast<std::size_t>(d)] = static_cast<float>(mean[static_cast<std::size_t>(d)] + s.mode_std * rng.normal());
  if (spurious) {
    const auto& pat = model.patterns[static_cast<std::size_t>(task_id)][static_cast<std::size_t>(y)];
    for (int d = s.spurious_begin; d < s.spurious_end; ++d)
      out.x[static_cast<std::size_t>(d)] += static_cast<float>(pat[static_cast<std::size_t>(d - s.spurious_begin)]);
    out.spurious_present = true;
    out.spurious_id = task_id * s.n_classes + y;
  }
  return out;
}

namespace detail {

inline Dataset synth_split(const SynthModel& model, int task_id, int n, const std::vector<int>& classes,
                           const std::vector<std::vector<int>>& support, bool with_spurious, Rng& rng) {
  const std::size_t count = static_cast<std::size_t>(n);
  std::vector<char> spurious(count, 0);
  if (with_spurious)
    for (std::size_t i : rng.choose(count, spurious_count(model.spec.correlation_p, count))) spurious[i] = 1;
  Dataset out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int y = classes[i % classes.size()];
    out.push_back(synth_sample(model, y, task_id, spurious[i] != 0, support[static_cast<std::size_t>(y)], rng));
  }
  return out;
}

}  // namespace detail

inline TaskData build_task(const SynthModel& model, int task_id, Rng& rng) {
  const SynthSpec& s = model.spec;
  const auto support = sample_support(s.support_s, s.modes_per_class, s.n_classes, rng);
  const auto classes = model.task_classes(task_id);
  TaskData task;
  task.task_id = task_id;
  task.train = detail::synth_split(model, task_id, s.n_train, classes, support, true, rng);
  task.eval_spurious = detail::synth_split(model, task_id, s.n_eval, classes, support, true, rng);
  return task;
}

inline Scenario build_scenario(const SynthModel& model) {
  const SynthSpec& s = model.spec;
  Scenario sc;
  sc.n_classes = s.n_classes;
  for (int t = 0; t < s.n_tasks; ++t) {
    Rng rng(derive_seed(s.seed, "task", static_cast<std::uint64_t>(t)));
    sc.tasks.push_back(build_task(model, t, rng));
    sc.task_classes.push_back(model.task_classes(t));
  }
  Rng rng(derive_seed(s.seed, "clean_test"));
  std::vector<int> all(static_cast<std::size_t>(s.n_classes));
  for (int c = 0; c < s.n_classes; ++c) all[static_cast<std::size_t>(c)] = c;
  std::vector<std::vector<int>> full(static_cast<std::size_t>(s.n_classes));
  for (auto& f : full)
    for (int k = 0; k < s.modes_per_class; ++k) f.push_back(k);
  sc.clean_test = detail::synth_split(model, 0, s.n_clean_test, all, full, false, rng);
  for (auto& smp : sc.clean_test) smp.task_id = model.task_of_class(smp.y);
  return sc;
}

inline Scenario build_scenario(const SynthSpec& spec) { return build_scenario(make_synth_model(spec)); }

}  // namespace spurcl
