#pragma once

// Multi-head versus single-head evaluation on a frozen feature extractor.
// Per-task Linear and WeightNorm heads are trained with a softmax over the
// task's own classes and frozen afterwards; a nearest-mean head is fitted
// incrementally. The same weights are then scored with per-task masks and
// with all classes competing.

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "spurcl/error.hpp"
#include "spurcl/metrics.hpp"
#include "spurcl/nn.hpp"
#include "spurcl/rng.hpp"
#include "spurcl/sample.hpp"
#include "spurcl/train.hpp"

namespace spurcl {

struct ProtocolConfig {
  int epochs_per_task = 20;
  std::size_t batch_size = 64;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

inline void validate(const ProtocolConfig& c) {
  if (c.epochs_per_task < 1) throw ConfigError("eval.protocol.epochs_per_task", "must be >= 1");
  if (c.batch_size < 1) throw ConfigError("eval.protocol.batch_size", "must be >= 1");
  if (c.lr < 0) throw ConfigError("eval.protocol.lr", "must be >= 0");
  if (c.momentum < 0 || c.momentum >= 1) throw ConfigError("eval.protocol.momentum", "must be in [0,1)");
}

struct TaskGap {
  int task = 0;
  double local = 0.0;
  double global = 0.0;
  std::size_t n = 0;
};

struct HeadGap {
  nn::HeadKind kind = nn::HeadKind::Linear;
  double a_local = 0.0;   // mean over tasks of the masked accuracy
  double a_global = 0.0;  // mean over tasks of the all-classes accuracy
  double gap = 0.0;
  std::vector<TaskGap> per_task;
};

struct GapReport {
  std::vector<HeadGap> heads;  // Linear, WeightNorm, MeanLayer
  int n_tasks = 0;
  int n_classes = 0;
  /// Every per-task head is bit-identical at the end of the run to its
  /// snapshot taken when it was frozen.
  bool frozen_heads_intact = true;

  const HeadGap& head(nn::HeadKind k) const {
    for (const auto& h : heads)
      if (h.kind == k) return h;
    throw DataError(std::string("GapReport: no entry for head ") + nn::to_string(k));
  }
};

/// Per-task heads after a protocol run, with their freeze-time snapshots.
struct ProtocolHeads {
  std::vector<nn::Head> linear;
  std::vector<nn::Head> weightnorm;
  std::vector<nn::Head> linear_at_freeze;
  std::vector<nn::Head> weightnorm_at_freeze;
  nn::Head meanlayer;
};

/// Throws unless every task's class set is disjoint from the others'.
inline void require_disjoint_classes(const Scenario& sc) {
  std::set<int> seen;
  for (std::size_t t = 0; t < sc.task_classes.size(); ++t)
    for (int c : sc.task_classes[t])
      if (!seen.insert(c).second)
        throw DataError("local_spurious_protocol: class " + std::to_string(c) + " appears in more than one task");
}

namespace detail {

inline int local_index(const std::vector<int>& classes, int y) {
  const auto it = std::find(classes.begin(), classes.end(), y);
  if (it == classes.end()) throw DataError("label " + std::to_string(y) + " is not in the task's classes");
  return static_cast<int>(it - classes.begin());
}

/// Scatter per-task head outputs into one logit vector over all classes.
inline std::vector<double> global_logits(const std::vector<nn::Head>& heads,
                                         const std::vector<std::vector<int>>& task_classes, std::size_t n_classes,
                                         std::span<const double> z) {
  std::vector<double> out(n_classes, 0.0);
  for (std::size_t t = 0; t < heads.size(); ++t) {
    const auto o = nn::head_logits(heads[t], z);
    for (std::size_t k = 0; k < o.size(); ++k) out[static_cast<std::size_t>(task_classes[t][k])] = o[k];
  }
  return out;
}

}  // namespace detail

/// Fit per-task heads on a frozen feature map. `trunk` supplies the features
/// (its heads are ignored); `test` is scored afterwards and must only hold
/// classes that some task covers.
inline GapReport local_spurious_protocol(const Scenario& sc, const nn::ModelParams& trunk, std::span<const Sample> test,
                                         const ProtocolConfig& cfg, ProtocolHeads* heads_out = nullptr) {
  validate(cfg);
  if (sc.tasks.empty()) throw DataError("local_spurious_protocol: no tasks");
  if (sc.task_classes.size() != sc.tasks.size())
    throw DataError("local_spurious_protocol: every task needs its class list");
  require_disjoint_classes(sc);
  if (test.empty()) throw DataError("local_spurious_protocol: empty test set");

  nn::ModelParams features = trunk;
  features.heads.clear();
  features.dropout_rate = 0.0;
  const std::size_t h = features.latent_dim();
  const auto n_classes = static_cast<std::size_t>(sc.n_classes);

  ProtocolHeads ph;
  Rng init(derive_seed(cfg.seed, "protocol.init"));
  ph.meanlayer = nn::make_head(nn::HeadKind::MeanLayer, n_classes, h, init);

  for (std::size_t t = 0; t < sc.tasks.size(); ++t) {
    const auto& task = sc.tasks[t];
    const auto& classes = sc.task_classes[t];
    if (task.train.empty()) throw DataError("local_spurious_protocol: task " + std::to_string(t) + " has no data");
    const nn::Matrix z = nn::latents(features, task.train);
    std::vector<int> local(task.train.size());
    std::vector<int> labels(task.train.size());
    for (std::size_t i = 0; i < task.train.size(); ++i) {
      labels[i] = task.train[i].y;
      local[i] = detail::local_index(classes, labels[i]);
    }

    // Both heads see the same batches; their gradients are independent.
    nn::ModelParams pair;
    pair.input_size = h;
    pair.heads.push_back(nn::make_head(nn::HeadKind::Linear, classes.size(), h, init));
    pair.heads.push_back(nn::make_head(nn::HeadKind::WeightNorm, classes.size(), h, init));
    Rng rng(derive_seed(cfg.seed, "protocol.train", t));
    const WeightedSampler sampler(balanced_sampler_weights(local));
    const std::size_t steps = (task.train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
    nn::SgdState sgd;
    for (int epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
      for (std::size_t step = 0; step < steps; ++step) {
        nn::Matrix x(cfg.batch_size, h);
        std::vector<int> y(cfg.batch_size);
        for (std::size_t i = 0; i < cfg.batch_size; ++i) {
          const std::size_t k = sampler.draw(rng);
          std::copy(z.row(k).begin(), z.row(k).end(), x.row(i).begin());
          y[i] = local[k];
        }
        const auto cache = nn::forward_with_mask(pair, x, nn::Matrix{});
        std::vector<nn::Matrix> dl;
        for (const auto& lg : cache.logits) {
          nn::Matrix d(lg.rows, lg.cols);
          for (std::size_t i = 0; i < lg.rows; ++i) {
            const auto ce = nn::softmax_ce(lg.row(i), y[i]);
            for (std::size_t c = 0; c < ce.dlogits.size(); ++c) d(i, c) = ce.dlogits[c] * inv_b;
          }
          dl.push_back(std::move(d));
        }
        nn::sgd_step(pair, nn::backward(pair, cache, dl), cfg.lr, cfg.momentum, sgd);
      }
    }
    for (auto& head : pair.heads) head.frozen = true;
    ph.linear.push_back(pair.heads[0]);
    ph.weightnorm.push_back(pair.heads[1]);
    ph.linear_at_freeze.push_back(pair.heads[0]);
    ph.weightnorm_at_freeze.push_back(pair.heads[1]);
    nn::meanlayer_fit(ph.meanlayer, z, labels);
  }

  // Scoring.
  const nn::Matrix zt = nn::latents(features, test);
  std::vector<int> test_task(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    int owner = -1;
    for (std::size_t t = 0; t < sc.task_classes.size() && owner < 0; ++t)
      if (std::find(sc.task_classes[t].begin(), sc.task_classes[t].end(), test[i].y) != sc.task_classes[t].end())
        owner = static_cast<int>(t);
    if (owner < 0) throw DataError("local_spurious_protocol: test label " + std::to_string(test[i].y) + " is in no task");
    test_task[i] = owner;
  }

  GapReport report;
  report.n_tasks = static_cast<int>(sc.tasks.size());
  report.n_classes = sc.n_classes;
  const std::array<nn::HeadKind, 3> kinds = {nn::HeadKind::Linear, nn::HeadKind::WeightNorm, nn::HeadKind::MeanLayer};
  for (nn::HeadKind kind : kinds) {
    HeadGap hg;
    hg.kind = kind;
    std::vector<std::size_t> n(sc.tasks.size(), 0), hit_local(sc.tasks.size(), 0), hit_global(sc.tasks.size(), 0);
    for (std::size_t i = 0; i < test.size(); ++i) {
      std::vector<double> logits;
      if (kind == nn::HeadKind::MeanLayer) logits = nn::head_logits(ph.meanlayer, zt.row(i));
      else
        logits = detail::global_logits(kind == nn::HeadKind::Linear ? ph.linear : ph.weightnorm, sc.task_classes,
                                       n_classes, zt.row(i));
      const auto t = static_cast<std::size_t>(test_task[i]);
      ++n[t];
      hit_local[t] += masked_argmax(logits, sc.task_classes[t]) == test[i].y;
      hit_global[t] += masked_argmax(logits, {}) == test[i].y;
    }
    std::size_t covered = 0;
    for (std::size_t t = 0; t < sc.tasks.size(); ++t) {
      if (n[t] == 0) continue;
      const double loc = static_cast<double>(hit_local[t]) / static_cast<double>(n[t]);
      const double glo = static_cast<double>(hit_global[t]) / static_cast<double>(n[t]);
      hg.per_task.push_back({static_cast<int>(t), loc, glo, n[t]});
      hg.a_local += loc;
      hg.a_global += glo;
      ++covered;
    }
    hg.a_local /= static_cast<double>(covered);
    hg.a_global /= static_cast<double>(covered);
    hg.gap = hg.a_local - hg.a_global;
    report.heads.push_back(std::move(hg));
  }
  report.frozen_heads_intact = ph.linear == ph.linear_at_freeze && ph.weightnorm == ph.weightnorm_at_freeze;
  if (heads_out) *heads_out = std::move(ph);
  return report;
}

/// Held-out test data with the same distribution as training: the union of
/// every task's evaluation split.
inline Dataset pooled_eval(const Scenario& sc) {
  Dataset out;
  for (const auto& t : sc.tasks) out.insert(out.end(), t.eval_spurious.begin(), t.eval_spurious.end());
  return out;
}

// ---------------------------------------------------------------------------
// Frozen feature extractors

/// One dense layer with N(0, 1/input) weights and zero bias, then ReLU.
inline nn::ModelParams random_projection_trunk(std::size_t input_size, std::size_t width, std::uint64_t seed) {
  if (input_size == 0 || width == 0) throw ConfigError("random_projection.width", "must be positive");
  Rng rng(derive_seed(seed, "random_projection"));
  nn::ModelParams p;
  p.input_size = input_size;
  nn::DenseLayer layer{nn::Matrix(width, input_size), std::vector<double>(width, 0.0)};
  const double scale = 1.0 / std::sqrt(static_cast<double>(input_size));
  for (auto& w : layer.weight.values) w = scale * rng.normal();
  p.trunk.push_back(std::move(layer));
  p.trunk_frozen = true;
  return p;
}

/// Identity feature map: the inputs themselves are the features.
inline nn::ModelParams identity_trunk(std::size_t input_size) {
  nn::ModelParams p;
  p.input_size = input_size;
  p.trunk_frozen = true;
  return p;
}

/// Train an MLP with a linear head on `data` (plain ERM), then return its
/// trunk frozen and without heads.
inline nn::ModelParams pretrain_trunk(std::span<const Sample> data, int n_classes, const TrainerConfig& cfg) {
  if (data.empty()) throw DataError("pretrain_trunk: empty dataset");
  TrainerConfig c = cfg;
  c.method = Method::Finetune;
  c.pretrained_trunk.reset();
  validate(c);
  Scenario sc;
  sc.n_classes = n_classes;
  TaskData task;
  task.train.assign(data.begin(), data.end());
  sc.tasks.push_back(std::move(task));
  nn::ModelParams model = make_scenario_model(sc, c);
  ReplayBuffer unused(0);
  TrainState state;
  Rng rng(derive_seed(c.seed, "pretrain"));
  train_task(model, sc.tasks.front(), unused, c, rng, state);
  model.heads.clear();
  model.trunk_frozen = true;
  model.dropout_rate = 0.0;
  return model;
}

}  // namespace spurcl
