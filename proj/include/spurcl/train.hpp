#pragma once

// Continual training: finetune, class-balanced replay, and replay-backed
// out-of-distribution objectives where each task of origin in a mixed batch
// is one environment.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spurcl/error.hpp"
#include "spurcl/io.hpp"
#include "spurcl/metrics.hpp"
#include "spurcl/nn.hpp"
#include "spurcl/rng.hpp"
#include "spurcl/sample.hpp"

namespace spurcl {

enum class Method { Finetune, Replay, IRM, IBERM, IBIRM, GroupDRO, SpectralDecoupling };

inline constexpr std::array<Method, 7> kAllMethods = {Method::Finetune, Method::Replay, Method::IRM,
                                                      Method::IBERM,    Method::IBIRM,  Method::GroupDRO,
                                                      Method::SpectralDecoupling};

inline const char* to_string(Method m) {
  switch (m) {
    case Method::Finetune: return "finetune";
    case Method::Replay: return "replay";
    case Method::IRM: return "irm";
    case Method::IBERM: return "ib_erm";
    case Method::IBIRM: return "ib_irm";
    case Method::GroupDRO: return "group_dro";
    case Method::SpectralDecoupling: return "spectral_decoupling";
  }
  return "?";
}

inline Method parse_method(const std::string& s, const std::string& field = "trainer.method") {
  for (Method m : kAllMethods)
    if (s == to_string(m)) return m;
  std::string valid;
  for (Method m : kAllMethods) valid += std::string(valid.empty() ? "" : ", ") + to_string(m);
  throw ConfigError(field, "unknown method '" + s + "' (valid methods: " + valid + ")");
}

struct TrainerConfig {
  Method method = Method::Replay;
  int epochs_per_task = 20;
  std::size_t batch_size = 64;
  double lr = 0.01;
  double momentum = 0.9;
  double lambda_penalty = 1.0;  // IRM and Spectral Decoupling weight
  double penalty_warmup_epochs = 1.0;
  double eta_dro = 0.01;
  double lambda_ib = 0.1;
  std::size_t buffer_per_class = 100;
  std::optional<std::string> pretrained_trunk;
  double dropout_rate = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> hidden = {128, 128};
  nn::HeadKind head = nn::HeadKind::Linear;
  bool per_epoch_eval = false;
};

inline void validate(const TrainerConfig& c) {
  if (c.epochs_per_task < 1) throw ConfigError("trainer.epochs_per_task", "must be >= 1");
  if (c.batch_size < 1) throw ConfigError("trainer.batch_size", "must be >= 1");
  if (c.lr < 0) throw ConfigError("trainer.lr", "must be >= 0");
  if (c.momentum < 0 || c.momentum >= 1) throw ConfigError("trainer.momentum", "must be in [0,1)");
  if (c.lambda_penalty < 0) throw ConfigError("trainer.lambda_penalty", "must be >= 0");
  if (c.lambda_ib < 0) throw ConfigError("trainer.lambda_ib", "must be >= 0");
  if (c.eta_dro < 0) throw ConfigError("trainer.eta_dro", "must be >= 0");
  if (c.penalty_warmup_epochs < 0) throw ConfigError("trainer.penalty_warmup_epochs", "must be >= 0");
  if (!(c.dropout_rate >= 0 && c.dropout_rate < 1)) throw ConfigError("trainer.dropout_rate", "must be in [0,1)");
  if (c.head == nn::HeadKind::MeanLayer) throw ConfigError("trainer.head", "meanlayer has nothing to train");
}

// ---------------------------------------------------------------------------
// Replay buffer

struct BufferEntry {
  Sample sample;
  int task_of_origin = 0;
};

/// Class-balanced rehearsal memory. Each task contributes a uniform random
/// subset of up to N samples per class. When a class recurs across tasks the
/// per-class total is held at N by giving every (class, task) slot an equal
/// share and uniformly downsampling the slots that exceed it.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t per_class = 100) : per_class_(per_class) {}

  std::size_t capacity_per_class() const { return per_class_; }

  void update(const TaskData& task, Rng& rng) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < task.train.size(); ++i) by_class[task.train[i].y].push_back(i);
    for (const auto& [cls, members] : by_class) {
      auto& slot = slots_[cls][task.task_id];
      for (std::size_t j : rng.choose(members.size(), per_class_)) slot.push_back(task.train[members[j]]);
      rebalance(slots_[cls], rng);
    }
  }

  std::size_t class_size(int cls) const {
    auto it = slots_.find(cls);
    if (it == slots_.end()) return 0;
    std::size_t n = 0;
    for (const auto& [t, v] : it->second) n += v.size();
    return n;
  }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [c, _] : slots_) n += class_size(c);
    return n;
  }

  bool empty() const { return size() == 0; }

  /// Entries ordered by class, then task of origin, then insertion.
  std::vector<BufferEntry> entries() const {
    std::vector<BufferEntry> out;
    for (const auto& [cls, tasks] : slots_)
      for (const auto& [t, samples] : tasks)
        for (const auto& s : samples) out.push_back({s, t});
    return out;
  }

 private:
  void rebalance(std::map<int, std::vector<Sample>>& tasks, Rng& rng) const {
    std::size_t total = 0;
    for (const auto& [t, v] : tasks) total += v.size();
    if (total <= per_class_) return;
    const std::size_t k = tasks.size();
    std::size_t j = 0;
    for (auto& [t, v] : tasks) {
      const std::size_t quota = per_class_ / k + (j < per_class_ % k ? 1 : 0);
      ++j;
      if (v.size() <= quota) continue;
      std::vector<Sample> kept;
      for (std::size_t i : rng.choose(v.size(), quota)) kept.push_back(std::move(v[i]));
      v = std::move(kept);
    }
  }

  std::size_t per_class_;
  std::map<int, std::map<int, std::vector<Sample>>> slots_;  // class -> task -> samples
};

// ---------------------------------------------------------------------------
// Balanced sampling

/// weight_i = 1 / count(label_i): every class gets equal total mass.
inline std::vector<double> balanced_sampler_weights(std::span<const int> labels) {
  if (labels.empty()) throw DataError("balanced_sampler_weights: no labels");
  std::map<int, std::size_t> counts;
  for (int y : labels) ++counts[y];
  std::vector<double> w(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) w[i] = 1.0 / static_cast<double>(counts[labels[i]]);
  return w;
}

/// Draws indices with replacement, proportional to the given weights.
class WeightedSampler {
 public:
  explicit WeightedSampler(std::span<const double> weights) {
    if (weights.empty()) throw DataError("WeightedSampler: no weights");
    cumulative_.reserve(weights.size());
    double acc = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw DataError("WeightedSampler: negative weight");
      acc += w;
      cumulative_.push_back(acc);
    }
    if (!(acc > 0.0)) throw DataError("WeightedSampler: weights sum to zero");
  }

  std::size_t draw(Rng& rng) const {
    const double u = rng.uniform() * cumulative_.back();
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return std::min(static_cast<std::size_t>(it - cumulative_.begin()), cumulative_.size() - 1);
  }

 private:
  std::vector<double> cumulative_;
};

// ---------------------------------------------------------------------------
// Objectives

/// Group weights for GroupDRO as unnormalized log-weights, shifted so the
/// largest is 0. update() applies q_g <- q_g * exp(eta * loss_g).
class GroupDroState {
 public:
  void ensure(int group) {
    if (log_q_.count(group)) return;
    double init = 0.0;
    if (!log_q_.empty()) {
      for (const auto& [g, v] : log_q_) init += v;
      init /= static_cast<double>(log_q_.size());
    }
    log_q_[group] = init;
  }

  void update(const std::map<int, double>& group_losses, double eta) {
    for (const auto& [g, loss] : group_losses) ensure(g);
    for (const auto& [g, loss] : group_losses) log_q_[g] += eta * loss;
    double mx = -std::numeric_limits<double>::infinity();
    for (const auto& [g, v] : log_q_) mx = std::max(mx, v);
    for (auto& [g, v] : log_q_) v -= mx;
  }

  /// Unnormalized weight exp(log q_g), in (0, 1].
  double raw_weight(int group) const { return std::exp(log_q_.at(group)); }

  /// Normalized q over every known group.
  std::map<int, double> probabilities() const {
    std::map<int, double> out;
    double z = 0.0;
    for (const auto& [g, v] : log_q_) z += std::exp(v);
    for (const auto& [g, v] : log_q_) out[g] = std::exp(v) / z;
    return out;
  }

 private:
  std::map<int, double> log_q_;
};

struct PenaltyGrad {
  double value = 0.0;
  nn::Matrix dlogits;
};

/// IRMv1 penalty summed over environments: for each environment e,
/// (d/dw CE_e(w * logits) at w = 1)^2, with the gradient w.r.t. the logits.
inline PenaltyGrad irm_penalty(const nn::Matrix& logits, std::span<const int> labels, std::span<const int> envs) {
  PenaltyGrad out{0.0, nn::Matrix(logits.rows, logits.cols)};
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < envs.size(); ++i) groups[envs[i]].push_back(i);
  for (const auto& [env, rows] : groups) {
    const double inv = 1.0 / static_cast<double>(rows.size());
    // s_i = sum_k (p_ik - y_ik) o_ik is d/dw of the per-sample CE at w = 1.
    double g = 0.0;
    std::vector<std::vector<double>> probs;
    std::vector<double> s_vals;
    for (std::size_t i : rows) {
      const auto lg = nn::softmax_ce(logits.row(i), labels[i]);
      const auto o = logits.row(i);
      double s = 0.0;
      std::vector<double> p(o.size());
      for (std::size_t k = 0; k < o.size(); ++k) {
        p[k] = lg.dlogits[k] + (static_cast<int>(k) == labels[i] ? 1.0 : 0.0);
        s += lg.dlogits[k] * o[k];
      }
      g += s * inv;
      probs.push_back(std::move(p));
      s_vals.push_back(s);
    }
    out.value += g * g;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const std::size_t i = rows[r];
      const auto o = logits.row(i);
      const auto& p = probs[r];
      double po = 0.0;
      for (std::size_t k = 0; k < o.size(); ++k) po += p[k] * o[k];
      for (std::size_t j = 0; j < o.size(); ++j) {
        const double yj = static_cast<int>(j) == labels[i] ? 1.0 : 0.0;
        const double ds = (p[j] - yj) + p[j] * (o[j] - po);
        out.dlogits(i, j) += 2.0 * g * inv * ds;
      }
    }
  }
  return out;
}

/// Mean over the batch of the per-dimension variance of the representation.
inline PenaltyGrad representation_variance(const nn::Matrix& z) {
  PenaltyGrad out{0.0, nn::Matrix(z.rows, z.cols)};
  if (z.rows == 0 || z.cols == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(z.rows);
  const double inv_h = 1.0 / static_cast<double>(z.cols);
  for (std::size_t k = 0; k < z.cols; ++k) {
    double mean = 0.0;
    for (std::size_t i = 0; i < z.rows; ++i) mean += z(i, k);
    mean *= inv_n;
    double var = 0.0;
    for (std::size_t i = 0; i < z.rows; ++i) var += (z(i, k) - mean) * (z(i, k) - mean);
    out.value += var * inv_n * inv_h;
    for (std::size_t i = 0; i < z.rows; ++i) out.dlogits(i, k) = 2.0 * inv_n * inv_h * (z(i, k) - mean);
  }
  return out;
}

struct MethodLoss {
  double loss = 0.0;
  double base_loss = 0.0;  // mean (or DRO-weighted) cross-entropy
  double penalty = 0.0;
  nn::Matrix dlogits;
  std::optional<nn::Matrix> dtrunk;  // representation penalty gradient
};

struct PenaltyWeights {
  double lambda = 0.0;     // IRM / Spectral Decoupling
  double lambda_ib = 0.0;  // information bottleneck
  double eta = 0.0;        // GroupDRO step size
};

/// Objective of `method` on one mixed batch. `logits` are the trained head's
/// outputs, `trunk_out` the pre-dropout representation. Penalties with a zero
/// weight are skipped entirely, so they cannot perturb the Replay gradient.
inline MethodLoss method_loss(Method method, const nn::Matrix& logits, const nn::Matrix& trunk_out,
                              std::span<const int> labels, std::span<const int> envs, const PenaltyWeights& w,
                              GroupDroState* dro = nullptr) {
  if (logits.rows == 0 || envs.empty()) throw DataError("method_loss: no environments in batch");
  if (labels.size() != logits.rows || envs.size() != logits.rows) throw ShapeError("method_loss: batch size mismatch");
  const std::size_t n = logits.rows;
  const double inv_n = 1.0 / static_cast<double>(n);
  MethodLoss out;
  out.dlogits = nn::Matrix(n, logits.cols);

  std::vector<nn::LossGrad> per_sample;
  per_sample.reserve(n);
  for (std::size_t i = 0; i < n; ++i) per_sample.push_back(nn::softmax_ce(logits.row(i), labels[i]));

  // Per-sample weights; all exactly 1 except under GroupDRO.
  std::vector<double> sample_w(n, 1.0);
  if (method == Method::GroupDRO) {
    if (dro == nullptr) throw DataError("method_loss: GroupDRO needs its weight state");
    std::map<int, double> sums;
    std::map<int, std::size_t> counts;
    for (std::size_t i = 0; i < n; ++i) {
      sums[envs[i]] += per_sample[i].loss;
      ++counts[envs[i]];
    }
    std::map<int, double> group_loss;
    for (const auto& [g, s] : sums) group_loss[g] = s / static_cast<double>(counts[g]);
    dro->update(group_loss, w.eta);
    // Group g's share of the loss is n_g q_g / sum_h n_h q_h, which reduces to
    // the plain batch mean when every q_g is equal.
    double sum_q = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum_q += dro->raw_weight(envs[i]);
    const double mean_q = sum_q / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) sample_w[i] = dro->raw_weight(envs[i]) / mean_q;
  }

  for (std::size_t i = 0; i < n; ++i) {
    out.base_loss += sample_w[i] * per_sample[i].loss * inv_n;
    auto row = out.dlogits.row(i);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = sample_w[i] * per_sample[i].dlogits[c] * inv_n;
  }
  out.loss = out.base_loss;

  const bool irm = method == Method::IRM || method == Method::IBIRM;
  const bool ib = method == Method::IBERM || method == Method::IBIRM;
  if (irm && w.lambda != 0.0) {
    const auto pen = irm_penalty(logits, labels, envs);
    out.penalty += w.lambda * pen.value;
    for (std::size_t i = 0; i < out.dlogits.values.size(); ++i) out.dlogits.values[i] += w.lambda * pen.dlogits.values[i];
  }
  if (method == Method::SpectralDecoupling && w.lambda != 0.0) {
    double sq = 0.0;
    for (double v : logits.values) sq += v * v;
    out.penalty += 0.5 * w.lambda * sq * inv_n;
    for (std::size_t i = 0; i < out.dlogits.values.size(); ++i)
      out.dlogits.values[i] += w.lambda * logits.values[i] * inv_n;
  }
  if (ib && w.lambda_ib != 0.0) {
    auto pen = representation_variance(trunk_out);
    out.penalty += w.lambda_ib * pen.value;
    for (auto& v : pen.dlogits.values) v *= w.lambda_ib;
    out.dtrunk = std::move(pen.dlogits);
  }
  out.loss += out.penalty;
  return out;
}

/// Dot product of two loss gradients; negative means the updates interfere.
inline double interference(std::span<const double> grad_a, std::span<const double> grad_b) {
  if (grad_a.size() != grad_b.size()) throw ShapeError("interference: gradient lengths differ");
  return nn::dot(grad_a, grad_b);
}

/// Flat gradient of the mean cross-entropy of head `head` over `data`.
inline std::vector<double> task_gradient(const nn::ModelParams& model, std::span<const Sample> data,
                                         std::size_t head = 0) {
  if (data.empty()) throw DataError("task_gradient: empty dataset");
  nn::Batch batch;
  batch.x = nn::to_matrix(data);
  for (const auto& s : data) batch.labels.push_back(s.y);
  const auto cache = nn::forward_with_mask(model, batch.x, nn::Matrix{});
  std::vector<nn::Matrix> dl(model.heads.size());
  const double inv_n = 1.0 / static_cast<double>(data.size());
  dl[head] = nn::Matrix(data.size(), model.heads[head].n_outputs());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto lg = nn::softmax_ce(cache.logits[head].row(i), data[i].y);
    for (std::size_t c = 0; c < lg.dlogits.size(); ++c) dl[head](i, c) = lg.dlogits[c] * inv_n;
  }
  return nn::backward(model, cache, dl).flatten();
}

/// Mean over all cross-task sample pairs of the per-sample gradient dot
/// product, computed as the dot product of the two mean gradients.
inline double mean_cross_task_interference(const nn::ModelParams& model, std::span<const Sample> task_a,
                                           std::span<const Sample> task_b) {
  return interference(task_gradient(model, task_a), task_gradient(model, task_b));
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double mean_penalty = 0.0;
  std::size_t steps = 0;
};

/// Per-run mutable state that outlives a single task.
struct TrainState {
  GroupDroState dro;
};

using EpochCallback = std::function<void(const nn::ModelParams&, const EpochLog&)>;

inline PenaltyWeights penalty_weights(const TrainerConfig& cfg, double epoch_progress) {
  double ramp = 1.0;
  if (cfg.penalty_warmup_epochs > 0) ramp = std::min(1.0, epoch_progress / cfg.penalty_warmup_epochs);
  return {cfg.lambda_penalty * ramp, cfg.lambda_ib * ramp, cfg.eta_dro};
}

/// Train `model` on one task. Batches are drawn with replacement by the
/// class-balanced sampler over the task's data plus (except for Finetune)
/// the replay buffer; the buffer is refreshed after the last epoch.
inline std::vector<EpochLog> train_task(nn::ModelParams& model, const TaskData& task, ReplayBuffer& buffer,
                                        const TrainerConfig& cfg, Rng& rng, TrainState& state,
                                        const EpochCallback& on_epoch = {}) {
  if (task.train.empty()) throw DataError("train_task: empty training set for task " + std::to_string(task.task_id));
  if (model.heads.empty()) throw ShapeError("train_task: model has no head");
  const bool replay = cfg.method != Method::Finetune;

  std::vector<BufferEntry> memory;
  if (replay) memory = buffer.entries();
  std::vector<const Sample*> pool;
  std::vector<int> pool_env;
  for (const auto& s : task.train) {
    pool.push_back(&s);
    pool_env.push_back(task.task_id);
  }
  for (const auto& e : memory) {
    pool.push_back(&e.sample);
    pool_env.push_back(e.task_of_origin);
  }
  std::vector<int> labels;
  for (const Sample* s : pool) labels.push_back(s->y);
  const WeightedSampler sampler(balanced_sampler_weights(labels));

  const std::size_t steps = (pool.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t dim = model.input_size;
  nn::SgdState sgd;
  std::vector<EpochLog> logs;
  for (int epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
    EpochLog log{epoch, 0.0, 0.0, steps};
    for (std::size_t step = 0; step < steps; ++step) {
      nn::Batch batch;
      batch.x = nn::Matrix(cfg.batch_size, dim);
      for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        const std::size_t k = sampler.draw(rng);
        const Sample& s = *pool[k];
        if (s.x.size() != dim) throw ShapeError("train_task: sample dimension does not match the model");
        for (std::size_t d = 0; d < dim; ++d) batch.x(i, d) = s.x[d];
        batch.labels.push_back(s.y);
        batch.envs.push_back(pool_env[k]);
      }
      const auto cache = nn::forward(model, batch.x, true, rng);
      const double progress = epoch + static_cast<double>(step) / static_cast<double>(steps);
      const auto ml = method_loss(cfg.method, cache.logits[0], cache.trunk_out, batch.labels, batch.envs,
                                  penalty_weights(cfg, progress), &state.dro);
      std::vector<nn::Matrix> dl(model.heads.size());
      dl[0] = ml.dlogits;
      const auto grads = nn::backward(model, cache, dl, ml.dtrunk ? &*ml.dtrunk : nullptr);
      nn::sgd_step(model, grads, cfg.lr, cfg.momentum, sgd);
      log.mean_loss += ml.loss / static_cast<double>(steps);
      log.mean_penalty += ml.penalty / static_cast<double>(steps);
    }
    logs.push_back(log);
    if (on_epoch) on_epoch(model, log);
  }
  if (replay) {
    Rng buffer_rng(derive_seed(cfg.seed, "buffer", static_cast<std::uint64_t>(task.task_id)));
    buffer.update(task, buffer_rng);
  }
  return logs;
}

/// A fresh model for `scenario` per the trainer config (one head over all
/// classes); loads and freezes the pretrained trunk when configured.
inline nn::ModelParams make_scenario_model(const Scenario& scenario, const TrainerConfig& cfg) {
  Rng init(derive_seed(cfg.seed, "init"));
  const std::array<nn::HeadSpec, 1> heads = {nn::HeadSpec{cfg.head, static_cast<std::size_t>(scenario.n_classes)}};
  if (cfg.pretrained_trunk) {
    nn::ModelParams pre = io::read_checkpoint(io::read_file(*cfg.pretrained_trunk));
    if (pre.input_size != scenario.input_dim())
      throw ShapeError("pretrained trunk expects " + std::to_string(pre.input_size) + " inputs, scenario has " +
                       std::to_string(scenario.input_dim()));
    nn::ModelParams m;
    m.input_size = pre.input_size;
    m.trunk = std::move(pre.trunk);
    m.trunk_frozen = true;
    m.dropout_rate = cfg.dropout_rate;
    for (const auto& hs : heads) m.heads.push_back(nn::make_head(hs.kind, hs.n_outputs, m.latent_dim(), init));
    return m;
  }
  return nn::make_model(scenario.input_dim(), cfg.hidden, heads, cfg.dropout_rate, init);
}

struct RunOptions {
  std::string run_id = "run";
  nlohmann::json config_snapshot;
};

/// Train through every task in order, evaluating the clean test set, each
/// seen task's spurious split and the task's training data after every task
/// (and after every epoch when cfg.per_epoch_eval is set).
inline RunRecord run_scenario(const Scenario& scenario, const TrainerConfig& cfg, const RunOptions& opt = {},
                              nn::ModelParams* final_model = nullptr) {
  validate(cfg);
  if (scenario.tasks.empty()) throw DataError("run_scenario: scenario has no tasks");
  RunRecord rec;
  rec.run_id = opt.run_id;
  rec.seed = cfg.seed;
  rec.config = opt.config_snapshot;
  nn::ModelParams model = make_scenario_model(scenario, cfg);
  ReplayBuffer buffer(cfg.buffer_per_class);
  TrainState state;

  auto evaluate = [&](const nn::ModelParams& m, int task, int epoch) {
    rec.add(task, epoch, kSplitCleanTest, "accuracy", accuracy(m, scenario.clean_test));
    for (int k = 0; k <= task; ++k) {
      const auto& eval = scenario.tasks[static_cast<std::size_t>(k)].eval_spurious;
      if (!eval.empty()) rec.add(task, epoch, eval_spurious_split(k), "accuracy", accuracy(m, eval));
    }
  };

  for (const auto& task : scenario.tasks) {
    const int t = task.task_id;
    Rng rng(derive_seed(cfg.seed, "train", static_cast<std::uint64_t>(t)));
    const auto logs = train_task(model, task, buffer, cfg, rng, state, [&](const nn::ModelParams& m, const EpochLog& log) {
      rec.add(t, log.epoch, kSplitTrain, "loss", log.mean_loss);
      if (cfg.per_epoch_eval) evaluate(m, t, log.epoch);
    });
    evaluate(model, t, kPostTaskEpoch);
    rec.add(t, kPostTaskEpoch, kSplitTrain, "accuracy", accuracy(model, task.train));
  }
  if (final_model) *final_model = std::move(model);
  return rec;
}

}  // namespace spurcl
