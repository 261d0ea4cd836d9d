#pragma once

// Small MLP engine with manual backpropagation. Parameters and all
// accumulation are 64-bit; checkpoints store 32-bit floats.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spurcl/error.hpp"
#include "spurcl/rng.hpp"
#include "spurcl/sample.hpp"

namespace spurcl::nn {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
  bool empty() const { return values.empty(); }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Index of the largest entry; the lowest index wins ties.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// ---------------------------------------------------------------------------
// Heads

enum class HeadKind { Linear, WeightNorm, MeanLayer };

inline const char* to_string(HeadKind k) {
  switch (k) {
    case HeadKind::Linear: return "linear";
    case HeadKind::WeightNorm: return "weightnorm";
    case HeadKind::MeanLayer: return "meanlayer";
  }
  return "?";
}

inline HeadKind parse_head_kind(const std::string& s, const std::string& field = "head") {
  if (s == "linear") return HeadKind::Linear;
  if (s == "weightnorm") return HeadKind::WeightNorm;
  if (s == "meanlayer") return HeadKind::MeanLayer;
  throw ConfigError(field, "unknown head kind '" + s + "' (valid: linear, weightnorm, meanlayer)");
}

struct Head {
  HeadKind kind = HeadKind::Linear;
  Matrix weight;              // N x h for Linear and WeightNorm
  std::vector<double> bias;   // N, Linear only
  Matrix class_means;         // N x h, MeanLayer only
  std::vector<std::size_t> mean_counts;
  bool frozen = false;

  std::size_t n_outputs() const { return kind == HeadKind::MeanLayer ? class_means.rows : weight.rows; }
  std::size_t latent_dim() const { return kind == HeadKind::MeanLayer ? class_means.cols : weight.cols; }
  bool trainable() const { return !frozen && kind != HeadKind::MeanLayer; }

  friend bool operator==(const Head&, const Head&) = default;
};

inline void check_weightnorm_rows(const Head& head) {
  for (std::size_t i = 0; i < head.weight.rows; ++i)
    if (norm(head.weight.row(i)) == 0.0)
      throw ShapeError("weightnorm head: row " + std::to_string(i) + " is zero");
}

inline Head make_head(HeadKind kind, std::size_t n_outputs, std::size_t latent_dim, Rng& rng) {
  Head h;
  h.kind = kind;
  if (kind == HeadKind::MeanLayer) {
    h.class_means = Matrix(n_outputs, latent_dim);
    h.mean_counts.assign(n_outputs, 0);
    return h;
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(latent_dim, 1)));
  h.weight = Matrix(n_outputs, latent_dim);
  for (auto& w : h.weight.values) w = rng.uniform(-bound, bound);
  if (kind == HeadKind::Linear) {
    h.bias.resize(n_outputs);
    for (auto& b : h.bias) b = rng.uniform(-bound, bound);
  } else {
    check_weightnorm_rows(h);
  }
  return h;
}

/// o_i = <z, A_i> + b_i
inline std::vector<double> linear_logits(const Head& head, std::span<const double> z) {
  std::vector<double> o(head.weight.rows);
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = dot(z, head.weight.row(i)) + head.bias[i];
  return o;
}

/// o_i = ||z|| cos(z, A_i) = <z, A_i> / ||A_i||. Row norms and biases are unused.
inline std::vector<double> weightnorm_logits(const Head& head, std::span<const double> z) {
  std::vector<double> o(head.weight.rows);
  for (std::size_t i = 0; i < o.size(); ++i) {
    const auto row = head.weight.row(i);
    o[i] = dot(z, row) / norm(row);
  }
  return o;
}

/// o_i = -||z - mu_i||, so the argmax is the nearest class mean.
inline std::vector<double> meanlayer_logits(const Head& head, std::span<const double> z) {
  std::vector<double> o(head.class_means.rows);
  for (std::size_t i = 0; i < o.size(); ++i) {
    const auto mu = head.class_means.row(i);
    double d2 = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) d2 += (z[k] - mu[k]) * (z[k] - mu[k]);
    o[i] = -std::sqrt(d2);
  }
  return o;
}

inline std::vector<double> head_logits(const Head& head, std::span<const double> z) {
  if (z.size() != head.latent_dim()) throw ShapeError("head: latent size mismatch");
  switch (head.kind) {
    case HeadKind::Linear: return linear_logits(head, z);
    case HeadKind::WeightNorm: return weightnorm_logits(head, z);
    case HeadKind::MeanLayer: return meanlayer_logits(head, z);
  }
  return {};
}

/// Running-mean update; fitting batch A then batch B equals fitting A u B.
inline void meanlayer_fit(Head& head, const Matrix& latents, std::span<const int> labels) {
  if (head.kind != HeadKind::MeanLayer) throw ShapeError("meanlayer_fit: head is not a MeanLayer");
  if (latents.rows != labels.size()) throw ShapeError("meanlayer_fit: label count mismatch");
  if (latents.rows > 0 && latents.cols != head.class_means.cols) throw ShapeError("meanlayer_fit: latent size mismatch");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || c >= head.class_means.rows) throw DataError("meanlayer_fit: label out of range");
    const double n = static_cast<double>(++head.mean_counts[c]);
    auto mu = head.class_means.row(c);
    const auto z = latents.row(i);
    for (std::size_t k = 0; k < mu.size(); ++k) mu[k] += (z[k] - mu[k]) / n;
  }
}

/// Throws unless each of `classes` has at least one fitted sample.
inline void meanlayer_require_fitted(const Head& head, std::span<const int> classes) {
  for (int c : classes)
    if (head.mean_counts.at(static_cast<std::size_t>(c)) == 0)
      throw DataError("meanlayer: class " + std::to_string(c) + " has no fitted samples");
}

// ---------------------------------------------------------------------------
// Loss

struct LossGrad {
  double loss = 0.0;
  std::vector<double> dlogits;
};

/// Cross-entropy with the softmax restricted to `active` classes. Gradient
/// entries outside the mask are exactly zero.
inline LossGrad masked_softmax_ce(std::span<const double> logits, int label, std::span<const int> active) {
  if (active.empty()) throw DataError("masked_softmax_ce: empty mask");
  if (std::find(active.begin(), active.end(), label) == active.end())
    throw DataError("masked_softmax_ce: label " + std::to_string(label) + " outside the active mask");
  double m = -std::numeric_limits<double>::infinity();
  for (int c : active) m = std::max(m, logits[static_cast<std::size_t>(c)]);
  double z = 0.0;
  for (int c : active) z += std::exp(logits[static_cast<std::size_t>(c)] - m);
  const double lse = m + std::log(z);
  LossGrad out;
  out.loss = lse - logits[static_cast<std::size_t>(label)];
  out.dlogits.assign(logits.size(), 0.0);
  for (int c : active) out.dlogits[static_cast<std::size_t>(c)] = std::exp(logits[static_cast<std::size_t>(c)] - lse);
  out.dlogits[static_cast<std::size_t>(label)] -= 1.0;
  return out;
}

inline LossGrad softmax_ce(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
    throw DataError("softmax_ce: label out of range");
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  const double lse = m + std::log(z);
  LossGrad out;
  out.loss = lse - logits[static_cast<std::size_t>(label)];
  out.dlogits.resize(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) out.dlogits[c] = std::exp(logits[c] - lse);
  out.dlogits[static_cast<std::size_t>(label)] -= 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// Model

struct DenseLayer {
  Matrix weight;  // out x in
  std::vector<double> bias;
  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct ModelParams {
  std::size_t input_size = 0;
  std::vector<DenseLayer> trunk;  // affine + ReLU each
  bool trunk_frozen = false;
  std::vector<Head> heads;
  double dropout_rate = 0.0;

  std::size_t latent_dim() const { return trunk.empty() ? input_size : trunk.back().weight.rows; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : trunk) n += l.weight.values.size() + l.bias.size();
    for (const auto& h : heads) n += h.weight.values.size() + h.bias.size();
    return n;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct HeadSpec {
  HeadKind kind = HeadKind::Linear;
  std::size_t n_outputs = 2;
};

/// Weights uniform in +-1/sqrt(fan_in).
inline ModelParams make_model(std::size_t input_size, std::span<const std::size_t> hidden,
                              std::span<const HeadSpec> heads, double dropout_rate, Rng& rng) {
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate", "must be in [0,1)");
  if (input_size == 0) throw ShapeError("make_model: input size must be positive");
  ModelParams p;
  p.input_size = input_size;
  p.dropout_rate = dropout_rate;
  std::size_t fan_in = input_size;
  for (std::size_t width : hidden) {
    if (width == 0) throw ConfigError("hidden", "layer width must be positive");
    DenseLayer layer{Matrix(width, fan_in), std::vector<double>(width)};
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& w : layer.weight.values) w = rng.uniform(-bound, bound);
    for (auto& b : layer.bias) b = rng.uniform(-bound, bound);
    p.trunk.push_back(std::move(layer));
    fan_in = width;
  }
  for (const auto& hs : heads) p.heads.push_back(make_head(hs.kind, hs.n_outputs, fan_in, rng));
  return p;
}

inline Matrix to_matrix(std::span<const Sample> samples) {
  if (samples.empty()) return {};
  Matrix m(samples.size(), samples.front().x.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].x.size() != m.cols) throw ShapeError("to_matrix: samples differ in dimension");
    for (std::size_t k = 0; k < m.cols; ++k) m(i, k) = samples[i].x[k];
  }
  return m;
}

struct ForwardCache {
  std::vector<Matrix> layer_inputs;  // input of each trunk layer
  std::vector<Matrix> preacts;
  Matrix trunk_out;   // latent before dropout
  Matrix keep_scale;  // 0 or 1/(1-rate) per latent entry; empty when dropout is off
  Matrix latent;      // what the heads see
  std::vector<Matrix> logits;
};

namespace detail {

inline Matrix affine(const Matrix& x, const DenseLayer& layer) {
  Matrix y(x.rows, layer.weight.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const auto xi = x.row(i);
    for (std::size_t o = 0; o < layer.weight.rows; ++o) y(i, o) = dot(xi, layer.weight.row(o)) + layer.bias[o];
  }
  return y;
}

inline Matrix head_forward(const Head& head, const Matrix& z) {
  Matrix out(z.rows, head.n_outputs());
  for (std::size_t i = 0; i < z.rows; ++i) {
    const auto o = head_logits(head, z.row(i));
    std::copy(o.begin(), o.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace detail

/// Forward pass with an explicit dropout keep-mask (1 keep, 0 drop). An empty
/// mask disables dropout.
inline ForwardCache forward_with_mask(const ModelParams& params, const Matrix& x, const Matrix& keep_mask) {
  if (x.cols != params.input_size) {
    throw ShapeError("forward: input has " + std::to_string(x.cols) + " features, model expects " +
                     std::to_string(params.input_size));
  }
  ForwardCache cache;
  Matrix h = x;
  for (const auto& layer : params.trunk) {
    cache.layer_inputs.push_back(h);
    Matrix pre = detail::affine(h, layer);
    h = pre;
    for (auto& v : h.values) v = v > 0.0 ? v : 0.0;
    cache.preacts.push_back(std::move(pre));
  }
  cache.trunk_out = std::move(h);
  cache.latent = cache.trunk_out;
  if (!keep_mask.empty()) {
    if (keep_mask.rows != cache.latent.rows || keep_mask.cols != cache.latent.cols)
      throw ShapeError("forward: dropout mask shape mismatch");
    const double scale = 1.0 / (1.0 - params.dropout_rate);
    cache.keep_scale = Matrix(keep_mask.rows, keep_mask.cols);
    for (std::size_t i = 0; i < keep_mask.values.size(); ++i) {
      cache.keep_scale.values[i] = keep_mask.values[i] != 0.0 ? scale : 0.0;
      cache.latent.values[i] *= cache.keep_scale.values[i];
    }
  }
  for (const auto& head : params.heads) cache.logits.push_back(detail::head_forward(head, cache.latent));
  return cache;
}

/// Inverted dropout on the latent when `train_mode` and the rate is positive.
/// The mask is drawn from `rng` only in that case.
inline ForwardCache forward(const ModelParams& params, const Matrix& x, bool train_mode, Rng& rng) {
  Matrix mask;
  if (train_mode && params.dropout_rate > 0.0) {
    mask = Matrix(x.rows, params.latent_dim());
    for (auto& m : mask.values) m = rng.uniform() >= params.dropout_rate ? 1.0 : 0.0;
  }
  return forward_with_mask(params, x, mask);
}

/// Latent features (eval mode) for a dataset.
inline Matrix latents(const ModelParams& params, std::span<const Sample> samples) {
  if (samples.empty()) return Matrix(0, params.latent_dim());
  return forward_with_mask(params, to_matrix(samples), Matrix{}).trunk_out;
}

// ---------------------------------------------------------------------------
// Backward

struct Gradients {
  std::vector<Matrix> trunk_weight;
  std::vector<std::vector<double>> trunk_bias;
  std::vector<Matrix> head_weight;
  std::vector<std::vector<double>> head_bias;

  static Gradients zeros_like(const ModelParams& p) {
    Gradients g;
    for (const auto& l : p.trunk) {
      g.trunk_weight.emplace_back(l.weight.rows, l.weight.cols);
      g.trunk_bias.emplace_back(l.bias.size(), 0.0);
    }
    for (const auto& h : p.heads) {
      g.head_weight.emplace_back(h.weight.rows, h.weight.cols);
      g.head_bias.emplace_back(h.bias.size(), 0.0);
    }
    return g;
  }

  /// Flattened in the canonical parameter order (see trainable_coordinates).
  std::vector<double> flatten() const {
    std::vector<double> out;
    for (std::size_t l = 0; l < trunk_weight.size(); ++l) {
      out.insert(out.end(), trunk_weight[l].values.begin(), trunk_weight[l].values.end());
      out.insert(out.end(), trunk_bias[l].begin(), trunk_bias[l].end());
    }
    for (std::size_t h = 0; h < head_weight.size(); ++h) {
      out.insert(out.end(), head_weight[h].values.begin(), head_weight[h].values.end());
      out.insert(out.end(), head_bias[h].begin(), head_bias[h].end());
    }
    return out;
  }
};

/// Exact gradients given per-head dL/dlogits (rows = batch). `extra_dtrunk`
/// adds a gradient on the pre-dropout latent (used by representation
/// penalties). Frozen and MeanLayer heads get zero parameter gradient; a
/// frozen trunk gets zero gradient.
inline Gradients backward(const ModelParams& params, const ForwardCache& cache,
                          std::span<const Matrix> dlogits, const Matrix* extra_dtrunk = nullptr) {
  if (dlogits.size() != params.heads.size()) throw ShapeError("backward: need one dlogits matrix per head");
  Gradients g = Gradients::zeros_like(params);
  const std::size_t batch = cache.latent.rows;
  const std::size_t h_dim = cache.latent.cols;
  Matrix dz(batch, h_dim);

  for (std::size_t hi = 0; hi < params.heads.size(); ++hi) {
    const Head& head = params.heads[hi];
    const Matrix& dl = dlogits[hi];
    if (dl.empty()) continue;
    if (dl.rows != batch || dl.cols != head.n_outputs()) throw ShapeError("backward: dlogits shape mismatch");
    for (std::size_t i = 0; i < batch; ++i) {
      const auto z = cache.latent.row(i);
      auto dzi = dz.row(i);
      for (std::size_t o = 0; o < head.n_outputs(); ++o) {
        const double d = dl(i, o);
        if (d == 0.0) continue;
        switch (head.kind) {
          case HeadKind::Linear: {
            const auto a = head.weight.row(o);
            for (std::size_t k = 0; k < h_dim; ++k) dzi[k] += d * a[k];
            if (!head.frozen) {
              auto ga = g.head_weight[hi].row(o);
              for (std::size_t k = 0; k < h_dim; ++k) ga[k] += d * z[k];
              g.head_bias[hi][o] += d;
            }
            break;
          }
          case HeadKind::WeightNorm: {
            const auto a = head.weight.row(o);
            const double an = norm(a);
            const double za = dot(z, a);
            for (std::size_t k = 0; k < h_dim; ++k) dzi[k] += d * a[k] / an;
            if (!head.frozen) {
              auto ga = g.head_weight[hi].row(o);
              const double an3 = an * an * an;
              for (std::size_t k = 0; k < h_dim; ++k) ga[k] += d * (z[k] / an - za * a[k] / an3);
            }
            break;
          }
          case HeadKind::MeanLayer: {
            const auto mu = head.class_means.row(o);
            double dist = 0.0;
            for (std::size_t k = 0; k < h_dim; ++k) dist += (z[k] - mu[k]) * (z[k] - mu[k]);
            dist = std::sqrt(dist);
            if (dist > 0.0)
              for (std::size_t k = 0; k < h_dim; ++k) dzi[k] -= d * (z[k] - mu[k]) / dist;
            break;
          }
        }
      }
    }
  }

  if (params.trunk.empty() || params.trunk_frozen) return g;

  // Through dropout, then the extra latent gradient (pre-dropout).
  if (!cache.keep_scale.empty())
    for (std::size_t i = 0; i < dz.values.size(); ++i) dz.values[i] *= cache.keep_scale.values[i];
  if (extra_dtrunk != nullptr) {
    if (extra_dtrunk->rows != batch || extra_dtrunk->cols != h_dim) throw ShapeError("backward: extra gradient shape");
    for (std::size_t i = 0; i < dz.values.size(); ++i) dz.values[i] += extra_dtrunk->values[i];
  }

  Matrix delta = std::move(dz);
  for (std::size_t l = params.trunk.size(); l-- > 0;) {
    const DenseLayer& layer = params.trunk[l];
    const Matrix& pre = cache.preacts[l];
    for (std::size_t i = 0; i < delta.values.size(); ++i)
      if (!(pre.values[i] > 0.0)) delta.values[i] = 0.0;  // ReLU subgradient at 0 is 0
    const Matrix& in = cache.layer_inputs[l];
    Matrix& gw = g.trunk_weight[l];
    auto& gb = g.trunk_bias[l];
    for (std::size_t i = 0; i < batch; ++i) {
      const auto xi = in.row(i);
      for (std::size_t o = 0; o < layer.weight.rows; ++o) {
        const double d = delta(i, o);
        if (d == 0.0) continue;
        gb[o] += d;
        auto row = gw.row(o);
        for (std::size_t k = 0; k < xi.size(); ++k) row[k] += d * xi[k];
      }
    }
    if (l == 0) break;
    Matrix next(batch, layer.weight.cols);
    for (std::size_t i = 0; i < batch; ++i) {
      auto ni = next.row(i);
      for (std::size_t o = 0; o < layer.weight.rows; ++o) {
        const double d = delta(i, o);
        if (d == 0.0) continue;
        const auto w = layer.weight.row(o);
        for (std::size_t k = 0; k < ni.size(); ++k) ni[k] += d * w[k];
      }
    }
    delta = std::move(next);
  }
  return g;
}

/// Pointers to every trainable scalar in the canonical order used by
/// Gradients::flatten, paired with the flat gradient index.
struct Coordinate {
  double* value = nullptr;
  std::size_t flat_index = 0;
  int trunk_layer = -1;  // >= 0 when the coordinate lives in the trunk
};

inline std::vector<Coordinate> trainable_coordinates(ModelParams& p) {
  std::vector<Coordinate> out;
  std::size_t flat = 0;
  for (std::size_t l = 0; l < p.trunk.size(); ++l) {
    auto& layer = p.trunk[l];
    for (auto& w : layer.weight.values) {
      if (!p.trunk_frozen) out.push_back({&w, flat, static_cast<int>(l)});
      ++flat;
    }
    for (auto& b : layer.bias) {
      if (!p.trunk_frozen) out.push_back({&b, flat, static_cast<int>(l)});
      ++flat;
    }
  }
  for (auto& h : p.heads) {
    for (auto& w : h.weight.values) {
      if (h.trainable()) out.push_back({&w, flat, -1});
      ++flat;
    }
    for (auto& b : h.bias) {
      if (h.trainable()) out.push_back({&b, flat, -1});
      ++flat;
    }
  }
  return out;
}

struct SgdState {
  std::optional<Gradients> velocity;
};

/// Heavy-ball SGD: v = momentum * v + g; p -= lr * v. Frozen parts untouched.
inline void sgd_step(ModelParams& params, const Gradients& grads, double lr, double momentum, SgdState& state) {
  if (!state.velocity) state.velocity = Gradients::zeros_like(params);
  Gradients& v = *state.velocity;
  auto update = [&](std::vector<double>& p, std::vector<double>& vel, const std::vector<double>& g) {
    if (p.size() != g.size() || vel.size() != g.size()) throw ShapeError("sgd_step: gradient shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      vel[i] = momentum * vel[i] + g[i];
      p[i] -= lr * vel[i];
    }
  };
  if (!params.trunk_frozen) {
    for (std::size_t l = 0; l < params.trunk.size(); ++l) {
      update(params.trunk[l].weight.values, v.trunk_weight[l].values, grads.trunk_weight[l].values);
      update(params.trunk[l].bias, v.trunk_bias[l], grads.trunk_bias[l]);
    }
  }
  for (std::size_t h = 0; h < params.heads.size(); ++h) {
    if (!params.heads[h].trainable()) continue;
    update(params.heads[h].weight.values, v.head_weight[h].values, grads.head_weight[h].values);
    update(params.heads[h].bias, v.head_bias[h], grads.head_bias[h]);
  }
}

// ---------------------------------------------------------------------------
// Gradient verification

struct Batch {
  Matrix x;
  std::vector<int> labels;
  std::vector<int> envs;  // environment (task of origin) per row
};

/// Sum over trainable-kind heads of the batch-mean cross-entropy, eval mode.
inline double batch_loss(const ModelParams& params, const Batch& batch, ForwardCache* cache_out = nullptr,
                         std::vector<Matrix>* dlogits_out = nullptr) {
  ForwardCache cache = forward_with_mask(params, batch.x, Matrix{});
  double total = 0.0;
  std::vector<Matrix> dl;
  const double inv_n = 1.0 / static_cast<double>(batch.x.rows);
  for (std::size_t h = 0; h < params.heads.size(); ++h) {
    if (params.heads[h].kind == HeadKind::MeanLayer) {
      dl.emplace_back();
      continue;
    }
    Matrix d(batch.x.rows, params.heads[h].n_outputs());
    for (std::size_t i = 0; i < batch.x.rows; ++i) {
      const auto lg = softmax_ce(cache.logits[h].row(i), batch.labels[i]);
      total += lg.loss * inv_n;
      for (std::size_t c = 0; c < lg.dlogits.size(); ++c) d(i, c) = lg.dlogits[c] * inv_n;
    }
    dl.push_back(std::move(d));
  }
  if (cache_out) *cache_out = std::move(cache);
  if (dlogits_out) *dlogits_out = std::move(dl);
  return total;
}

inline Gradients batch_gradients(const ModelParams& params, const Batch& batch) {
  ForwardCache cache;
  std::vector<Matrix> dl;
  batch_loss(params, batch, &cache, &dl);
  return backward(params, cache, dl);
}

namespace detail {

inline std::vector<bool> activation_pattern(const ForwardCache& c) {
  std::vector<bool> out;
  for (const auto& pre : c.preacts)
    for (double v : pre.values) out.push_back(v > 0.0);
  return out;
}

inline bool near_kink(const ForwardCache& base, const ForwardCache& moved, double threshold) {
  for (std::size_t l = 0; l < base.preacts.size(); ++l) {
    const auto& a = base.preacts[l].values;
    const auto& b = moved.preacts[l].values;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i] != b[i] && (std::abs(a[i]) < threshold || std::abs(b[i]) < threshold)) return true;
  }
  return false;
}

}  // namespace detail

struct FiniteDiffResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

/// Compare `analytic` (flat, canonical order) to central differences on a
/// random subset of `n_coords` trainable coordinates. Coordinates whose
/// perturbation moves a preactivation lying within 10*epsilon of the ReLU
/// kink, or flips any unit, are skipped. Relative error is
/// |a - n| / max(|a|, |n|, 1e-6).
inline FiniteDiffResult compare_with_finite_differences(ModelParams params, const Batch& batch,
                                                        std::span<const double> analytic, double epsilon,
                                                        Rng& rng, std::size_t n_coords = 64) {
  if (!(epsilon > 0.0)) throw ConfigError("epsilon", "must be positive");
  auto coords = trainable_coordinates(params);
  FiniteDiffResult res;
  if (coords.empty()) return res;
  ForwardCache base;
  batch_loss(params, batch, &base);
  const auto base_pattern = detail::activation_pattern(base);
  std::vector<std::size_t> order(coords.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t idx : order) {
    if (res.checked >= n_coords) break;
    Coordinate& c = coords[idx];
    const double saved = *c.value;
    ForwardCache plus_cache, minus_cache;
    *c.value = saved + epsilon;
    const double lp = batch_loss(params, batch, &plus_cache);
    *c.value = saved - epsilon;
    const double lm = batch_loss(params, batch, &minus_cache);
    *c.value = saved;
    if (detail::activation_pattern(plus_cache) != base_pattern ||
        detail::activation_pattern(minus_cache) != base_pattern ||
        detail::near_kink(base, plus_cache, 10 * epsilon) || detail::near_kink(base, minus_cache, 10 * epsilon)) {
      ++res.skipped_kinks;
      continue;
    }
    const double numeric = (lp - lm) / (2.0 * epsilon);
    const double a = analytic[c.flat_index];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
    res.max_relative_error = std::max(res.max_relative_error, rel);
    ++res.checked;
  }
  return res;
}

/// Max relative error of backward() against central differences (dropout off).
inline FiniteDiffResult finite_diff_check(const ModelParams& params, const Batch& batch, double epsilon, Rng& rng,
                                          std::size_t n_coords = 64) {
  const auto analytic = batch_gradients(params, batch).flatten();
  return compare_with_finite_differences(params, batch, analytic, epsilon, rng, n_coords);
}

}  // namespace spurcl::nn
