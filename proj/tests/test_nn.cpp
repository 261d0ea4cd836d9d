#include <gtest/gtest.h>

#include <cmath>

#include "spurcl/nn.hpp"
#include "test_util.hpp"

using namespace spurcl;
using namespace spurcl::nn;

namespace {

Head fixed_head(HeadKind kind, std::vector<std::vector<double>> rows, std::vector<double> bias = {}) {
  Head h;
  h.kind = kind;
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < rows[i].size(); ++k) m(i, k) = rows[i][k];
  if (kind == HeadKind::MeanLayer) {
    h.class_means = m;
    h.mean_counts.assign(rows.size(), 1);
  } else {
    h.weight = m;
    h.bias = bias.empty() ? std::vector<double>(rows.size(), 0.0) : bias;
  }
  return h;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (auto& v : m.values) v = rng.normal();
  return m;
}

Batch random_batch(std::size_t n, std::size_t dim, int classes, Rng& rng) {
  Batch b;
  b.x = random_matrix(n, dim, rng);
  for (std::size_t i = 0; i < n; ++i) {
    b.labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))));
    b.envs.push_back(0);
  }
  return b;
}

ModelParams small_model(std::vector<HeadSpec> heads, double dropout, std::uint64_t seed) {
  Rng rng(seed);
  const std::vector<std::size_t> hidden = {8, 6};
  return make_model(5, hidden, heads, dropout, rng);
}

}  // namespace

// --- heads

TEST(Heads, LinearLogits) {
  const Head h = fixed_head(HeadKind::Linear, {{1, 2}, {-1, 0.5}}, {0.5, -1});
  const std::vector<double> z = {2, 3};
  const auto o = head_logits(h, z);
  EXPECT_DOUBLE_EQ(o[0], 8.5);
  EXPECT_DOUBLE_EQ(o[1], -1.5);
}

TEST(Heads, WeightNormIsProjectionOnUnitRows) {
  const Head h = fixed_head(HeadKind::WeightNorm, {{1, 0}, {0, 2}});
  const std::vector<double> z = {3, 4};
  const auto o = head_logits(h, z);
  EXPECT_DOUBLE_EQ(o[0], 3.0);
  EXPECT_DOUBLE_EQ(o[1], 4.0);
  // ||z|| cos(z, A_i) by its definition.
  EXPECT_NEAR(o[1], 5.0 * (8.0 / (5.0 * 2.0)), 1e-12);
}

TEST(Heads, WeightNormInvariantToRowScale) {
  Rng rng(3);
  Head h = fixed_head(HeadKind::WeightNorm, {{0.3, -1.2, 0.7}, {2.0, 0.1, -0.4}});
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<double> z = {rng.normal(), rng.normal(), rng.normal()};
    const auto before = head_logits(h, z);
    Head scaled = h;
    const double s0 = rng.uniform(0.1, 10.0), s1 = rng.uniform(0.1, 10.0);
    for (auto& v : scaled.weight.row(0)) v *= s0;
    for (auto& v : scaled.weight.row(1)) v *= s1;
    const auto after = head_logits(scaled, z);
    EXPECT_NEAR(before[0], after[0], 1e-12);
    EXPECT_NEAR(before[1], after[1], 1e-12);
    const std::vector<double> z2 = {2 * z[0], 2 * z[1], 2 * z[2]};
    EXPECT_NEAR(head_logits(h, z2)[0], 2 * before[0], 1e-12);
  }
}

TEST(Heads, WeightNormZeroRowIsRejected) {
  const Head h = fixed_head(HeadKind::WeightNorm, {{0, 0}, {1, 1}});
  EXPECT_THROW(check_weightnorm_rows(h), ShapeError);
}

TEST(Heads, MeanLayerNegativeDistance) {
  const Head h = fixed_head(HeadKind::MeanLayer, {{3, 4}, {1, 0}});
  const std::vector<double> z = {0, 0};
  const auto o = head_logits(h, z);
  EXPECT_DOUBLE_EQ(o[0], -5.0);
  EXPECT_DOUBLE_EQ(o[1], -1.0);
  EXPECT_EQ(argmax(o), 1u);
}

TEST(Heads, MeanLayerIncrementalFitEqualsJointFit) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t na = 1 + rng.below(20), nb = 1 + rng.below(20);
    const Matrix a = random_matrix(na, 4, rng), b = random_matrix(nb, 4, rng);
    std::vector<int> la(na), lb(nb);
    for (auto& l : la) l = static_cast<int>(rng.below(3));
    for (auto& l : lb) l = static_cast<int>(rng.below(3));
    Head inc = make_head(HeadKind::MeanLayer, 3, 4, rng), joint = inc;
    meanlayer_fit(inc, a, la);
    meanlayer_fit(inc, b, lb);
    Matrix ab(na + nb, 4);
    std::copy(a.values.begin(), a.values.end(), ab.values.begin());
    std::copy(b.values.begin(), b.values.end(), ab.values.begin() + static_cast<std::ptrdiff_t>(a.values.size()));
    std::vector<int> lab = la;
    lab.insert(lab.end(), lb.begin(), lb.end());
    meanlayer_fit(joint, ab, lab);
    EXPECT_EQ(inc.mean_counts, joint.mean_counts);
    for (std::size_t i = 0; i < inc.class_means.values.size(); ++i)
      EXPECT_NEAR(inc.class_means.values[i], joint.class_means.values[i], 1e-12);
    // Direct mean for class 0.
    std::vector<double> direct(4, 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < lab.size(); ++i)
      if (lab[i] == 0) {
        ++count;
        for (std::size_t k = 0; k < 4; ++k) direct[k] += ab(i, k);
      }
    for (std::size_t k = 0; count > 0 && k < 4; ++k) {
      EXPECT_NEAR(joint.class_means(0, k), direct[k] / count, 1e-12);
    }
  }
}

TEST(Heads, MeanLayerRequiresFittedClasses) {
  Rng rng(1);
  Head h = make_head(HeadKind::MeanLayer, 3, 2, rng);
  Matrix z(1, 2, 1.0);
  const std::vector<int> label = {1};
  meanlayer_fit(h, z, label);
  const std::vector<int> ok = {1}, missing = {0, 1};
  EXPECT_NO_THROW(meanlayer_require_fitted(h, ok));
  EXPECT_THROW(meanlayer_require_fitted(h, missing), DataError);
  const std::vector<int> bad = {3};
  EXPECT_THROW(meanlayer_fit(h, z, bad), DataError);
}

TEST(Heads, ParseKind) {
  EXPECT_EQ(parse_head_kind("linear"), HeadKind::Linear);
  EXPECT_EQ(parse_head_kind("weightnorm"), HeadKind::WeightNorm);
  EXPECT_EQ(parse_head_kind("meanlayer"), HeadKind::MeanLayer);
  EXPECT_THROW(parse_head_kind("cosine"), ConfigError);
}

// --- loss

TEST(Loss, SoftmaxCrossEntropy) {
  const std::vector<double> logits = {0.0, std::log(3.0)};
  const auto lg = softmax_ce(logits, 1);
  EXPECT_NEAR(lg.loss, std::log(4.0 / 3.0), 1e-12);
  EXPECT_NEAR(lg.dlogits[0], 0.25, 1e-12);
  EXPECT_NEAR(lg.dlogits[1], -0.25, 1e-12);
}

TEST(Loss, StableForLargeLogits) {
  const std::vector<double> logits = {1000.0, 0.0};
  const auto lg = softmax_ce(logits, 1);
  EXPECT_NEAR(lg.loss, 1000.0, 1e-9);
  EXPECT_TRUE(std::isfinite(lg.dlogits[0]));
}

TEST(Loss, MaskedMatchesSubvector) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> logits(6);
    for (auto& v : logits) v = 3 * rng.normal();
    const std::vector<int> mask = {1, 4, 5};
    const std::vector<double> sub = {logits[1], logits[4], logits[5]};
    const auto masked = masked_softmax_ce(logits, 4, mask);
    const auto plain = softmax_ce(sub, 1);
    EXPECT_NEAR(masked.loss, plain.loss, 1e-12);
    EXPECT_NEAR(masked.dlogits[4], plain.dlogits[1], 1e-12);
    for (int c : {0, 2, 3}) EXPECT_EQ(masked.dlogits[static_cast<std::size_t>(c)], 0.0);
  }
  const std::vector<double> logits = {0, 0, 0};
  const std::vector<int> mask = {0, 1};
  EXPECT_THROW(masked_softmax_ce(logits, 2, mask), DataError);
}

// --- backward

TEST(Backward, LinearHeadLeastSquaresGradient) {
  // L = 1/(2B) sum ||A z + b - t||^2 has dL/dA = (O - T)^T Z / B.
  Rng rng(12);
  const std::size_t B = 7, h = 4, N = 3;
  ModelParams p;
  p.input_size = h;
  p.heads.push_back(make_head(HeadKind::Linear, N, h, rng));
  const Matrix z = random_matrix(B, h, rng), t = random_matrix(B, N, rng);
  const auto cache = forward_with_mask(p, z, Matrix{});
  Matrix d(B, N);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t o = 0; o < N; ++o) d(i, o) = (cache.logits[0](i, o) - t(i, o)) / B;
  const std::vector<Matrix> dl = {d};
  const auto g = backward(p, cache, dl);
  for (std::size_t o = 0; o < N; ++o) {
    double gb = 0.0;
    for (std::size_t k = 0; k < h; ++k) {
      double ga = 0.0;
      for (std::size_t i = 0; i < B; ++i) {
        double out = p.heads[0].bias[o];
        for (std::size_t j = 0; j < h; ++j) out += p.heads[0].weight(o, j) * z(i, j);
        ga += (out - t(i, o)) * z(i, k) / B;
        if (k == 0) gb += (out - t(i, o)) / B;
      }
      EXPECT_NEAR(g.head_weight[0](o, k), ga, 1e-12);
    }
    EXPECT_NEAR(g.head_bias[0][o], gb, 1e-12);
  }
}

TEST(Backward, FiniteDifferencesEveryTrainableHead) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const std::vector<HeadSpec> heads = {{HeadKind::Linear, 3}, {HeadKind::WeightNorm, 3}};
    const ModelParams p = small_model(heads, 0.0, seed);
    Rng rng(seed + 100);
    const Batch b = random_batch(9, 5, 3, rng);
    const auto res = finite_diff_check(p, b, 1e-6, rng, 200);
    EXPECT_GT(res.checked, 50u);
    EXPECT_LT(res.max_relative_error, 1e-5) << seed;
  }
}

TEST(Backward, MeanLayerInputGradient) {
  // d(-||z - mu||)/dz = -(z - mu)/||z - mu||, so the trunk sees it.
  Rng rng(2);
  ModelParams p;
  p.input_size = 2;
  p.trunk.push_back(DenseLayer{Matrix(2, 2), {0.0, 0.0}});
  p.trunk[0].weight(0, 0) = 1.0;
  p.trunk[0].weight(1, 1) = 1.0;
  p.heads.push_back(fixed_head(HeadKind::MeanLayer, {{0, 0}}));
  Matrix x(1, 2);
  x(0, 0) = 3;
  x(0, 1) = 4;
  const auto cache = forward_with_mask(p, x, Matrix{});
  Matrix d(1, 1, 1.0);
  const std::vector<Matrix> dl = {d};
  const auto g = backward(p, cache, dl);
  EXPECT_NEAR(g.trunk_bias[0][0], -0.6, 1e-12);
  EXPECT_NEAR(g.trunk_bias[0][1], -0.8, 1e-12);
  EXPECT_TRUE(g.head_weight[0].empty());
}

TEST(Backward, DropoutMaskFiniteDifferences) {
  const std::vector<HeadSpec> heads = {{HeadKind::Linear, 2}};
  ModelParams p = small_model(heads, 0.5, 4);
  Rng rng(9);
  const Batch b = random_batch(6, 5, 2, rng);
  Matrix mask(6, p.latent_dim());
  for (auto& m : mask.values) m = rng.bernoulli(0.5) ? 1.0 : 0.0;
  auto loss = [&](const ModelParams& q) {
    const auto c = forward_with_mask(q, b.x, mask);
    double total = 0.0;
    for (std::size_t i = 0; i < 6; ++i) total += softmax_ce(c.logits[0].row(i), b.labels[i]).loss / 6.0;
    return total;
  };
  const auto cache = forward_with_mask(p, b.x, mask);
  Matrix d(6, 2);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto lg = softmax_ce(cache.logits[0].row(i), b.labels[i]);
    for (std::size_t c = 0; c < 2; ++c) d(i, c) = lg.dlogits[c] / 6.0;
  }
  const std::vector<Matrix> dl = {d};
  const auto analytic = backward(p, cache, dl);
  const double eps = 1e-6;
  for (std::size_t k = 0; k < p.trunk[0].weight.values.size(); k += 3) {
    double& w = p.trunk[0].weight.values[k];
    const double saved = w;
    w = saved + eps;
    const double lp = loss(p);
    w = saved - eps;
    const double lm = loss(p);
    w = saved;
    const double numeric = (lp - lm) / (2 * eps);
    EXPECT_NEAR(analytic.trunk_weight[0].values[k], numeric, 1e-6 + 1e-4 * std::abs(numeric));
  }
}

TEST(Backward, FrozenPartsGetNoGradient) {
  const std::vector<HeadSpec> heads = {{HeadKind::Linear, 2}, {HeadKind::Linear, 2}};
  ModelParams p = small_model(heads, 0.0, 6);
  p.trunk_frozen = true;
  p.heads[0].frozen = true;
  Rng rng(1);
  const Batch b = random_batch(5, 5, 2, rng);
  const auto g = batch_gradients(p, b);
  for (const auto& m : g.trunk_weight)
    for (double v : m.values) EXPECT_EQ(v, 0.0);
  for (double v : g.head_weight[0].values) EXPECT_EQ(v, 0.0);
  double norm1 = 0.0;
  for (double v : g.head_weight[1].values) norm1 += std::abs(v);
  EXPECT_GT(norm1, 0.0);

  const ModelParams before = p;
  SgdState state;
  sgd_step(p, g, 0.1, 0.9, state);
  EXPECT_EQ(p.trunk, before.trunk);
  EXPECT_EQ(p.heads[0], before.heads[0]);
  EXPECT_NE(p.heads[1], before.heads[1]);
}

TEST(Sgd, HeavyBallTwoSteps) {
  ModelParams p;
  p.input_size = 1;
  p.heads.push_back(fixed_head(HeadKind::Linear, {{1.0}}, {0.0}));
  Gradients g = Gradients::zeros_like(p);
  g.head_weight[0](0, 0) = 1.0;
  SgdState state;
  sgd_step(p, g, 0.1, 0.9, state);
  EXPECT_NEAR(p.heads[0].weight(0, 0), 0.9, 1e-12);
  sgd_step(p, g, 0.1, 0.9, state);
  EXPECT_NEAR(p.heads[0].weight(0, 0), 0.71, 1e-12);
}

// --- model

TEST(Model, ShapesAndErrors) {
  const std::vector<HeadSpec> heads = {{HeadKind::Linear, 4}};
  const ModelParams p = small_model(heads, 0.0, 1);
  EXPECT_EQ(p.latent_dim(), 6u);
  EXPECT_EQ(p.param_count(), 5u * 8 + 8 + 8 * 6 + 6 + 6 * 4 + 4);
  Rng rng(1);
  EXPECT_THROW(forward(p, Matrix(2, 4), false, rng), ShapeError);
  const std::vector<std::size_t> hidden = {4};
  EXPECT_THROW(make_model(3, hidden, heads, 1.0, rng), ConfigError);
  EXPECT_THROW(make_model(0, hidden, heads, 0.0, rng), ShapeError);
}

TEST(Model, InitIsSeeded) {
  const std::vector<HeadSpec> heads = {{HeadKind::WeightNorm, 2}};
  EXPECT_EQ(small_model(heads, 0.0, 3), small_model(heads, 0.0, 3));
  EXPECT_NE(small_model(heads, 0.0, 3), small_model(heads, 0.0, 4));
}

TEST(Model, DropoutOnlyInTrainMode) {
  const std::vector<HeadSpec> heads = {{HeadKind::Linear, 2}};
  const ModelParams p = small_model(heads, 0.5, 2);
  Rng data(3), a(1), b(2);
  const Matrix x = random_matrix(400, 5, data);
  const auto eval1 = forward(p, x, false, a);
  const auto eval2 = forward(p, x, false, b);
  EXPECT_EQ(eval1.logits[0].values, eval2.logits[0].values);
  EXPECT_EQ(eval1.latent.values, eval1.trunk_out.values);
  const auto train = forward(p, x, true, a);
  double kept = 0.0, sum_train = 0.0, sum_eval = 0.0;
  for (std::size_t i = 0; i < train.latent.values.size(); ++i) {
    kept += train.keep_scale.values[i] > 0;
    sum_train += train.latent.values[i];
    sum_eval += train.trunk_out.values[i];
  }
  EXPECT_NEAR(kept / static_cast<double>(train.latent.values.size()), 0.5, 0.05);
  EXPECT_NEAR(sum_train / sum_eval, 1.0, 0.1);
}

TEST(Model, LatentsMatchTrunkOutput) {
  const std::vector<HeadSpec> heads = {{HeadKind::Linear, 2}};
  const ModelParams p = small_model(heads, 0.0, 2);
  std::vector<Sample> samples = {spurcl::testing::make_sample({1, 2, 3, 4, 5}, 0)};
  const Matrix z = latents(p, samples);
  ASSERT_EQ(z.rows, 1u);
  ASSERT_EQ(z.cols, 6u);
  for (double v : z.values) EXPECT_GE(v, 0.0);
}
