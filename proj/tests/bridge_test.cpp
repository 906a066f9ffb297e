// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "test_util.hpp"

namespace glab {
namespace {

using testing::max_abs_diff;
using testing::randn;

BridgeConfig small_bridge() {
  BridgeConfig c;
  c.d_v = 6;
  c.d_llm = 10;
  c.head_hidden = 7;
  c.whitened_dim = 4;
  return c;
}

TEST(JepaPredictor, ZeroWeightsGiveZeroRows) {
  ParameterStore store;
  Rng rng(1);
  JepaPredictor p(small_bridge(), store, rng);
  store.assign("predictor.linear.weight", std::vector<double>(60, 0.0));
  const Tensor y = p.forward(randn({3, 6}, rng), false);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(JepaPredictor, RowsAreStandardised) {
  ParameterStore store;
  Rng rng(2);
  JepaPredictor p(small_bridge(), store, rng);
  const Tensor y = p.forward(randn({5, 6}, rng), false);
  for (std::size_t r = 0; r < 5; ++r) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < 10; ++j) mu += y(r, j);
    mu /= 10;
    for (std::size_t j = 0; j < 10; ++j) var += (y(r, j) - mu) * (y(r, j) - mu);
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var / 10, 1.0, 1e-3);
  }
}

TEST(JepaPredictor, GradientCheck) {
  ParameterStore store;
  Rng rng(3);
  JepaPredictor p(small_bridge(), store, rng);
  Tensor x = testing::param(store, "x", randn({3, 6}, rng));
  const Tensor probe = randn({3, 10}, rng);
  const CheckReport r = grad_check([&] { return sum(mul(p.forward(x, false), probe)); }, store);
  EXPECT_TRUE(r.passed) << r.failure << " " << r.max_rel_err;
}

TEST(JepaPredictor, DropoutOnlyInTraining) {
  ParameterStore store;
  Rng rng(4);
  JepaPredictor p(small_bridge(), store, rng);
  const Tensor x = randn({3, 6}, rng);
  EXPECT_EQ(max_abs_diff(p.forward(x, false).data(), p.forward(x, false).data()), 0.0);
  EXPECT_GT(max_abs_diff(p.forward(x, true, 1, 0).data(), p.forward(x, false).data()), 0.0);
}

TEST(JepaPredictor, TextInitUsesPrincipalAxes) {
  ParameterStore store;
  Rng rng(5);
  BridgeConfig cfg = small_bridge();
  JepaPredictor p(cfg, store, rng);
  const Tensor emb = randn({40, 10}, rng);
  p.init_from_text_embeddings(emb);
  // Each of the first d_v weight columns has norm init_scale and they are mutually orthogonal.
  for (std::size_t a = 0; a < cfg.d_v; ++a)
    for (std::size_t b = 0; b < cfg.d_v; ++b) {
      double dot = 0.0;
      for (std::size_t r = 0; r < cfg.d_llm; ++r) dot += p.weight()(r, a) * p.weight()(r, b);
      EXPECT_NEAR(dot, a == b ? cfg.init_scale * cfg.init_scale : 0.0, 1e-10);
    }
}

TEST(NormCalibrator, HalvesToTargetNorm) {
  ParameterStore store;
  NormCalibrator cal(1.1484, store);
  // Rows of norm 2.2968 along different axes.
  std::vector<double> v(3 * 4, 0.0);
  v[0] = 2.2968;
  v[5] = -2.2968;
  v[10] = 2.2968 * 0.6;
  v[11] = 2.2968 * 0.8;
  const Tensor pred = Tensor::from({3, 4}, v);
  EXPECT_NEAR(cal.recalibrate(pred), 0.5, 1e-12);
  EXPECT_NEAR(nn::mean_row_norm(cal.apply(pred)), 1.1484, 1e-12);
}

TEST(NormCalibrator, IdentityAtTargetAndIdempotent) {
  ParameterStore store;
  NormCalibrator cal(2.0, store);
  const Tensor pred = Tensor::from({2, 2}, {2.0, 0.0, 0.0, -2.0});
  EXPECT_NEAR(cal.recalibrate(pred), 1.0, 1e-15);
  Rng rng(6);
  const Tensor r = randn({5, 7}, rng);
  const double a1 = cal.recalibrate(r), a2 = cal.recalibrate(r);
  EXPECT_EQ(a1, a2);
  EXPECT_LT(std::abs(nn::mean_row_norm(cal.apply(r)) - 2.0), 1e-9);
}

TEST(NormCalibrator, RejectsZeroNormAndBadTarget) {
  ParameterStore store;
  NormCalibrator cal(1.0, store);
  EXPECT_THROW(cal.recalibrate(Tensor::zeros({2, 3})), ContractError);
  EXPECT_THROW(cal.set_target_norm(0.0), ContractError);
}

TEST(EmbedHead, IdenticalTokensPoolToCommonRow) {
  ParameterStore store;
  Rng rng(7);
  EmbedHead head(small_bridge(), store, rng);
  const Tensor one = randn({1, 10}, rng);
  const Tensor many = gather_rows(one, {0, 0, 0, 0, 0});
  EXPECT_LT(max_abs_diff(head.forward(many).data(), head.project_rows(one).data()), 1e-14);
}

TEST(EmbedHead, OutputWidthIsWhitenedDim) {
  ParameterStore store;
  Rng rng(8);
  EmbedHead head(small_bridge(), store, rng);
  for (std::size_t k : {1u, 3u, 9u}) {
    const Tensor z = head.forward(randn({k, 10}, rng));
    EXPECT_EQ(z.rows(), 1u);
    EXPECT_EQ(z.cols(), 4u);
  }
}

TEST(EmbedHead, GradientCheck) {
  ParameterStore store;
  Rng rng(9);
  EmbedHead head(small_bridge(), store, rng);
  Tensor x = testing::param(store, "tokens", randn({3, 10}, rng));
  const Tensor probe = randn({1, 4}, rng);
  const CheckReport r = grad_check([&] { return sum(mul(head.forward(x), probe)); }, store);
  EXPECT_TRUE(r.passed) << r.failure << " " << r.max_rel_err;
}

// Eigenvalues of the sample covariance, descending, from an independent solver.
std::vector<double> cov_spectrum(const Tensor& x) {
  const Eigen::Index m = static_cast<Eigen::Index>(x.rows()), d = static_cast<Eigen::Index>(x.cols());
  Eigen::MatrixXd a(m, d);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < d; ++j) a(i, j) = x(i, j);
  a.rowwise() -= a.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a.transpose() * a / static_cast<double>(m - 1));
  std::vector<double> ev(es.eigenvalues().data(), es.eigenvalues().data() + d);
  std::reverse(ev.begin(), ev.end());
  return ev;
}

TEST(Whitening, VarianceRetainedMatchesEigenMass) {
  Rng rng(10);
  const Tensor x = randn({3000, 16}, rng);
  const WhiteningTransform w = fit_whitening(x, 4);
  const auto ev = cov_spectrum(x);
  double kept = 0, total = 0;
  for (std::size_t i = 0; i < ev.size(); ++i) {
    total += ev[i];
    if (i < 4) kept += ev[i];
  }
  EXPECT_NEAR(w.variance_retained, kept / total, 1e-10);
  // Isotropic input: close to D/d.
  EXPECT_NEAR(w.variance_retained, 4.0 / 16.0, 0.05);
}

TEST(Whitening, SubspaceDataRetainsEverything) {
  Rng rng(11);
  const Tensor x = matmul(randn({200, 3}, rng), randn({3, 9}, rng));
  EXPECT_NEAR(fit_whitening(x, 3).variance_retained, 1.0, 1e-6);
  EXPECT_THROW(fit_whitening(x, 4), ContractError);
}

TEST(Whitening, TransformedCovarianceIsIdentity) {
  Rng rng(12);
  const Tensor base = randn({6000, 8}, rng);
  const Tensor mix = randn({8, 8}, rng);
  const Tensor x = add(matmul(base, mix), Tensor::full({1, 8}, 3.0));
  const WhiteningTransform w = fit_whitening(x, 5);
  const Tensor z = w.apply_rows(x);
  for (std::size_t a = 0; a < 5; ++a)
    for (std::size_t b = 0; b < 5; ++b) {
      double ma = 0, mb = 0, c = 0;
      for (std::size_t i = 0; i < 6000; ++i) {
        ma += z(i, a);
        mb += z(i, b);
      }
      ma /= 6000;
      mb /= 6000;
      for (std::size_t i = 0; i < 6000; ++i) c += (z(i, a) - ma) * (z(i, b) - mb);
      c /= 5999;
      if (a == b) {
        EXPECT_NEAR(c, 1.0, 0.01);
      } else {
        EXPECT_LT(std::abs(c), 1e-2);
      }
    }
}

TEST(Whitening, AxesAreOrthonormalAndMeanMapsToZero) {
  Rng rng(13);
  const Tensor x = matmul(randn({500, 6}, rng), randn({6, 6}, rng));
  const WhiteningTransform w = fit_whitening(x, 4);
  for (std::size_t a = 0; a < 4; ++a) {
    EXPECT_GT(w.scales[a], 0.0);
    for (std::size_t b = 0; b < 4; ++b) {
      double dot = 0;
      for (std::size_t j = 0; j < 6; ++j) dot += w.axes[a * 6 + j] * w.axes[b * 6 + j];
      EXPECT_NEAR(dot, a == b ? 1.0 : 0.0, 1e-6);
    }
  }
  for (double v : apply_whitening(w.mean, w)) EXPECT_EQ(v, 0.0);
}

TEST(Whitening, ApplyIsAffine) {
  Rng rng(14);
  const WhiteningTransform w = fit_whitening(randn({100, 5}, rng), 3);
  const std::vector<double> a{1, -2, 0.5, 3, 0}, b{0.2, 0.1, -1, 2, 4};
  std::vector<double> s(5);
  for (int i = 0; i < 5; ++i) s[i] = a[i] + b[i];
  const auto fa = w.apply(a), fb = w.apply(b), fs = w.apply(s), f0 = w.apply(std::vector<double>(5, 0.0));
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(fs[k] - fa[k] - fb[k] + f0[k], 0.0, 1e-12);
}

TEST(Whitening, RejectsTooFewSamples) {
  Rng rng(15);
  EXPECT_THROW(fit_whitening(randn({4, 8}, rng), 4), ContractError);
}

TEST(Anisotropy, IdenticalAndOrthonormalCorpora) {
  const Tensor same = Tensor::from({3, 2}, {1, 2, 1, 2, 1, 2});
  EXPECT_NEAR(anisotropy_report(same, {}, {}).mean_pairwise_cos, 1.0, 1e-15);
  std::vector<double> eye(25, 0.0);
  for (int i = 0; i < 5; ++i) eye[i * 6] = 1.0;
  EXPECT_EQ(anisotropy_report(Tensor::from({5, 5}, eye), {}, {}).mean_pairwise_cos, 0.0);
}

TEST(Anisotropy, GaussianCorpusIsNearZero) {
  Rng rng(16);
  EXPECT_NEAR(anisotropy_report(randn({2000, 256}, rng), {}, {}).mean_pairwise_cos, 0.0, 0.01);
}

TEST(Anisotropy, DPrimeSeparatesPairsAndDegenerateIsInfinite) {
  const Tensor e = Tensor::from({4, 2}, {1, 0, 1, 0.1, 0, 1, 0.1, 1});
  const auto r = anisotropy_report(e, {{0, 1}, {2, 3}}, {{0, 2}, {1, 3}});
  EXPECT_GT(r.d_prime, 5.0);
  const Tensor f = Tensor::from({4, 2}, {1, 0, 1, 0, 0, 1, 0, 1});
  EXPECT_TRUE(std::isinf(anisotropy_report(f, {{0, 1}, {2, 3}}, {{0, 2}, {1, 3}}).d_prime));
}

}  // namespace
}  // namespace glab
