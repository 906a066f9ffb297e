// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "test_util.hpp"

namespace glab {
namespace {

using testing::randn;

TEST(PrimitiveOps, SoftmaxOfEqualLogitsIsUniform) {
  const Tensor p = softmax_rows(Tensor::from({1, 3}, {0.0, 0.0, 0.0}));
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(PrimitiveOps, LayerNormOfConstantRowIsZero) {
  const Tensor y = layer_norm(Tensor::from({1, 5}, {2.5, 2.5, 2.5, 2.5, 2.5}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(PrimitiveOps, LayerNormRowsAreStandardised) {
  Rng rng(3);
  const Tensor y = layer_norm(randn({4, 16}, rng, 3.0));
  for (std::size_t r = 0; r < 4; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 16; ++j) mu += y(r, j);
    mu /= 16.0;
    for (std::size_t j = 0; j < 16; ++j) var += (y(r, j) - mu) * (y(r, j) - mu);
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var / 16.0, 1.0, 1e-4);
  }
}

TEST(PrimitiveOps, SumOfSquaresGradient) {
  ParameterStore s;
  Tensor x = testing::param(s, "x", Tensor::from({2}, {1.0, 2.0}));
  sum(mul(x, x)).backward();
  EXPECT_NEAR(x.grad()[0], 2.0, 1e-12);
  EXPECT_NEAR(x.grad()[1], 4.0, 1e-12);

  // Central differences at h = 1e-5 agree with the analytic values.
  auto f = [&](double a, double b) { return a * a + b * b; };
  const double h = 1e-5;
  EXPECT_NEAR((f(1 + h, 2) - f(1 - h, 2)) / (2 * h), 2.0, 1e-8);
  EXPECT_NEAR((f(1, 2 + h) - f(1, 2 - h)) / (2 * h), 4.0, 1e-8);
}

TEST(PrimitiveOps, ShapeMismatchIsRejected) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
  EXPECT_THROW(Tensor::from({2, 2}, {1.0, 2.0}), ShapeError);
}

TEST(PrimitiveOps, CheckedModeRejectsNonFinite) {
  set_checked_mode(true);
  EXPECT_THROW(Tensor::from({1}, {std::nan("")}), ContractError);
  set_checked_mode(false);
  EXPECT_NO_THROW(Tensor::from({1}, {std::nan("")}));
}

TEST(PrimitiveOps, MatmulMatchesEigen) {
  Rng rng(5);
  const Tensor a = randn({4, 6}, rng), b = randn({6, 3}, rng);
  const Tensor c = matmul(a, b);
  Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>> ea(a.data().data(), 4, 6), eb(b.data().data(), 6, 3);
  const Eigen::MatrixXd ec = ea * eb;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(c(i, j), ec(i, j), 1e-12);
}

TEST(Attention, MaskedKeysAreIgnored) {
  Rng rng(8);
  const Tensor q = randn({3, 4}, rng), k = randn({5, 4}, rng), v = randn({5, 4}, rng);
  const Tensor y = multi_head_attention(q, k, v, 2, AttnMask::causal(0));
  // Query 0 sees key 0 only, so its readout is v[0] in every head.
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y(0, j), v(0, j), 1e-12);
}

TEST(Attention, SegmentedMatchesSeparateCalls) {
  Rng rng(9);
  const Tensor q = randn({5, 4}, rng), k = randn({5, 4}, rng), v = randn({5, 4}, rng);
  const Tensor joint = multi_head_attention(q, k, v, 2, AttnMask::segmented({0, 2, 5}, {0, 2, 5}, true));
  const Tensor a = multi_head_attention(slice_rows(q, 0, 2), slice_rows(k, 0, 2), slice_rows(v, 0, 2), 2,
                                        AttnMask::causal(0));
  const Tensor b = multi_head_attention(slice_rows(q, 2, 5), slice_rows(k, 2, 5), slice_rows(v, 2, 5), 2,
                                        AttnMask::causal(0));
  const Tensor ref = concat_rows({a, b});
  EXPECT_LT(testing::max_abs_diff(joint.data(), ref.data()), 1e-13);
}

TEST(GradCheck, FocalLossOnFixedLogits) {
  ParameterStore s;
  Tensor x = testing::param(s, "logits", Tensor::from({1, 4}, {0.3, -1.2, 2.0, -0.1}));
  const LabelVector y = testing::labels_of({1, 0, 0, 1});
  const CheckReport r = grad_check([&] { return focal_loss(x, y, 2.0); }, s);
  EXPECT_TRUE(r.passed) << r.max_rel_err;
  EXPECT_LT(r.max_rel_err, 1e-3);
}

TEST(GradCheck, ConstantFunctionHasZeroGradients) {
  ParameterStore s;
  Tensor x = testing::param(s, "x", Tensor::from({3}, {1.0, 2.0, 3.0}));
  const CheckReport r = grad_check([&] { return add_scalar(scale(sum(x), 0.0), 7.0); }, s);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.max_rel_err, 0.0);
  for (double g : x.grad_or_zeros()) EXPECT_EQ(g, 0.0);
}

TEST(GradCheck, MmdOnTwoEightSampleSets) {
  Rng rng(11);
  ParameterStore s;
  Tensor a = testing::param(s, "a", randn({8, 6}, rng));
  Tensor b = testing::param(s, "b", randn({8, 6}, rng, 0.5));
  const CheckReport r = grad_check([&] { return mmd_imq(a, b, 5.0); }, s);
  EXPECT_LT(r.max_rel_err, 1e-3);
}

TEST(GradCheck, FlagsAWrongGradient) {
  // A deliberately broken op: forward x², backward claims 3x.
  ParameterStore s;
  Tensor x = testing::param(s, "x", Tensor::from({1}, {0.7}));
  auto broken = [&] {
    std::vector<double> out{x[0] * x[0]};
    return detail::record({}, std::move(out), {x}, [](detail::Node& self) {
      if (double* g = detail::grad_of(self, 0)) *g += 3.0 * self.parents[0]->data[0] * self.grad[0];
    });
  };
  const CheckReport r = grad_check(broken, s);
  EXPECT_FALSE(r.passed);
  EXPECT_NEAR(r.max_rel_err, 1.0 / 3.0, 1e-6);
}

TEST(GradCheck, NonFiniteFunctionReportsFailure) {
  ParameterStore s;
  Tensor x = testing::param(s, "x", Tensor::from({1}, {-1.0}));
  const CheckReport r = grad_check([&] { return sum(log(x)); }, s);
  EXPECT_FALSE(r.passed);
  EXPECT_FALSE(r.failure.empty());
}

TEST(Svd, IdentityHasUnitSingularValues) {
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  const ThinSvd s = svd_thin(Tensor::from({4, 4}, eye), 4);
  for (double v : s.s.data()) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(Svd, RankOneReconstruction) {
  const std::vector<double> u{1.0, -2.0, 0.5}, v{0.3, 1.0, -1.0, 2.0};
  std::vector<double> m;
  for (double a : u)
    for (double b : v) m.push_back(a * b);
  const ThinSvd s = svd_thin(Tensor::from({3, 4}, m), 1);
  double err = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double r = s.u(i, 0) * s.s[0] * s.vt(0, j);
      err += (r - m[i * 4 + j]) * (r - m[i * 4 + j]);
    }
  EXPECT_LT(std::sqrt(err), 1e-10);
}

TEST(Svd, TruncationErrorMatchesDiscardedSpectrum) {
  Rng rng(21);
  const Tensor m = randn({50, 16}, rng);
  const ThinSvd s = svd_thin(m, 8);
  Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>> em(m.data().data(), 50, 16);
  // Oracle: eigenvalues of MᵀM from a separate symmetric solver.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(em.transpose() * em);
  Eigen::VectorXd ev = es.eigenvalues();  // ascending
  double discarded = 0.0;
  for (int i = 0; i < 8; ++i) discarded += ev(i);
  for (int i = 0; i < 8; ++i) EXPECT_NEAR(s.s[i], std::sqrt(ev(15 - i)), 1e-9);
  double err = 0.0;
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t j = 0; j < 16; ++j) {
      double r = 0.0;
      for (std::size_t c = 0; c < 8; ++c) r += s.u(i, c) * s.s[c] * s.vt(c, j);
      err += (r - m(i, j)) * (r - m(i, j));
    }
  EXPECT_NEAR(std::sqrt(err), std::sqrt(discarded), 1e-9);
}

TEST(Svd, InvalidRankIsRejected) {
  EXPECT_THROW(svd_thin(Tensor::zeros({3, 2}), 3), ContractError);
  EXPECT_THROW(svd_thin(Tensor::zeros({3, 2}), 0), ContractError);
}

TEST(Dropout, SameCounterSameMask) {
  Rng rng(2);
  const Tensor x = randn({4, 8}, rng);
  const Tensor a = dropout(x, 0.5, true, 7, 3), b = dropout(x, 0.5, true, 7, 3), c = dropout(x, 0.5, true, 7, 4);
  EXPECT_EQ(testing::max_abs_diff(a.data(), b.data()), 0.0);
  EXPECT_GT(testing::max_abs_diff(a.data(), c.data()), 0.0);
  const Tensor e = dropout(x, 0.5, false, 7, 3);
  EXPECT_EQ(testing::max_abs_diff(e.data(), x.data()), 0.0);
}

}  // namespace
}  // namespace glab
