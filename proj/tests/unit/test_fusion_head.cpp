// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "stproph/error.hpp"
#include "stproph/fusion/fusion_head.hpp"
#include "stproph/numerics/grad_check.hpp"
#include "stproph/numerics/ops.hpp"
#include "test_util.hpp"

namespace stproph::fusion {
namespace {

using num::Rng;
using num::Tape;
using num::Tensor;
using testing::random_tensor;

/// Multi-head cross attention per sensor window, written with explicit loops.
Tensor fuse_oracle(FusionBlock& f, const Tensor& text, const Tensor& series, std::size_t window) {
  const std::size_t rows = series.rows(), d = f.d(), H = f.heads(), hw = d / H;
  const Tensor kv_in = f.has_projection() ? num::matmul(text, f.projection().weight().value) : text;
  const Tensor q = num::matmul(series, f.query().weight().value);
  const Tensor k = num::matmul(kv_in, f.key().weight().value);
  const Tensor v = num::matmul(kv_in, f.value().weight().value);
  Tensor cat({rows, d});
  const double scale = 1.0 / std::sqrt(static_cast<double>(hw));
  for (std::size_t base = 0; base < rows; base += window)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < window; ++i) {
        std::vector<double> p(window);
        double z = 0.0, mx = -INFINITY;
        for (std::size_t j = 0; j < window; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < hw; ++c) s += q(base + i, h * hw + c) * k(base + j, h * hw + c);
          p[j] = s * scale;
          mx = std::max(mx, p[j]);
        }
        for (double& x : p) z += (x = std::exp(x - mx));
        for (std::size_t j = 0; j < window; ++j)
          for (std::size_t c = 0; c < hw; ++c) cat(base + i, h * hw + c) += p[j] / z * v(base + j, h * hw + c);
      }
  return num::add(num::matmul(cat, f.output().weight().value), series);
}

TEST(Fuse, ZeroTextAndValuesReturnSeries) {
  Rng rng(1);
  FusionBlock f("fuse", 8, 8, 2, rng);
  f.value().weight().value.fill(0.0);
  const Tensor series = random_tensor(rng, {12, 8});
  EXPECT_EQ(f.fuse(Tensor({12, 8}), series, 4), series);
}

TEST(Fuse, SingleStepUsesValuePath) {
  Rng rng(2);
  FusionBlock f("fuse", 4, 4, 1, rng);
  const Tensor text = random_tensor(rng, {3, 4}), series = random_tensor(rng, {3, 4});
  const Tensor value_path =
      num::matmul(num::matmul(text, f.value().weight().value), f.output().weight().value);
  EXPECT_LT(num::max_abs_diff(f.fuse(text, series, 1), num::add(value_path, series)), 1e-12);
}

TEST(Fuse, MatchesMultiHeadOracle) {
  Rng rng(3);
  for (auto [dt, H] : {std::pair{8, 2}, std::pair{5, 4}, std::pair{8, 1}}) {
    FusionBlock f("fuse", 8, dt, H, rng);
    EXPECT_EQ(f.has_projection(), dt != 8);
    const Tensor text = random_tensor(rng, {15, static_cast<std::size_t>(dt)});
    const Tensor series = random_tensor(rng, {15, 8});
    EXPECT_LT(num::max_abs_diff(f.fuse(text, series, 5), fuse_oracle(f, text, series, 5)), 1e-10);
  }
}

TEST(Fuse, SensorPermutationEquivariance) {
  Rng rng(4);
  const std::size_t N = 3, W = 4, d = 4;
  FusionBlock f("fuse", d, 6, 2, rng);
  const Tensor text = random_tensor(rng, {N * W, 6}), series = random_tensor(rng, {N * W, d});
  const std::vector<std::size_t> perm{2, 0, 1};
  const auto permute = [&](const Tensor& t) {
    Tensor p(t.shape());
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t w = 0; w < W; ++w)
        for (std::size_t c = 0; c < t.cols(); ++c) p(n * W + w, c) = t(perm[n] * W + w, c);
    return p;
  };
  EXPECT_EQ(f.fuse(permute(text), permute(series), W), permute(f.fuse(text, series, W)));
}

TEST(Fuse, HeadsMustDivideD) {
  Rng rng(5);
  EXPECT_THROW(FusionBlock("fuse", 6, 6, 4, rng), ConfigError);
}

TEST(Fuse, ParameterCountWithProjection) {
  Rng rng(6);
  FusionBlock f("fuse", 8, 5, 2, rng);
  EXPECT_EQ(f.parameter_count(), 5u * 8 + 4u * 64);
}

TEST(ConcatFusion, ParameterCount) {
  Rng rng(7);
  ConcatFusion c("cat", 8, 8, rng);
  EXPECT_EQ(c.parameter_count(), 2u * 8 * 8 + 8);
}

TEST(PointHead, ZeroWeightsGiveZero) {
  Rng rng(8);
  PointHead head("head", 4, 3, 12, rng);
  head.linear().weight().value.fill(0.0);
  Tape tape;
  const Tensor mu = tape.value(head.forward(tape, tape.constant(random_tensor(rng, {12, 3}))));
  EXPECT_EQ(mu.shape(), (num::Shape{3, 12}));
  EXPECT_EQ(num::max_abs(mu), 0.0);
}

TEST(PointHead, SharedAcrossSensors) {
  Rng rng(9);
  PointHead head("head", 2, 3, 4, rng);
  const Tensor block = random_tensor(rng, {2, 3});
  Tensor stacked({6, 3});
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 3; ++c) stacked(r, c) = block(r % 2, c);
  Tape tape;
  const Tensor mu = tape.value(head.forward(tape, tape.constant(stacked)));
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(mu(0, j), mu(1, j));
    EXPECT_EQ(mu(1, j), mu(2, j));
  }
}

TEST(PointHead, GradCheckToInput) {
  Rng rng(10);
  PointHead head("head", 3, 4, 5, rng);
  num::Parameter fused("fused", random_tensor(rng, {6, 4}));
  const Tensor w = random_tensor(rng, {2, 5});
  const auto r = num::grad_check(
      [&](Tape& t) { return num::sum(num::mul(head.forward(t, t.param(fused)), t.constant(w))); }, {&fused});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GaussianHead, FloorAtVeryNegativeLogit) {
  Rng rng(11);
  GaussianHead head("g", 2, 2, 3, rng);
  head.variance().linear().weight().value.fill(0.0);
  head.variance().linear().bias()->value.fill(-1000.0);
  Tape tape;
  const GaussianOutput out = head.forward(tape, tape.constant(random_tensor(rng, {4, 2})));
  for (double v : tape.value(out.sigma2).storage()) EXPECT_EQ(v, kSigma2Floor);
}

TEST(GaussianHead, ZeroLogitGivesLogTwoPlusFloor) {
  Rng rng(12);
  GaussianHead head("g", 2, 2, 3, rng);
  head.variance().linear().weight().value.fill(0.0);
  Tape tape;
  const GaussianOutput out = head.forward(tape, tape.constant(random_tensor(rng, {4, 2})));
  for (double v : tape.value(out.sigma2).storage()) EXPECT_DOUBLE_EQ(v, std::numbers::ln2 + 1e-6);
}

TEST(GaussianHead, VarianceStrictlyPositive) {
  Rng rng(13);
  GaussianHead head("g", 2, 5, 10, rng);
  for (auto& v : head.variance().linear().weight().value.storage()) v *= 40.0;
  std::size_t checked = 0;
  for (int batch = 0; batch < 100; ++batch) {
    Tape tape;
    const GaussianOutput out = head.forward(tape, tape.constant(random_tensor(rng, {200, 5}, -50, 50)));
    for (double v : tape.value(out.sigma2).storage()) {
      ASSERT_GE(v, kSigma2Floor);
      ++checked;
    }
  }
  EXPECT_EQ(checked, 100000u);
}

TEST(GaussianHead, RejectsNonPositiveFloor) {
  Rng rng(14);
  EXPECT_THROW(GaussianHead("g", 2, 2, 3, rng, 0.0), ConfigError);
}

TEST(MaeLoss, ClosedForms) {
  EXPECT_DOUBLE_EQ(mae(Tensor::matrix({{2, 4}}), Tensor::matrix({{1, 5}})), 1.0);
  Rng rng(15);
  const Tensor y = random_tensor(rng, {3, 4});
  EXPECT_EQ(mae(y, y), 0.0);
}

TEST(MaeLoss, GradientIsSignOverCount) {
  Rng rng(16);
  const Tensor y = random_tensor(rng, {3, 4});
  num::Parameter mu("mu", random_tensor(rng, {3, 4}));
  mu.value(1, 1) = y(1, 1);
  Tape tape;
  tape.backward(mae_loss(tape.param(mu), y));
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = mu.value[i] - y[i];
    EXPECT_DOUBLE_EQ(mu.grad[i], static_cast<double>((r > 0) - (r < 0)) / 12.0);
  }
}

TEST(MaeLoss, MaskedEntriesAreIgnored) {
  Tape tape;
  const Tensor mask = Tensor::matrix({{1, 0}});
  EXPECT_DOUBLE_EQ(tape.value(mae_loss(tape.constant(Tensor::matrix({{2, 100}})), Tensor::matrix({{1, 5}}), mask))[0],
                   1.0);
}

TEST(MaeLoss, ShapeMismatch) {
  EXPECT_THROW(mae(Tensor({2, 2}), Tensor({2, 3})), ShapeError);
}

TEST(GaussianNll, ClosedForms) {
  const Tensor y = Tensor::matrix({{0.5, -1.0, 2.0}});
  EXPECT_DOUBLE_EQ(gaussian_nll(y, Tensor({1, 3}, 1.0), y), 0.0);
  const double e2 = std::exp(2.0);
  EXPECT_NEAR(gaussian_nll(y, Tensor({1, 3}, e2), y), 3.0, 1e-15);
  Tensor mu = y;
  for (auto& v : mu.storage()) v -= 2.0;
  EXPECT_DOUBLE_EQ(gaussian_nll(mu, Tensor({1, 3}, 1.0), y), 6.0);
}

TEST(GaussianNll, NonPositiveVarianceIsError) {
  EXPECT_THROW(gaussian_nll(Tensor({1, 2}), Tensor::matrix({{1.0, 0.0}}), Tensor({1, 2})), NumericalError);
}

TEST(GaussianNll, MinimizedAtSquaredResidual) {
  for (double r : {0.3, 1.0, 1.7, 4.2}) {
    const Tensor y = Tensor::matrix({{r}});
    const auto f = [&](double s) { return gaussian_nll(Tensor({1, 1}), Tensor::matrix({{s}}), y); };
    // Golden-section search on [1e-3, 100].
    double a = 1e-3, b = 100.0;
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    double c = b - g * (b - a), d = a + g * (b - a);
    while (b - a > 1e-11) {
      if (f(c) < f(d)) {
        b = d;
      } else {
        a = c;
      }
      c = b - g * (b - a);
      d = a + g * (b - a);
    }
    EXPECT_NEAR((a + b) / 2.0, r * r, 1e-6) << r;
  }
}

TEST(GaussianNll, UnitVarianceGradientIsHalfSquaredErrorGradient) {
  Rng rng(17);
  const Tensor y = random_tensor(rng, {2, 3});
  num::Parameter mu("mu", random_tensor(rng, {2, 3}));
  Tape tape;
  tape.backward(gaussian_nll(tape.param(mu), tape.constant(Tensor({2, 3}, 1.0)), y));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(mu.grad[i], 0.5 * 2.0 * (mu.value[i] - y[i]), 1e-15);
}

}  // namespace
}  // namespace stproph::fusion
