// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "stproph/error.hpp"
#include "stproph/lora/linear.hpp"
#include "stproph/numerics/grad_check.hpp"
#include "stproph/numerics/ops.hpp"
#include "stproph/numerics/optim.hpp"
#include "stproph/trainer/gradcheck_suite.hpp"
#include "test_util.hpp"

namespace stproph {
namespace {

using num::Parameter;
using num::Rng;
using num::Tape;
using num::Tensor;
using num::Var;
using testing::random_tensor;

TEST(Linear, HandArithmetic) {
  Rng rng(1);
  lora::Linear layer("l", 2, 1, false, rng);
  layer.weight().value = Tensor::matrix({{1}, {1}});
  Tape tape;
  Var y = layer.forward(tape, tape.constant(Tensor::matrix({{1, 2}})));
  EXPECT_EQ(tape.value(y), Tensor::matrix({{3}}));
}

TEST(Linear, IdentityWeightReturnsInput) {
  Rng rng(2);
  lora::Linear layer("l", 4, 4, false, rng);
  layer.weight().value = Tensor::identity(4);
  const Tensor x = random_tensor(rng, {3, 4});
  Tape tape;
  EXPECT_EQ(tape.value(layer.forward(tape, tape.constant(x))), x);
}

TEST(Linear, BiasBroadcastsPerRow) {
  Rng rng(3);
  lora::Linear layer("l", 2, 2, true, rng);
  layer.weight().value = Tensor::identity(2);
  layer.bias()->value = Tensor::row({10, 20});
  Tape tape;
  Var y = layer.forward(tape, tape.constant(Tensor::matrix({{1, 2}, {3, 4}})));
  EXPECT_EQ(tape.value(y), Tensor::matrix({{11, 22}, {13, 24}}));
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  Rng rng(4);
  lora::Linear layer("l", 3, 2, true, rng);
  layer.bias()->value = random_tensor(rng, {1, 2});
  Parameter x("x", random_tensor(rng, {5, 3}));
  const Tensor w = random_tensor(rng, {5, 2});
  num::ParameterList params{&x};
  layer.collect(params);
  const auto r = num::grad_check(
      [&](Tape& t) { return num::sum(num::mul(layer.forward(t, t.param(x)), t.constant(w))); }, params, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst_param;
}

TEST(Matmul, ShapeErrorReportsBothShapes) {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({4, 2}));
  try {
    num::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4x2"), std::string::npos) << msg;
  }
}

TEST(Softmax, ClosedForms) {
  const Tensor a = num::softmax_rows(Tensor::matrix({{0, 0}}));
  EXPECT_EQ(a, Tensor::matrix({{0.5, 0.5}}));
  const Tensor b = num::softmax_rows(Tensor::matrix({{0, std::log(2.0)}}));
  EXPECT_NEAR(b[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(b[1], 2.0 / 3.0, 1e-15);
  const Tensor c = num::softmax_rows(Tensor::matrix({{1000, 1000}}));
  EXPECT_EQ(c, Tensor::matrix({{0.5, 0.5}}));
}

TEST(Softmax, RowsAreDistributionsForLargeInputs) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor(rng, {4, 7}, -1e6, 1e6);
    const Tensor p = num::softmax_rows(x);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < p.cols(); ++c) {
        EXPECT_GE(p(r, c), 0.0);
        s += p(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Tape, FanOutAccumulatesBothContributions) {
  // f(x) = sum(x * x + 3x): df/dx = 2x + 3.
  Parameter x("x", Tensor::matrix({{1.5, -2.0, 0.25}}));
  Tape tape;
  Var v = tape.param(x);
  Var f = num::sum(num::add(num::mul(v, v), num::scale(v, 3.0)));
  tape.backward(f);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad[i], 2.0 * x.value[i] + 3.0);
}

TEST(Tape, ForwardIsDeterministic) {
  Rng rng(6);
  const Tensor a = random_tensor(rng, {4, 5}), b = random_tensor(rng, {5, 3});
  const auto run = [&] {
    Tape tape;
    return tape.value(num::softmax_rows(num::tanh(num::matmul(tape.constant(a), tape.constant(b)))));
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, SmoothedMaeOnLinearLayer) {
  Rng rng(7);
  lora::Linear layer("l", 3, 2, true, rng);
  const Tensor x = random_tensor(rng, {6, 3}), y = random_tensor(rng, {6, 2});
  num::ParameterList params;
  layer.collect(params);
  // softplus(r) + softplus(-r) is a smooth stand-in for |r|.
  const auto loss = [&](Tape& t) {
    Var r = num::sub(layer.forward(t, t.constant(x)), t.constant(y));
    return num::mean(num::add(num::softplus(r), num::softplus(num::scale(r, -1.0))));
  };
  EXPECT_LT(num::grad_check(loss, params).max_rel_error, 1e-6);
}

TEST(GradCheck, TanhSoftmaxChain) {
  Rng rng(8);
  Parameter a("a", random_tensor(rng, {3, 4}));
  const Tensor w = random_tensor(rng, {3, 4});
  const auto loss = [&](Tape& t) {
    return num::sum(num::mul(num::softmax_rows(num::tanh(t.param(a))), t.constant(w)));
  };
  EXPECT_LT(num::grad_check(loss, {&a}).max_rel_error, 1e-6);
}

TEST(GradCheck, RejectsEpsOutsideRange) {
  Parameter a("a", Tensor::matrix({{1.0}}));
  const auto loss = [&](Tape& t) { return num::sum(t.param(a)); };
  EXPECT_THROW(num::grad_check(loss, {&a}, 1e-2), ConfigError);
  EXPECT_THROW(num::grad_check(loss, {&a}, 1e-8), ConfigError);
}

TEST(GradCheck, NonFiniteLossThrows) {
  Parameter a("a", Tensor::matrix({{1.0}}));
  const auto loss = [&](Tape& t) { return num::scale(num::sum(t.param(a)), NAN); };
  EXPECT_THROW(num::grad_check(loss, {&a}), NumericalError);
}

TEST(GradCheck, EveryRegisteredOpOverTwentySeeds) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    for (const auto& e : trainer::check_all_ops(seed)) {
      EXPECT_LT(e.max_rel_error, 1e-6) << e.component << " seed " << seed << " param " << e.worst_param;
    }
  }
}

TEST(GradCheck, RegistryHasNoDuplicates) {
  const auto& ops = trainer::registered_ops();
  EXPECT_EQ(std::set<std::string>(ops.begin(), ops.end()).size(), ops.size());
}

TEST(GradCheck, FaultInjectionIsDetected) {
  num::set_fault_injection("tanh");
  const auto e = trainer::check_op("tanh", 1);
  num::set_fault_injection("");
  EXPECT_FALSE(e.passed());
  EXPECT_GT(e.max_rel_error, 0.1);
  EXPECT_TRUE(trainer::check_op("tanh", 1).passed());
}

TEST(Adam, FirstStepHasMagnitudeLr) {
  for (double g : {2.5, -0.01, 100.0}) {
    Parameter w("w", Tensor::matrix({{1.0}}));
    num::Adam adam({&w}, {.lr = 0.01});
    w.grad[0] = g;
    adam.step();
    const double expected = 0.01 * g / (std::abs(g) + 1e-8);
    EXPECT_NEAR(1.0 - w.value[0], expected, 1e-12);
  }
}

TEST(Adam, ConvergesOnQuadratic) {
  Parameter w("w", Tensor::matrix({{0.0}}));
  num::Adam adam({&w}, {.lr = 0.1});
  for (int i = 0; i < 500; ++i) {
    adam.zero_grad();
    Tape tape;
    Var d = num::add_scalar(tape.param(w), -3.0);
    tape.backward(num::sum(num::mul(d, d)));
    adam.step();
  }
  EXPECT_LT(std::abs(w.value[0] - 3.0), 1e-2);
}

TEST(Adam, DecoupledWeightDecayWithZeroGradient) {
  Parameter w("w", Tensor::matrix({{2.0, -4.0}}));
  num::Adam adam({&w}, {.lr = 0.01, .weight_decay = 0.1});
  double expected0 = 2.0, expected1 = -4.0;
  for (int i = 0; i < 5; ++i) {
    adam.zero_grad();
    adam.step();
    expected0 *= 1.0 - 0.01 * 0.1;
    expected1 *= 1.0 - 0.01 * 0.1;
    EXPECT_NEAR(w.value[0], expected0, 1e-15);
    EXPECT_NEAR(w.value[1], expected1, 1e-15);
  }
  EXPECT_EQ(adam.step_count(), 5u);
}

TEST(Adam, NanGradientNamesParameter) {
  Parameter w("layer.weight", Tensor::matrix({{1.0}}));
  num::Adam adam({&w}, {});
  w.grad[0] = NAN;
  try {
    adam.step();
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.weight"), std::string::npos);
  }
}

TEST(Adam, FrozenParametersAreSkipped) {
  Parameter w("w", Tensor::matrix({{1.0}}), false);
  num::Adam adam({&w}, {.lr = 0.1, .weight_decay = 0.5});
  w.grad[0] = 1.0;
  adam.step();
  EXPECT_EQ(w.value[0], 1.0);
}

TEST(Rng, SplitDependsOnlyOnSeedAndLabel) {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) a.next_u64();
  Rng ca = a.split("dropout"), cb = b.split("dropout");
  for (int i = 0; i < 10; ++i) EXPECT_EQ(ca.next_u64(), cb.next_u64());
  Rng other = b.split("init");
  EXPECT_NE(b.split("dropout").next_u64(), other.next_u64());
}

TEST(Rng, StateRestoreReproducesStream) {
  Rng a(9);
  for (int i = 0; i < 7; ++i) a.uniform();
  const std::string state = a.state();
  std::vector<double> expected;
  for (int i = 0; i < 5; ++i) expected.push_back(a.uniform());
  Rng b(0);
  b.restore(9, state);
  for (double e : expected) EXPECT_EQ(b.uniform(), e);
}

}  // namespace
}  // namespace stproph
