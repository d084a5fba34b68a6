// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "stproph/error.hpp"
#include "stproph/lora/adapter.hpp"
#include "stproph/lora/linear.hpp"
#include "stproph/lora/memory_report.hpp"
#include "stproph/lora/quantize.hpp"
#include "stproph/numerics/grad_check.hpp"
#include "stproph/numerics/ops.hpp"
#include "test_util.hpp"

namespace stproph::lora {
namespace {

using num::Rng;
using num::Tape;
using num::Tensor;
using testing::random_tensor;

AdapterLinear random_adapter(Rng& rng, std::size_t d, std::size_t r, double alpha) {
  AdapterLinear a = AdapterLinear::init(random_tensor(rng, {d, d}), r, rng, alpha);
  a.up().value = random_tensor(rng, {r / 2, d});
  return a;
}

TEST(AdapterInit, ZeroUpFactorGivesBaseForwardExactly) {
  Rng rng(1);
  const Tensor w0 = random_tensor(rng, {8, 8});
  AdapterLinear a = AdapterLinear::init(w0, 4, rng);
  for (int i = 0; i < 20; ++i) {
    const Tensor x = random_tensor(rng, {3, 8}, -5.0, 5.0);
    EXPECT_EQ(a.forward(x), num::matmul(x, w0));
  }
  EXPECT_EQ(a.delta(), Tensor({8, 8}));
  EXPECT_DOUBLE_EQ(a.alpha(), 0.25);
}

TEST(AdapterInit, SameSeedGivesIdenticalFactors) {
  Rng r1(5), r2(5);
  const Tensor w0 = Tensor::identity(8);
  AdapterLinear a = AdapterLinear::init(w0, 4, r1), b = AdapterLinear::init(w0, 4, r2);
  EXPECT_EQ(a.down().value, b.down().value);
  EXPECT_EQ(a.down2().value, b.down2().value);
}

TEST(AdapterInit, FactorScaleMatchesInverseFanIn) {
  Rng rng(2);
  AdapterLinear a = AdapterLinear::init(Tensor({256, 64}), 32, rng);
  double ss = 0.0;
  for (double v : a.down().value.storage()) ss += v * v;
  // Var ~ 1/d_in with d_in = 256.
  EXPECT_NEAR(ss / static_cast<double>(a.down().value.size()), 1.0 / 256.0, 0.2 / 256.0);
}

TEST(AdapterInit, RejectsBadRank) {
  Rng rng(3);
  EXPECT_THROW(AdapterLinear::init(Tensor({8, 8}), 3, rng), ConfigError);
  EXPECT_THROW(AdapterLinear::init(Tensor({8, 8}), 8, rng), ConfigError);
  EXPECT_THROW(AdapterLinear::init(Tensor({8, 8}), 0, rng), ConfigError);
  EXPECT_THROW(AdapterLinear::init(Tensor({8, 4}), 4, rng), ConfigError);
}

TEST(AdapterForward, HandExample) {
  AdapterLinear a(Tensor::identity(2), Tensor::identity(2), Tensor::matrix({{1}, {0}}), Tensor::matrix({{1, 0}}),
                  0.5);
  EXPECT_EQ(a.forward(Tensor::matrix({{1, 1}})), Tensor::matrix({{1.5, 1.0}}));
}

TEST(AdapterForward, MatchesDenseOracle) {
  Rng rng(4);
  AdapterLinear a = random_adapter(rng, 8, 4, 0.7);
  const Tensor b = a.down().value, d = a.down2().value, c = a.up().value;
  Tensor w = a.base().value;
  const Tensor bdc = num::matmul(num::matmul(b, d), c);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += 0.7 * bdc[i];
  for (int i = 0; i < 10; ++i) {
    const Tensor x = random_tensor(rng, {5, 8});
    EXPECT_LT(num::max_abs_diff(a.forward(x), num::matmul(x, w)), 1e-10);
  }
}

TEST(AdapterForward, StoresOnlyTheNarrowActivation) {
  Rng rng(5);
  AdapterLinear a = random_adapter(rng, 8, 4, 0.25);
  Tape tape;
  a.forward(tape, tape.constant(random_tensor(rng, {6, 8})));
  EXPECT_EQ(tape.stored_activation_elems(), 6u * 2u);
}

TEST(AdapterForward, RejectsWidthMismatch) {
  Rng rng(6);
  AdapterLinear a = random_adapter(rng, 8, 4, 0.25);
  EXPECT_THROW(a.forward(Tensor({2, 7})), ShapeError);
}

TEST(AdapterGradient, OnlyUpFactorReceivesGradient) {
  Rng rng(7);
  AdapterLinear a = random_adapter(rng, 8, 4, 0.5);
  num::ParameterList params;
  a.collect(params);
  for (auto* p : params) p->zero_grad();
  const Tensor x = random_tensor(rng, {4, 8}), w = random_tensor(rng, {4, 8});
  Tape tape;
  tape.backward(num::sum(num::mul(a.forward(tape, tape.constant(x)), tape.constant(w))));
  EXPECT_EQ(num::max_abs(a.base().grad), 0.0);
  EXPECT_EQ(num::max_abs(a.down().grad), 0.0);
  EXPECT_EQ(num::max_abs(a.down2().grad), 0.0);
  EXPECT_GT(num::max_abs(a.up().grad), 0.0);
  EXPECT_FALSE(a.base().trainable);
  EXPECT_FALSE(a.down().trainable);
  EXPECT_FALSE(a.down2().trainable);
  EXPECT_TRUE(a.up().trainable);

  const auto r = num::grad_check(
      [&](Tape& t) { return num::sum(num::mul(a.forward(t, t.constant(x)), t.constant(w))); }, {&a.up()});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Merge, ZeroUpFactorMergesToBase) {
  Rng rng(8);
  const Tensor w0 = random_tensor(rng, {8, 8});
  AdapterLinear a = AdapterLinear::init(w0, 4, rng);
  EXPECT_EQ(a.merge(), w0);
}

TEST(Merge, MergedForwardMatchesAdapterForward) {
  Rng rng(9);
  AdapterLinear a = random_adapter(rng, 16, 8, 0.3);
  const Tensor merged = a.merge();
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Tensor x = random_tensor(rng, {1, 16});
    worst = std::max(worst, num::max_abs_diff(num::matmul(x, merged), a.forward(x)));
  }
  EXPECT_LT(worst, 1e-6);
  EXPECT_LT(num::max_abs_diff(a.unmerge(merged), a.base().value), 1e-10);
}

TEST(Merge, LinearMergeKeepsBehaviour) {
  Rng rng(10);
  Linear layer("l", 8, 8, true, rng);
  layer.attach_adapter(4, rng, 0.5);
  layer.adapter().up().value = random_tensor(rng, {2, 8});
  const Tensor x = random_tensor(rng, {3, 8});
  Tape t1;
  const Tensor before = t1.value(layer.forward(t1, t1.constant(x)));
  layer.merge_adapter();
  EXPECT_FALSE(layer.adapted());
  Tape t2;
  EXPECT_LT(num::max_abs_diff(t2.value(layer.forward(t2, t2.constant(x))), before), 1e-12);
}

TEST(MemoryReport, LargeWidthAccounting) {
  const MemoryReport r = memory_report(4096, 16, 1, 1);
  EXPECT_EQ(r.amr.trainable_params, 32768u);
  EXPECT_EQ(r.full.trainable_params, 16777216u);
  EXPECT_EQ(r.lora.trainable_params, 131072u);
  EXPECT_DOUBLE_EQ(r.full_over_amr, 512.0);
  EXPECT_DOUBLE_EQ(r.full_over_lora, 128.0);
  EXPECT_DOUBLE_EQ(r.activation_ratio, 512.0);
}

TEST(MemoryReport, SmallAccounting) {
  const MemoryReport r = memory_report(8, 4, 2, 3);
  EXPECT_EQ(r.amr.trainable_params, 16u);
  EXPECT_EQ(r.lora.trainable_params, 64u);
  EXPECT_EQ(r.amr.stored_activation_elems, 12u);
  EXPECT_EQ(r.lora.stored_activation_elems, 48u);
}

TEST(MemoryReport, MatchesAdapterCounts) {
  Rng rng(11);
  AdapterLinear a = AdapterLinear::init(Tensor({32, 32}), 8, rng);
  const MemoryReport r = memory_report(32, 8, 1, 5);
  EXPECT_EQ(a.trainable_count(), r.amr.trainable_params);
  EXPECT_EQ(a.frozen_count(), r.amr.frozen_params);
  Tape tape;
  a.forward(tape, tape.constant(Tensor({5, 32})));
  EXPECT_EQ(tape.stored_activation_elems(), r.amr.stored_activation_elems);
}

TEST(MemoryReport, RejectsOddRank) {
  EXPECT_THROW(memory_report(8, 3, 1, 1), ConfigError);
  EXPECT_THROW(memory_report(8, 8, 1, 1), ConfigError);
}

TEST(Quantize, ConstantChannelIsExact) {
  Tensor w({4, 2});
  for (std::size_t r = 0; r < 4; ++r) {
    w(r, 0) = 0.3;
    w(r, 1) = -7.25;
  }
  EXPECT_EQ(dequantize(quantize(w)), w);
}

TEST(Quantize, ChannelEndpointsAreExact) {
  Rng rng(12);
  const Tensor w = random_tensor(rng, {9, 5}, -3.0, 3.0);
  const Tensor back = dequantize(quantize(w));
  for (std::size_t c = 0; c < w.cols(); ++c) {
    double lo = INFINITY, hi = -INFINITY;
    std::size_t ilo = 0, ihi = 0;
    for (std::size_t r = 0; r < w.rows(); ++r) {
      if (w(r, c) < lo) lo = w(r, c), ilo = r;
      if (w(r, c) > hi) hi = w(r, c), ihi = r;
    }
    EXPECT_EQ(back(ilo, c), lo);
    EXPECT_EQ(back(ihi, c), hi);
  }
}

TEST(Quantize, ErrorWithinHalfStep) {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor w = random_tensor(rng, {7, 6}, -2.0, 2.0);
    const QuantizedTensor q = quantize(w);
    const Tensor back = dequantize(q);
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (std::size_t c = 0; c < w.cols(); ++c) {
        const double oracle_scale = (q.hi[c] - q.lo[c]) / 15.0;
        EXPECT_LE(std::abs(back(r, c) - w(r, c)), oracle_scale / 2.0 * (1 + 1e-12));
        EXPECT_LT(q.code(r * w.cols() + c), 16u);
      }
  }
}

TEST(Quantize, PacksTwoCodesPerByte) {
  const Tensor w = Tensor::matrix({{0.0, 1.0}, {1.0, 0.0}, {0.5, 0.25}});
  const QuantizedTensor q = quantize(w);
  EXPECT_EQ(q.packed.size(), 3u);
  EXPECT_EQ(q.code(0), 0u);
  EXPECT_EQ(q.code(1), 15u);
  EXPECT_EQ(q.packed[0], 0xF0);
}

TEST(Quantize, OtherWidths) {
  Rng rng(14);
  const Tensor w = random_tensor(rng, {10, 3});
  for (int bits : {2, 8}) {
    const QuantizedTensor q = quantize(w, bits);
    const Tensor back = dequantize(q);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const std::size_t c = i % w.cols();
      EXPECT_LE(std::abs(back[i] - w[i]), q.scale[c] / 2.0 * (1 + 1e-12));
    }
  }
  EXPECT_THROW(quantize(w, 3), ConfigError);
}

TEST(Quantize, QuantizedBaseOnlyTouchesFrozenWeight) {
  Rng rng(15);
  AdapterLinear a = random_adapter(rng, 8, 4, 0.5);
  const Tensor c = a.up().value;
  a.quantize_base();
  ASSERT_TRUE(a.quantized_base().has_value());
  EXPECT_EQ(a.up().value, c);
  const Tensor x = random_tensor(rng, {2, 8});
  Tensor w = a.effective_base();
  const Tensor bdc = a.delta();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += bdc[i];
  EXPECT_LT(num::max_abs_diff(a.forward(x), num::matmul(x, w)), 1e-10);
}

}  // namespace
}  // namespace stproph::lora
