// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stproph/error.hpp"
#include "stproph/numerics/grad_check.hpp"
#include "stproph/numerics/ops.hpp"
#include "stproph/prompt/prompt_pool.hpp"
#include "test_util.hpp"

namespace stproph::prompt {
namespace {

using num::Rng;
using num::Tape;
using num::Tensor;
using testing::random_tensor;

PromptPool make_pool(Rng& rng, std::size_t W, std::size_t d, std::size_t M, std::size_t K) {
  return PromptPool({.window = W, .d = d, .pool_size = M, .top_k = K}, rng);
}

/// Scalar loops over the definition: mean_w sum_j w_v[j] tanh((s_w W_q)[j] + (k W_k)[j]).
double score_oracle(PromptPool& pool, const Tensor& query, std::size_t m) {
  const Tensor& wq = pool.query_weight().weight().value;
  const Tensor& wk = pool.key_weight().weight().value;
  const Tensor& keys = pool.keys().value;
  const Tensor& wv = pool.score_vector().value;
  const std::size_t W = query.rows(), d = query.cols();
  double total = 0.0;
  for (std::size_t w = 0; w < W; ++w) {
    for (std::size_t j = 0; j < d; ++j) {
      double qj = 0.0, kj = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        qj += query(w, i) * wq(i, j);
        kj += keys(m, i) * wk(i, j);
      }
      total += wv[j] * std::tanh(qj + kj);
    }
  }
  return total / static_cast<double>(W);
}

std::vector<std::size_t> sort_oracle(const std::vector<double>& scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  return idx;
}

TEST(Score, ZeroProjectionsGiveZero) {
  Rng rng(1);
  PromptPool pool = make_pool(rng, 4, 6, 5, 2);
  pool.query_weight().weight().value.fill(0.0);
  pool.key_weight().weight().value.fill(0.0);
  const Tensor q = random_tensor(rng, {4, 6});
  for (std::size_t m = 0; m < 5; ++m) EXPECT_EQ(pool.score(q, m), 0.0);
}

TEST(Score, IdenticalKeysScoreIdentically) {
  Rng rng(2);
  PromptPool pool = make_pool(rng, 3, 4, 4, 2);
  for (std::size_t j = 0; j < 4; ++j) pool.keys().value(3, j) = pool.keys().value(1, j);
  for (int i = 0; i < 5; ++i) {
    const Tensor q = random_tensor(rng, {3, 4});
    EXPECT_EQ(pool.score(q, 1), pool.score(q, 3));
  }
}

TEST(Score, MatchesLoopOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    PromptPool pool = make_pool(rng, 5, 6, 7, 3);
    const Tensor q = random_tensor(rng, {5, 6});
    for (std::size_t m = 0; m < 7; ++m) EXPECT_NEAR(pool.score(q, m), score_oracle(pool, q, m), 1e-12);
  }
}

TEST(Init, KeysAreDistinct) {
  Rng rng(4);
  PromptPool pool = make_pool(rng, 4, 8, 15, 4);
  const Tensor& k = pool.keys().value;
  for (std::size_t a = 0; a < 15; ++a)
    for (std::size_t b = 0; b < a; ++b) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t j = 0; j < 8; ++j) {
        ab += k(a, j) * k(b, j);
        aa += k(a, j) * k(a, j);
        bb += k(b, j) * k(b, j);
      }
      EXPECT_LE(ab / std::sqrt(aa * bb), 0.999);
    }
}

TEST(Init, RejectsBadK) {
  Rng rng(5);
  EXPECT_THROW(make_pool(rng, 4, 8, 3, 4), ConfigError);
  EXPECT_THROW(make_pool(rng, 4, 8, 3, 0), ConfigError);
}

TEST(TopK, AllEntriesWhenKEqualsM) {
  const std::vector<double> s{0.3, -1.0, 2.0, 0.3};
  EXPECT_EQ(top_k(s, 4), (std::vector<std::size_t>{2, 0, 3, 1}));
}

TEST(TopK, TiesKeepLowerIndex) {
  const std::vector<double> s(6, 0.5);
  EXPECT_EQ(top_k(s, 3), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(TopK, OutOfRangeK) {
  const std::vector<double> s{1, 2};
  EXPECT_THROW(top_k(s, 3), ConfigError);
  EXPECT_THROW(top_k(s, 0), ConfigError);
}

TEST(Retrieve, MatchesExhaustiveScoringOnRandomPools) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t M = 2 + rng.below(31), K = 1 + rng.below(M);
    PromptPool pool = make_pool(rng, 3, 4, M, K);
    const Tensor q = random_tensor(rng, {3, 4});
    std::vector<double> all;
    for (std::size_t m = 0; m < M; ++m) all.push_back(pool.score(q, m));
    const RetrievalResult r = pool.retrieve_top_k(q);
    EXPECT_EQ(r.indices, sort_oracle(all, K)) << "trial " << trial;
    EXPECT_TRUE(std::is_sorted(r.scores.rbegin(), r.scores.rend()));
    const auto best = std::max_element(all.begin(), all.end()) - all.begin();
    EXPECT_EQ(r.indices.front(), static_cast<std::size_t>(best));
  }
}

TEST(Retrieve, ConstructedTiesBreakByIndex) {
  Rng rng(7);
  PromptPool pool = make_pool(rng, 3, 4, 6, 3);
  for (std::size_t m = 0; m < 6; ++m)
    for (std::size_t j = 0; j < 4; ++j) pool.keys().value(m, j) = 0.25;
  const RetrievalResult r = pool.retrieve_top_k(random_tensor(rng, {3, 4}));
  EXPECT_EQ(r.indices, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Retrieve, ReturnsSelectedValues) {
  Rng rng(8);
  PromptPool pool = make_pool(rng, 3, 4, 5, 2);
  const RetrievalResult r = pool.retrieve_top_k(random_tensor(rng, {3, 4}));
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t w = 0; w < 3; ++w)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(r.values[j](w, c), pool.values().value(r.indices[j] * 3 + w, c));
}

TEST(Retrieve, Deterministic) {
  Rng rng(9);
  PromptPool pool = make_pool(rng, 4, 4, 9, 3);
  const Tensor q = random_tensor(rng, {4, 4});
  EXPECT_EQ(pool.retrieve_top_k(q).indices, pool.retrieve_top_k(q).indices);
}

TEST(Assemble, ShapeIsWindowByD) {
  Rng rng(10);
  PromptPool pool = make_pool(rng, 5, 6, 4, 3);
  const Tensor q = random_tensor(rng, {5, 6});
  const Tensor out = pool.assemble(q, pool.retrieve_top_k(q));
  EXPECT_EQ(out.shape(), (num::Shape{5, 6}));
}

TEST(Assemble, LinearInOutputProjection) {
  Rng rng(11);
  PromptPool pool = make_pool(rng, 4, 3, 4, 2);
  const Tensor q = random_tensor(rng, {4, 3});
  const RetrievalResult r = pool.retrieve_top_k(q);
  const Tensor base = pool.assemble(q, r);
  for (auto& v : pool.output().weight().value.storage()) v *= 2.0;
  const Tensor doubled = pool.assemble(q, r);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(doubled[i], 2.0 * base[i]);
}

TEST(Assemble, ZeroPromptAndQueryBlockProjectionReturnsQuery) {
  Rng rng(12);
  const std::size_t d = 4, W = 3;
  PromptPool pool = make_pool(rng, W, d, 3, 1);
  Tensor wo({2 * d, d});
  for (std::size_t i = 0; i < d; ++i) wo(d + i, i) = 1.0;
  pool.output().weight().value = wo;
  const Tensor q = random_tensor(rng, {W, d});
  RetrievalResult r = pool.retrieve_top_k(q);
  r.values[0].fill(0.0);
  EXPECT_EQ(pool.assemble(q, r), q);
}

TEST(Assemble, KMismatchIsShapeError) {
  Rng rng(13);
  PromptPool pool = make_pool(rng, 3, 4, 5, 2);
  const Tensor q = random_tensor(rng, {3, 4});
  RetrievalResult r = pool.retrieve_top_k(q);
  r.values.pop_back();
  EXPECT_THROW(pool.assemble(q, r), ShapeError);
}

TEST(Assemble, ValueSensitivityEqualsOutputBlock) {
  Rng rng(14);
  const std::size_t W = 3, d = 4, K = 2;
  PromptPool pool = make_pool(rng, W, d, 5, K);
  const Tensor q = random_tensor(rng, {W, d});
  RetrievalResult r = pool.retrieve_top_k(q);
  const Tensor base = pool.assemble(q, r);
  const double delta = 0.5;
  const std::size_t slot = 1, step = 2, col = 3;
  r.values[slot](step, col) += delta;
  const Tensor moved = pool.assemble(q, r);
  const Tensor& wo = pool.output().weight().value;
  for (std::size_t w = 0; w < W; ++w)
    for (std::size_t c = 0; c < d; ++c) {
      const double expected = w == step ? delta * wo(slot * d + col, c) : 0.0;
      EXPECT_NEAR(moved(w, c) - base(w, c), expected, 1e-14);
    }
}

TEST(Forward, GateLeavesValuesUnchanged) {
  Rng rng(15);
  PromptPool pool = make_pool(rng, 3, 4, 5, 2);
  const Tensor q = random_tensor(rng, {3, 4});
  Tape tape;
  const Tensor out = tape.value(pool.forward(tape, tape.constant(q)));
  EXPECT_LT(num::max_abs_diff(out, pool.assemble(q, pool.retrieve_top_k(q))), 1e-14);
}

TEST(Forward, GradientsReachOnlySelectedPrompts) {
  Rng rng(16);
  const std::size_t W = 3, d = 4, M = 6;
  PromptPool pool = make_pool(rng, W, d, M, 2);
  num::ParameterList params;
  pool.collect(params);
  for (auto* p : params) p->zero_grad();
  const Tensor q = random_tensor(rng, {2 * W, d});
  Selection sel;
  Tape tape;
  num::Var out = pool.forward(tape, tape.constant(q), nullptr, &sel);
  tape.backward(num::sum(num::mul(out, tape.constant(random_tensor(rng, {2 * W, d})))));
  std::vector<bool> chosen(M, false);
  for (std::size_t i : sel.indices) chosen[i] = true;
  for (std::size_t m = 0; m < M; ++m) {
    double g = 0.0;
    for (std::size_t r = m * W; r < (m + 1) * W; ++r)
      for (std::size_t c = 0; c < d; ++c) g += std::abs(pool.values().grad(r, c));
    double gk = 0.0;
    for (std::size_t c = 0; c < d; ++c) gk += std::abs(pool.keys().grad(m, c));
    if (chosen[m]) {
      EXPECT_GT(g, 0.0) << m;
      EXPECT_GT(gk, 0.0) << m;
    } else {
      EXPECT_EQ(g, 0.0) << m;
      EXPECT_EQ(gk, 0.0) << m;
    }
  }
}

TEST(Forward, GradCheckWithFixedSelection) {
  Rng rng(17);
  const std::size_t W = 3, d = 4;
  PromptPool pool = make_pool(rng, W, d, 5, 2);
  num::Parameter query("query", random_tensor(rng, {2 * W, d}));
  const Tensor weights = random_tensor(rng, {2 * W, d});
  Selection sel;
  {
    Tape tape;
    pool.forward(tape, tape.constant(query.value), nullptr, &sel);
  }
  num::ParameterList params{&query};
  pool.collect(params);
  const auto r = num::grad_check(
      [&](Tape& t) { return num::sum(num::mul(pool.forward(t, t.param(query), &sel), t.constant(weights))); },
      params);
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst_param;
}

}  // namespace
}  // namespace stproph::prompt
