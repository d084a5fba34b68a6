// SPDX-License-Identifier: Apache-2.0
#include "stproph/prompt/prompt_pool.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stproph/error.hpp"
#include "stproph/numerics/ops.hpp"

namespace stproph::prompt {

num::Var additive_score(num::Var query_proj, num::Var key_proj, num::Var wv, std::size_t seg_len) {
  num::Tape& t = *query_proj.tape;
  const num::Tensor& q = t.value(query_proj);
  const num::Tensor& k = t.value(key_proj);
  const num::Tensor& w = t.value(wv);
  num::require_rank2(q, "additive_score");
  num::require_rank2(k, "additive_score");
  const std::size_t d = q.cols();
  if (k.cols() != d || w.size() != d || seg_len == 0 || q.rows() % seg_len != 0) {
    throw ShapeError("additive_score: query " + num::shape_string(q.shape()) + ", keys " +
                     num::shape_string(k.shape()) + ", w_v " + num::shape_string(w.shape()) + ", window " +
                     std::to_string(seg_len));
  }
  const std::size_t S = q.rows() / seg_len, M = k.rows();
  const double inv_l = 1.0 / static_cast<double>(seg_len);
  num::Tensor out({S, M});
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t m = 0; m < M; ++m) {
      const double* kr = k.row_ptr(m);
      double acc = 0.0;
      for (std::size_t l = 0; l < seg_len; ++l) {
        const double* qr = q.row_ptr(s * seg_len + l);
        for (std::size_t j = 0; j < d; ++j) acc += w[j] * std::tanh(qr[j] + kr[j]);
      }
      out(s, m) = acc * inv_l;
    }
  }
  const bool rg = t.requires_grad(query_proj) || t.requires_grad(key_proj) || t.requires_grad(wv);
  return t.record(std::move(out), "additive_score", rg,
                  [&t, query_proj, key_proj, wv, seg_len, S, M, d, inv_l](const num::Tensor& g) {
                    const num::Tensor& q = t.value(query_proj);
                    const num::Tensor& k = t.value(key_proj);
                    const num::Tensor& w = t.value(wv);
                    num::Tensor dq(q.shape()), dk(k.shape()), dw(w.shape());
                    for (std::size_t s = 0; s < S; ++s) {
                      for (std::size_t m = 0; m < M; ++m) {
                        const double c = g(s, m) * inv_l;
                        if (c == 0.0) continue;
                        const double* kr = k.row_ptr(m);
                        double* dkr = dk.row_ptr(m);
                        for (std::size_t l = 0; l < seg_len; ++l) {
                          const double* qr = q.row_ptr(s * seg_len + l);
                          double* dqr = dq.row_ptr(s * seg_len + l);
                          for (std::size_t j = 0; j < d; ++j) {
                            const double th = std::tanh(qr[j] + kr[j]);
                            dw[j] += c * th;
                            const double dz = c * w[j] * (1.0 - th * th);
                            dqr[j] += dz;
                            dkr[j] += dz;
                          }
                        }
                      }
                    }
                    t.accumulate(query_proj, dq, "additive_score");
                    t.accumulate(key_proj, dk, "additive_score");
                    t.accumulate(wv, dw, "additive_score");
                  });
}

num::Var prompt_concat(num::Var values, num::Var gates, num::Var query, const std::vector<std::size_t>& indices,
                       std::size_t k, std::size_t seg_len) {
  num::Tape& t = *query.tape;
  const num::Tensor& v = t.value(values);
  const num::Tensor& g = t.value(gates);
  const num::Tensor& q = t.value(query);
  num::require_rank2(v, "prompt_concat");
  num::require_rank2(q, "prompt_concat");
  const std::size_t d = q.cols();
  if (seg_len == 0 || q.rows() % seg_len != 0 || v.cols() != d || v.rows() % seg_len != 0) {
    throw ShapeError("prompt_concat: values " + num::shape_string(v.shape()) + " and query " +
                     num::shape_string(q.shape()) + " disagree for window " + std::to_string(seg_len));
  }
  const std::size_t S = q.rows() / seg_len, M = v.rows() / seg_len;
  if (g.rows() != S || g.cols() != k || indices.size() != S * k) {
    throw ShapeError("prompt_concat: selection of " + std::to_string(k) + " prompts does not match gates " +
                     num::shape_string(g.shape()));
  }
  for (std::size_t idx : indices)
    if (idx >= M) throw ShapeError("prompt_concat: prompt index out of range");

  const std::size_t width = (k + 1) * d;
  num::Tensor out({q.rows(), width});
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t l = 0; l < seg_len; ++l) {
      double* orow = out.row_ptr(s * seg_len + l);
      for (std::size_t j = 0; j < k; ++j) {
        const double gate = g(s, j);
        const double* vr = v.row_ptr(indices[s * k + j] * seg_len + l);
        for (std::size_t c = 0; c < d; ++c) orow[j * d + c] = gate * vr[c];
      }
      const double* qr = q.row_ptr(s * seg_len + l);
      std::copy(qr, qr + d, orow + k * d);
    }
  }
  const bool rg = t.requires_grad(values) || t.requires_grad(gates) || t.requires_grad(query);
  return t.record(std::move(out), "prompt_concat", rg,
                  [&t, values, gates, query, indices, k, seg_len, S, d](const num::Tensor& go) {
                    const num::Tensor& v = t.value(values);
                    const num::Tensor& g = t.value(gates);
                    num::Tensor dv(v.shape()), dg(g.shape()), dq(t.value(query).shape());
                    for (std::size_t s = 0; s < S; ++s) {
                      for (std::size_t l = 0; l < seg_len; ++l) {
                        const double* grow = go.row_ptr(s * seg_len + l);
                        for (std::size_t j = 0; j < k; ++j) {
                          const std::size_t vrow = indices[s * k + j] * seg_len + l;
                          const double* vr = v.row_ptr(vrow);
                          double* dvr = dv.row_ptr(vrow);
                          const double gate = g(s, j);
                          double acc = 0.0;
                          for (std::size_t c = 0; c < d; ++c) {
                            dvr[c] += gate * grow[j * d + c];
                            acc += vr[c] * grow[j * d + c];
                          }
                          dg(s, j) += acc;
                        }
                        std::copy(grow + k * d, grow + (k + 1) * d, dq.row_ptr(s * seg_len + l));
                      }
                    }
                    t.accumulate(values, dv, "prompt_concat");
                    t.accumulate(gates, dg, "prompt_concat");
                    t.accumulate(query, dq, "prompt_concat");
                  });
}

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
  if (k == 0 || k > scores.size()) {
    throw ConfigError("top-K retrieval needs 1 <= K <= M, got K=" + std::to_string(k) +
                      " M=" + std::to_string(scores.size()));
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  order.resize(k);
  return order;
}

namespace {

double cosine(const double* a, const double* b, std::size_t n) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

PromptPool::PromptPool(const PromptPoolConfig& config, num::Rng& rng) : config_(config) {
  const std::size_t d = config.d, W = config.window, M = config.pool_size, K = config.top_k;
  if (d == 0 || W == 0 || M == 0) throw ConfigError("prompt pool: sizes must be positive");
  if (K == 0 || K > M) {
    throw ConfigError("prompt pool: K must satisfy 1 <= K <= M, got K=" + std::to_string(K) + " M=" + std::to_string(M));
  }
  num::Rng init = rng.split("prompt_pool");
  num::Rng input_rng = init.split("input_projection");
  input_proj_ = lora::Linear("prompt.input", config.input_features, d, true, input_rng);

  const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
  num::Rng key_rng = init.split("keys");
  num::Tensor keys({M, d});
  for (std::size_t m = 0; m < M; ++m) {
    for (int attempt = 0;; ++attempt) {
      for (std::size_t j = 0; j < d; ++j) keys(m, j) = key_rng.normal(0.0, stddev);
      bool distinct = true;
      for (std::size_t p = 0; p < m && distinct; ++p) distinct = cosine(keys.row_ptr(m), keys.row_ptr(p), d) <= 0.999;
      if (distinct) break;
      if (attempt > 1000) throw ConfigError("prompt pool: could not draw distinct keys");
    }
  }
  keys_ = num::Parameter("prompt.keys", std::move(keys));

  num::Rng value_rng = init.split("values");
  num::Tensor values({M * W, d});
  for (auto& v : values.storage()) v = value_rng.normal(0.0, stddev);
  values_ = num::Parameter("prompt.values", std::move(values));

  num::Rng wq_rng = init.split("w_q"), wk_rng = init.split("w_k"), wv_rng = init.split("w_v"),
           wo_rng = init.split("w_o");
  wq_ = lora::Linear("prompt.w_q", d, d, false, wq_rng);
  wk_ = lora::Linear("prompt.w_k", d, d, false, wk_rng);
  num::Tensor wv({1, d});
  for (auto& v : wv.storage()) v = wv_rng.normal(0.0, stddev);
  wv_ = num::Parameter("prompt.w_v", std::move(wv));
  wo_ = lora::Linear("prompt.w_o", (K + 1) * d, d, false, wo_rng);
}

num::Var PromptPool::embed(num::Tape& tape, num::Var features) { return input_proj_.forward(tape, features); }

num::Var PromptPool::scores(num::Tape& tape, num::Var query) {
  if (query.cols() != config_.d) {
    throw ShapeError("prompt scores: query width " + std::to_string(query.cols()) + " != d " + std::to_string(config_.d));
  }
  num::Var qp = wq_.forward(tape, query);
  num::Var kp = wk_.forward(tape, tape.param(keys_));
  return additive_score(qp, kp, tape.param(wv_), config_.window);
}

Selection PromptPool::select(const num::Tensor& scores) const {
  Selection sel;
  sel.k = config_.top_k;
  const std::size_t S = scores.rows(), M = scores.cols();
  sel.indices.reserve(S * sel.k);
  sel.reference_scores = num::Tensor({S, sel.k});
  for (std::size_t s = 0; s < S; ++s) {
    auto idx = top_k(std::span<const double>(scores.row_ptr(s), M), sel.k);
    for (std::size_t j = 0; j < sel.k; ++j) {
      sel.indices.push_back(idx[j]);
      sel.reference_scores(s, j) = scores(s, idx[j]);
    }
  }
  return sel;
}

num::Var PromptPool::assemble(num::Tape& tape, num::Var query, num::Var scores, const Selection& selection) {
  if (selection.k != config_.top_k) {
    throw ShapeError("prompt assemble: selection has K=" + std::to_string(selection.k) + " but the output projection expects K=" +
                     std::to_string(config_.top_k));
  }
  num::Var picked = num::take_cols(scores, selection.indices, selection.k);
  num::Var gates = num::add_scalar(num::sub(picked, tape.constant(selection.reference_scores)), 1.0);
  num::Var stacked = prompt_concat(tape.param(values_), gates, query, selection.indices, selection.k, config_.window);
  return wo_.forward(tape, stacked);
}

num::Var PromptPool::forward(num::Tape& tape, num::Var query, const Selection* fixed, Selection* selection_out) {
  num::Var s = scores(tape, query);
  Selection sel = fixed ? *fixed : select(tape.value(s));
  num::Var out = assemble(tape, query, s, sel);
  if (selection_out) *selection_out = std::move(sel);
  return out;
}

double PromptPool::score(const num::Tensor& query, std::size_t key_index) {
  num::Tape tape;
  num::Var s = scores(tape, tape.constant(query));
  if (key_index >= config_.pool_size) throw ConfigError("prompt score: key index out of range");
  return tape.value(s)(0, key_index);
}

RetrievalResult PromptPool::retrieve_top_k(const num::Tensor& query) {
  if (query.rows() != config_.window) throw ShapeError("retrieve_top_k: expects a single W x d query window");
  num::Tape tape;
  const num::Tensor& s = tape.value(scores(tape, tape.constant(query)));
  RetrievalResult r;
  r.indices = top_k(std::span<const double>(s.row_ptr(0), s.cols()), config_.top_k);
  const std::size_t W = config_.window, d = config_.d;
  for (std::size_t idx : r.indices) {
    r.scores.push_back(s(0, idx));
    num::Tensor v({W, d});
    std::copy(values_.value.row_ptr(idx * W), values_.value.row_ptr(idx * W) + W * d, v.storage().begin());
    r.values.push_back(std::move(v));
  }
  return r;
}

num::Tensor PromptPool::assemble(const num::Tensor& query, const RetrievalResult& result) {
  const std::size_t W = config_.window, d = config_.d, K = result.values.size();
  if (K != config_.top_k) {
    throw ShapeError("prompt assemble: got " + std::to_string(K) + " prompts, output projection expects " +
                     std::to_string(config_.top_k));
  }
  num::Tape tape;
  std::vector<num::Var> parts;
  for (const auto& v : result.values) {
    if (v.rows() != W || v.cols() != d) throw ShapeError("prompt assemble: prompt value must be W x d");
    parts.push_back(tape.constant(v));
  }
  parts.push_back(tape.constant(query));
  return tape.value(wo_.forward(tape, num::concat_cols(parts)));
}

void PromptPool::collect(num::ParameterList& out) {
  input_proj_.collect(out);
  out.push_back(&keys_);
  out.push_back(&values_);
  wq_.collect(out);
  wk_.collect(out);
  out.push_back(&wv_);
  wo_.collect(out);
}

std::size_t PromptPool::retrieval_parameter_count() const {
  return keys_.value.size() + values_.value.size() + wq_.parameter_count() + wk_.parameter_count() +
         wv_.value.size() + wo_.parameter_count();
}

}  // namespace stproph::prompt
