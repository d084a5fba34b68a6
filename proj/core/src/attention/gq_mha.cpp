// SPDX-License-Identifier: Apache-2.0
#include "stproph/attention/gq_mha.hpp"

#include <cmath>
#include <memory>

#include "stproph/error.hpp"
#include "stproph/numerics/ops.hpp"

namespace stproph::attn {

num::Var segment_attention(num::Var q, num::Var k, num::Var v, std::size_t seg_len, double scale,
                           double logit_offset) {
  num::Tape& t = *q.tape;
  const num::Tensor& qv = t.value(q);
  const num::Tensor& kv = t.value(k);
  const num::Tensor& vv = t.value(v);
  num::require_rank2(qv, "segment_attention");
  const std::size_t R = qv.rows(), dq = qv.cols(), dv = vv.cols();
  if (kv.rows() != R || vv.rows() != R || kv.cols() != dq || seg_len == 0 || R % seg_len != 0) {
    throw ShapeError("segment_attention: Q " + num::shape_string(qv.shape()) + ", K " + num::shape_string(kv.shape()) +
                     ", V " + num::shape_string(vv.shape()) + ", sequence length " + std::to_string(seg_len));
  }
  const std::size_t L = seg_len, S = R / L;
  // Row r of probs holds the L attention weights of query row r.
  auto probs = std::make_shared<num::Tensor>(num::Shape{R, L});
  num::Tensor out({R, dv});
  for (std::size_t s = 0; s < S; ++s) {
    const std::size_t base = s * L;
    for (std::size_t i = 0; i < L; ++i) {
      const double* qr = qv.row_ptr(base + i);
      double* pr = probs->row_ptr(base + i);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < L; ++j) {
        const double* kr = kv.row_ptr(base + j);
        double dot = 0.0;
        for (std::size_t c = 0; c < dq; ++c) dot += qr[c] * kr[c];
        pr[j] = dot * scale + logit_offset;
        mx = std::max(mx, pr[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < L; ++j) {
        pr[j] = std::exp(pr[j] - mx);
        z += pr[j];
      }
      double* orow = out.row_ptr(base + i);
      for (std::size_t j = 0; j < L; ++j) {
        pr[j] /= z;
        const double* vr = vv.row_ptr(base + j);
        for (std::size_t c = 0; c < dv; ++c) orow[c] += pr[j] * vr[c];
      }
    }
  }
  const bool rg = t.requires_grad(q) || t.requires_grad(k) || t.requires_grad(v);
  return t.record(std::move(out), "segment_attention", rg,
                  [&t, q, k, v, probs, L, S, dq, dv, scale](const num::Tensor& g) {
                    const num::Tensor& qv = t.value(q);
                    const num::Tensor& kv = t.value(k);
                    const num::Tensor& vv = t.value(v);
                    num::Tensor dQ(qv.shape()), dK(kv.shape()), dV(vv.shape());
                    std::vector<double> dp(L);
                    for (std::size_t s = 0; s < S; ++s) {
                      const std::size_t base = s * L;
                      for (std::size_t i = 0; i < L; ++i) {
                        const double* gr = g.row_ptr(base + i);
                        const double* pr = probs->row_ptr(base + i);
                        double dot = 0.0;
                        for (std::size_t j = 0; j < L; ++j) {
                          const double* vr = vv.row_ptr(base + j);
                          double* dvr = dV.row_ptr(base + j);
                          double acc = 0.0;
                          for (std::size_t c = 0; c < dv; ++c) {
                            acc += gr[c] * vr[c];
                            dvr[c] += pr[j] * gr[c];
                          }
                          dp[j] = acc;
                          dot += acc * pr[j];
                        }
                        const double* qr = qv.row_ptr(base + i);
                        double* dqr = dQ.row_ptr(base + i);
                        for (std::size_t j = 0; j < L; ++j) {
                          const double ds = pr[j] * (dp[j] - dot) * scale;
                          if (ds == 0.0) continue;
                          const double* kr = kv.row_ptr(base + j);
                          double* dkr = dK.row_ptr(base + j);
                          for (std::size_t c = 0; c < dq; ++c) {
                            dqr[c] += ds * kr[c];
                            dkr[c] += ds * qr[c];
                          }
                        }
                      }
                    }
                    t.accumulate(q, dQ, "segment_attention");
                    t.accumulate(k, dK, "segment_attention");
                    t.accumulate(v, dV, "segment_attention");
                  });
}

num::Tensor attention_weights(const num::Tensor& q, const num::Tensor& k, double scale) {
  num::Tensor logits = num::scaled(num::matmul(q, k.transposed()), scale);
  return num::softmax_rows(logits);
}

void GQMHAConfig::validate() const {
  if (groups == 0 || heads == 0 || d == 0) throw ConfigError("GQ-MHA: groups, heads and d must be positive");
  if (d % heads != 0) {
    throw ConfigError("GQ-MHA: heads (" + std::to_string(heads) + ") must divide d (" + std::to_string(d) + ")");
  }
}

GQMHABlock::GQMHABlock(const std::string& name, const GQMHAConfig& config, num::Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d, hw = config_.head_width();
  num::Rng init = rng.split(name);
  for (std::size_t g = 0; g < config_.groups; ++g) {
    const std::string gname = name + ".g" + std::to_string(g);
    Group grp;
    num::Rng kr = init.split(gname + ".key"), vr = init.split(gname + ".value"), orng = init.split(gname + ".out");
    grp.key = lora::Linear(gname + ".key", d, hw, false, kr);
    grp.value = lora::Linear(gname + ".value", d, hw, false, vr);
    for (std::size_t h = 0; h < config_.heads; ++h) {
      num::Rng qr = init.split(gname + ".query" + std::to_string(h));
      grp.queries.emplace_back(gname + ".query" + std::to_string(h), d, hw, false, qr);
    }
    grp.out = lora::Linear(gname + ".out", config_.heads * hw, d, false, orng);
    groups_.push_back(std::move(grp));
  }
}

num::Var GQMHABlock::attend(num::Tape& tape, num::Var seq, std::size_t seg_len) {
  if (seq.cols() != config_.d) {
    throw ShapeError("GQ-MHA: input width " + std::to_string(seq.cols()) + " != d " + std::to_string(config_.d));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(config_.d_k()));
  num::Var total;
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    Group& grp = groups_[g];
    num::Var key = grp.key.forward(tape, seq);
    num::Var value = grp.value.forward(tape, seq);
    std::vector<num::Var> heads;
    heads.reserve(grp.queries.size());
    for (auto& query : grp.queries) {
      num::Var qh = query.forward(tape, seq);
      heads.push_back(segment_attention(qh, key, value, seg_len, scale, config_.logit_offset));
    }
    num::Var merged = heads.size() == 1 ? heads.front() : num::concat_cols(heads);
    num::Var projected = grp.out.forward(tape, merged);
    total = g == 0 ? projected : num::add(total, projected);
  }
  num::Var out = groups_.size() == 1 ? total : num::scale(total, 1.0 / static_cast<double>(groups_.size()));
  if (config_.residual) out = num::add(out, seq);
  return out;
}

num::Tensor GQMHABlock::attend(const num::Tensor& seq) {
  num::Tape tape;
  return tape.value(attend(tape, tape.constant(seq.reshaped({seq.size() / config_.d, config_.d})),
                           seq.size() / config_.d));
}

void GQMHABlock::collect(num::ParameterList& out) {
  for (auto& grp : groups_) {
    grp.key.collect(out);
    grp.value.collect(out);
    for (auto& q : grp.queries) q.collect(out);
    grp.out.collect(out);
  }
}

std::vector<lora::Linear*> GQMHABlock::linears() {
  std::vector<lora::Linear*> out;
  for (auto& grp : groups_) {
    out.push_back(&grp.key);
    out.push_back(&grp.value);
    for (auto& q : grp.queries) out.push_back(&q);
    out.push_back(&grp.out);
  }
  return out;
}

std::size_t GQMHABlock::parameter_count() const {
  std::size_t n = 0;
  for (const auto& grp : groups_) {
    n += grp.key.parameter_count() + grp.value.parameter_count() + grp.out.parameter_count();
    for (const auto& q : grp.queries) n += q.parameter_count();
  }
  return n;
}

std::vector<std::size_t> sensor_major_to_step_major(std::size_t samples, std::size_t sensors, std::size_t window) {
  std::vector<std::size_t> perm;
  perm.reserve(samples * sensors * window);
  for (std::size_t b = 0; b < samples; ++b)
    for (std::size_t w = 0; w < window; ++w)
      for (std::size_t n = 0; n < sensors; ++n) perm.push_back((b * sensors + n) * window + w);
  return perm;
}

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

num::Var intra_series(num::Tape& tape, num::Var x, GQMHABlock& block, std::size_t window) {
  return block.attend(tape, x, window);
}

num::Var inter_series(num::Tape& tape, num::Var x, GQMHABlock& block, std::size_t sensors, std::size_t window) {
  if (sensors == 0 || window == 0 || x.rows() % (sensors * window) != 0) {
    throw ShapeError("inter_series: " + std::to_string(x.rows()) + " rows do not split into " +
                     std::to_string(sensors) + " sensors x " + std::to_string(window) + " steps");
  }
  const std::size_t samples = x.rows() / (sensors * window);
  const auto perm = sensor_major_to_step_major(samples, sensors, window);
  num::Var step_major = num::gather_rows(x, perm);
  num::Var attended = block.attend(tape, step_major, sensors);
  return num::gather_rows(attended, inverse_permutation(perm));
}

namespace {
num::Tensor as_rows(const num::Tensor& x, std::size_t sensors, std::size_t window, std::size_t d) {
  if (x.size() != sensors * window * d) {
    throw ShapeError("expected an N x W x d tensor with N=" + std::to_string(sensors) + " W=" + std::to_string(window) +
                     " d=" + std::to_string(d) + ", got " + num::shape_string(x.shape()));
  }
  return x.reshaped({sensors * window, d});
}
}  // namespace

num::Tensor intra_series(const num::Tensor& x, GQMHABlock& block, std::size_t sensors, std::size_t window) {
  num::Tape tape;
  num::Var in = tape.constant(as_rows(x, sensors, window, block.config().d));
  return tape.value(intra_series(tape, in, block, window)).reshaped(x.shape());
}

num::Tensor inter_series(const num::Tensor& x, GQMHABlock& block, std::size_t sensors, std::size_t window) {
  num::Tape tape;
  num::Var in = tape.constant(as_rows(x, sensors, window, block.config().d));
  return tape.value(inter_series(tape, in, block, sensors, window)).reshaped(x.shape());
}

}  // namespace stproph::attn
