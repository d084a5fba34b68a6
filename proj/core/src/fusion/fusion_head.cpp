// SPDX-License-Identifier: Apache-2.0
#include "stproph/fusion/fusion_head.hpp"

#include <cmath>

#include "stproph/attention/gq_mha.hpp"
#include "stproph/error.hpp"
#include "stproph/numerics/ops.hpp"

namespace stproph::fusion {

FusionBlock::FusionBlock(const std::string& name, std::size_t d, std::size_t d_text, std::size_t heads, num::Rng& rng)
    : d_(d), heads_(heads) {
  if (heads == 0 || d == 0 || d % heads != 0) {
    throw ConfigError("fusion: heads (" + std::to_string(heads) + ") must divide d (" + std::to_string(d) + ")");
  }
  num::Rng init = rng.split(name);
  if (d_text != d) {
    num::Rng r = init.split("projection");
    projection_.emplace(name + ".projection", d_text, d, false, r);
  }
  num::Rng qr = init.split("query"), kr = init.split("key"), vr = init.split("value");
  query_ = lora::Linear(name + ".query", d, d, false, qr);
  key_ = lora::Linear(name + ".key", d, d, false, kr);
  value_ = lora::Linear(name + ".value", d, d, false, vr);
  num::Rng orng = init.split("out");
  out_ = lora::Linear(name + ".out", d, d, false, orng);
}

num::Var FusionBlock::fuse(num::Tape& tape, num::Var text, num::Var series, std::size_t window) {
  if (series.cols() != d_ || text.rows() != series.rows()) {
    throw ShapeError("fuse: text " + num::shape_string(text.shape()) + " and series " +
                     num::shape_string(series.shape()) + " do not line up for d=" + std::to_string(d_));
  }
  num::Var kv_in = projection_ ? projection_->forward(tape, text) : text;
  if (kv_in.cols() != d_) {
    throw ShapeError("fuse: text width " + std::to_string(kv_in.cols()) + " != d " + std::to_string(d_));
  }
  const std::size_t hw = d_ / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hw));
  num::Var q = query_.forward(tape, series);
  num::Var k = key_.forward(tape, kv_in);
  num::Var v = value_.forward(tape, kv_in);
  if (heads_ == 1) return num::add(out_.forward(tape, attn::segment_attention(q, k, v, window, scale)), series);
  std::vector<num::Var> heads;
  heads.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    heads.push_back(attn::segment_attention(num::slice_cols(q, h * hw, hw), num::slice_cols(k, h * hw, hw),
                                            num::slice_cols(v, h * hw, hw), window, scale));
  }
  num::Var merged = heads.size() == 1 ? heads.front() : num::concat_cols(heads);
  return num::add(out_.forward(tape, merged), series);
}

num::Tensor FusionBlock::fuse(const num::Tensor& text, const num::Tensor& series, std::size_t window) {
  if (series.size() % d_ != 0) throw ShapeError("fuse: series width does not match d");
  const std::size_t rows = series.size() / d_;
  if (rows == 0 || text.size() % rows != 0) throw ShapeError("fuse: text and series cell counts differ");
  num::Tape tape;
  num::Var t = tape.constant(text.reshaped({rows, text.size() / rows}));
  num::Var s = tape.constant(series.reshaped({rows, d_}));
  return tape.value(fuse(tape, t, s, window)).reshaped(series.shape());
}

void FusionBlock::collect(num::ParameterList& out) {
  for (auto* l : linears()) l->collect(out);
}

std::vector<lora::Linear*> FusionBlock::linears() {
  std::vector<lora::Linear*> out;
  if (projection_) out.push_back(&*projection_);
  out.push_back(&query_);
  out.push_back(&key_);
  out.push_back(&value_);
  out.push_back(&out_);
  return out;
}

std::size_t FusionBlock::parameter_count() const {
  return out_.parameter_count() + (projection_ ? projection_->parameter_count() : 0) + query_.parameter_count() +
         key_.parameter_count() + value_.parameter_count();
}

ConcatFusion::ConcatFusion(const std::string& name, std::size_t d, std::size_t d_text, num::Rng& rng) {
  num::Rng r = rng.split(name);
  linear_ = lora::Linear(name + ".linear", d + d_text, d, true, r);
}

num::Var ConcatFusion::fuse(num::Tape& tape, num::Var text, num::Var series) {
  if (text.rows() != series.rows()) throw ShapeError("concat fusion: text and series row counts differ");
  return linear_.forward(tape, num::concat_cols({series, text}));
}

PointHead::PointHead(const std::string& name, std::size_t window, std::size_t d, std::size_t horizon, num::Rng& rng)
    : window_(window), d_(d) {
  if (window == 0 || horizon == 0) throw ConfigError(name + ": window and horizon must be at least 1");
  num::Rng r = rng.split(name);
  linear_ = lora::Linear(name, window * d, horizon, true, r);
}

num::Var PointHead::forward(num::Tape& tape, num::Var fused) {
  if (fused.cols() != d_ || fused.rows() % window_ != 0) {
    throw ShapeError("head: input " + num::shape_string(fused.shape()) + " is not a stack of " +
                     std::to_string(window_) + " x " + std::to_string(d_) + " blocks");
  }
  num::Var flat = num::reshape(fused, {fused.rows() / window_, window_ * d_});
  return linear_.forward(tape, flat);
}

GaussianHead::GaussianHead(const std::string& name, std::size_t window, std::size_t d, std::size_t horizon,
                           num::Rng& rng, double floor)
    : mean_(name + ".mu", window, d, horizon, rng), variance_(name + ".sigma2", window, d, horizon, rng), floor_(floor) {
  if (!(floor > 0.0)) throw ConfigError(name + ": sigma2 floor must be positive");
}

GaussianOutput GaussianHead::forward(num::Tape& tape, num::Var fused) {
  num::Var mu = mean_.forward(tape, fused);
  num::Var raw = variance_.forward(tape, fused);
  return {mu, num::add_scalar(num::softplus(raw), floor_)};
}

void GaussianHead::collect(num::ParameterList& out) {
  mean_.collect(out);
  variance_.collect(out);
}

namespace {

void check_target(const num::Tensor& mu, const num::Tensor& y, const num::Tensor& mask, const char* op) {
  if (mu.shape() != y.shape()) {
    throw ShapeError(std::string(op) + ": prediction " + num::shape_string(mu.shape()) + " vs target " +
                     num::shape_string(y.shape()));
  }
  if (!mask.empty() && mask.shape() != y.shape()) {
    throw ShapeError(std::string(op) + ": mask " + num::shape_string(mask.shape()) + " vs target " +
                     num::shape_string(y.shape()));
  }
}

bool used(const num::Tensor& mask, std::size_t i) { return mask.empty() || mask[i] != 0.0; }

}  // namespace

num::Var mae_loss(num::Var mu, const num::Tensor& y, const num::Tensor& mask) {
  num::Tape& t = *mu.tape;
  const num::Tensor& m = t.value(mu);
  check_target(m, y, mask, "mae");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!used(mask, i)) continue;
    total += std::abs(m[i] - y[i]);
    ++count;
  }
  const double inv = count ? 1.0 / static_cast<double>(count) : 0.0;
  return t.record(num::Tensor({1, 1}, {total * inv}), "mae", t.requires_grad(mu), [&t, mu, y, mask, inv](const num::Tensor& g) {
    const num::Tensor& m = t.value(mu);
    num::Tensor d(m.shape());
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!used(mask, i)) continue;
      const double r = m[i] - y[i];
      d[i] = g[0] * inv * static_cast<double>((r > 0.0) - (r < 0.0));
    }
    t.accumulate(mu, d, "mae");
  });
}

num::Var gaussian_nll(num::Var mu, num::Var sigma2, const num::Tensor& y, const num::Tensor& mask) {
  num::Tape& t = *mu.tape;
  const num::Tensor& m = t.value(mu);
  const num::Tensor& s = t.value(sigma2);
  check_target(m, y, mask, "gaussian_nll");
  if (s.shape() != m.shape()) throw ShapeError("gaussian_nll: sigma2 shape differs from mu");
  double total = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!used(mask, i)) continue;
    if (!(s[i] > 0.0)) throw NumericalError("gaussian_nll: sigma2 must be positive, got " + std::to_string(s[i]));
    const double r = y[i] - m[i];
    total += 0.5 * std::log(s[i]) + r * r / (2.0 * s[i]);
  }
  const bool rg = t.requires_grad(mu) || t.requires_grad(sigma2);
  return t.record(num::Tensor({1, 1}, {total}), "gaussian_nll", rg, [&t, mu, sigma2, y, mask](const num::Tensor& g) {
    const num::Tensor& m = t.value(mu);
    const num::Tensor& s = t.value(sigma2);
    num::Tensor dm(m.shape()), ds(s.shape());
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!used(mask, i)) continue;
      const double r = y[i] - m[i];
      dm[i] = -g[0] * r / s[i];
      ds[i] = g[0] * (0.5 / s[i] - r * r / (2.0 * s[i] * s[i]));
    }
    t.accumulate(mu, dm, "gaussian_nll");
    t.accumulate(sigma2, ds, "gaussian_nll");
  });
}

double mae(const num::Tensor& mu, const num::Tensor& y) {
  num::Tape tape;
  return tape.value(mae_loss(tape.constant(mu), y))[0];
}

double gaussian_nll(const num::Tensor& mu, const num::Tensor& sigma2, const num::Tensor& y) {
  num::Tape tape;
  return tape.value(gaussian_nll(tape.constant(mu), tape.constant(sigma2), y))[0];
}

}  // namespace stproph::fusion
