// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "stproph/lora/linear.hpp"
#include "stproph/numerics/rng.hpp"
#include "stproph/numerics/tape.hpp"

namespace stproph::fusion {

inline constexpr double kSigma2Floor = 1e-6;

/// Cross-modal multi-head attention. Queries come from the series embedding,
/// keys and values from the (projected) text embedding; attention runs over
/// the window axis of each sensor and the series embedding is added back.
/// The per-head d x (d/H) query, key and value maps are stored side by side
/// as one d x d weight each; head h reads columns [h*d/H, (h+1)*d/H).
class FusionBlock {
 public:
  FusionBlock() = default;
  FusionBlock(const std::string& name, std::size_t d, std::size_t d_text, std::size_t heads, num::Rng& rng);

  /// text: R x d_t, series: R x d, rows grouped in consecutive windows of `window`.
  num::Var fuse(num::Tape& tape, num::Var text, num::Var series, std::size_t window);
  /// Value-level version on N x W x d_t and N x W x d blocks.
  num::Tensor fuse(const num::Tensor& text, const num::Tensor& series, std::size_t window);

  std::size_t d() const { return d_; }
  std::size_t heads() const { return heads_; }
  bool has_projection() const { return projection_.has_value(); }
  lora::Linear& projection() { return *projection_; }
  lora::Linear& query() { return query_; }
  lora::Linear& key() { return key_; }
  lora::Linear& value() { return value_; }
  lora::Linear& output() { return out_; }

  void collect(num::ParameterList& out);
  std::vector<lora::Linear*> linears();
  std::size_t parameter_count() const;

 private:
  std::size_t d_ = 0;
  std::size_t heads_ = 0;
  std::optional<lora::Linear> projection_;
  lora::Linear query_, key_, value_;
  lora::Linear out_;
};

/// Replacement for FusionBlock that concatenates both embeddings and applies
/// one linear layer with bias: (d + d_t) -> d.
class ConcatFusion {
 public:
  ConcatFusion() = default;
  ConcatFusion(const std::string& name, std::size_t d, std::size_t d_text, num::Rng& rng);

  num::Var fuse(num::Tape& tape, num::Var text, num::Var series);

  lora::Linear& linear() { return linear_; }
  void collect(num::ParameterList& out) { linear_.collect(out); }
  std::vector<lora::Linear*> linears() { return {&linear_}; }
  std::size_t parameter_count() const { return linear_.parameter_count(); }

 private:
  lora::Linear linear_;
};

/// Flattens each sensor's W x d block and maps it to the horizon with a
/// linear layer shared across sensors. Output: (rows / W) x horizon.
class PointHead {
 public:
  PointHead() = default;
  PointHead(const std::string& name, std::size_t window, std::size_t d, std::size_t horizon, num::Rng& rng);

  num::Var forward(num::Tape& tape, num::Var fused);

  lora::Linear& linear() { return linear_; }
  void collect(num::ParameterList& out) { linear_.collect(out); }
  std::size_t parameter_count() const { return linear_.parameter_count(); }
  std::size_t window() const { return window_; }

 private:
  std::size_t window_ = 0;
  std::size_t d_ = 0;
  lora::Linear linear_;
};

struct GaussianOutput {
  num::Var mu;
  num::Var sigma2;
};

/// Mean and variance heads on the flattened block; sigma2 = softplus(raw) + floor.
class GaussianHead {
 public:
  GaussianHead() = default;
  GaussianHead(const std::string& name, std::size_t window, std::size_t d, std::size_t horizon, num::Rng& rng,
               double floor = kSigma2Floor);

  GaussianOutput forward(num::Tape& tape, num::Var fused);

  PointHead& mean() { return mean_; }
  PointHead& variance() { return variance_; }
  void collect(num::ParameterList& out);
  std::size_t parameter_count() const { return mean_.parameter_count() + variance_.parameter_count(); }

 private:
  PointHead mean_;
  PointHead variance_;
  double floor_ = kSigma2Floor;
};

/// Mean of |mu - y| over entries with mask != 0 (all entries when mask is
/// empty). The subgradient at a zero residual is 0.   op: "mae"
num::Var mae_loss(num::Var mu, const num::Tensor& y, const num::Tensor& mask = {});
/// Sum of log(sigma2)/2 + (y - mu)^2 / (2 sigma2) over masked-in entries.
/// Throws NumericalError when any used sigma2 is not positive.   op: "gaussian_nll"
num::Var gaussian_nll(num::Var mu, num::Var sigma2, const num::Tensor& y, const num::Tensor& mask = {});

double mae(const num::Tensor& mu, const num::Tensor& y);
double gaussian_nll(const num::Tensor& mu, const num::Tensor& sigma2, const num::Tensor& y);

}  // namespace stproph::fusion
