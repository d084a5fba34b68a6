// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "stproph/lora/quantize.hpp"
#include "stproph/numerics/rng.hpp"
#include "stproph/numerics/tape.hpp"

namespace stproph::lora {

/// Low-rank adapter with activation-memory reduction.
///
/// The adapted weight is W0 + alpha * B * (D * C) where
///   W0 : d_in x d_out   frozen base weight
///   B  : d_in x r       frozen projection down
///   D  : r x r/2        frozen second projection down
///   C  : r/2 x d_out    trainable projection up, zero at init
///
/// The forward pass computes x*W0 + alpha * ((x*B)*D)*C, so the only
/// activation retained for the gradient of C is the n x r/2 product (x*B)*D.
/// Gradients never reach W0, B or D.
class AdapterLinear {
 public:
  /// Draws B and D from N(0, 1/d_in) and sets C = 0. alpha defaults to 1/r.
  /// Throws ConfigError unless r is even and 2 <= r < min(d_in, d_out).
  static AdapterLinear init(num::Tensor w0, std::size_t rank, num::Rng& rng, std::optional<double> alpha = {},
                            double dropout = 0.0, const std::string& name = "adapter");

  /// Explicit factors, validated for consistent shapes.
  AdapterLinear(num::Tensor w0, num::Tensor b, num::Tensor d, num::Tensor c, double alpha, double dropout = 0.0,
                const std::string& name = "adapter");

  /// Differentiable forward. Dropout is applied to x before the B projection
  /// only when `dropout_rng` is given (training).
  num::Var forward(num::Tape& tape, num::Var x, num::Rng* dropout_rng = nullptr);
  /// Evaluation-mode forward on plain values.
  num::Tensor forward(const num::Tensor& x);

  /// alpha * B * (D * C), materialized.
  num::Tensor delta() const;
  /// W0 + delta(); a plain weight with the same forward behaviour.
  num::Tensor merge() const;
  /// merged - delta(); recovers W0 from a merged weight.
  num::Tensor unmerge(const num::Tensor& merged) const;

  /// Stores W0 quantized; forward dequantizes it on every read.
  void quantize_base(int bits = 4);
  const std::optional<QuantizedTensor>& quantized_base() const { return quantized_; }
  /// W0 as used by forward (dequantized when quantized).
  num::Tensor effective_base() const;

  num::Parameter& base() { return w0_; }
  num::Parameter& down() { return b_; }
  num::Parameter& down2() { return d_; }
  num::Parameter& up() { return c_; }
  const num::Parameter& base() const { return w0_; }
  const num::Parameter& down() const { return b_; }
  const num::Parameter& down2() const { return d_; }
  const num::Parameter& up() const { return c_; }

  double alpha() const { return alpha_; }
  double dropout_rate() const { return dropout_; }
  std::size_t rank() const { return b_.value.cols(); }
  std::size_t in_features() const { return w0_.value.rows(); }
  std::size_t out_features() const { return w0_.value.cols(); }
  std::size_t trainable_count() const { return c_.value.size(); }
  std::size_t frozen_count() const { return w0_.value.size() + b_.value.size() + d_.value.size(); }

  void collect(num::ParameterList& out);

 private:
  num::Parameter w0_;
  num::Parameter b_;
  num::Parameter d_;
  num::Parameter c_;
  double alpha_;
  double dropout_;
  std::optional<QuantizedTensor> quantized_;
};

}  // namespace stproph::lora
