// SPDX-License-Identifier: Apache-2.0
#include "stproph/lora/adapter.hpp"

#include <cmath>

#include "stproph/error.hpp"
#include "stproph/numerics/ops.hpp"

namespace stproph::lora {

namespace {

void validate_rank(std::size_t rank, std::size_t d_in, std::size_t d_out, const std::string& name) {
  if (rank < 2 || rank % 2 != 0) {
    throw ConfigError(name + ": adapter rank must be even and >= 2, got " + std::to_string(rank));
  }
  if (rank >= d_in || rank >= d_out) {
    throw ConfigError(name + ": adapter rank " + std::to_string(rank) + " must be below layer width " +
                      std::to_string(d_in) + "x" + std::to_string(d_out));
  }
}

num::Tensor normal_matrix(std::size_t rows, std::size_t cols, double stddev, num::Rng& rng) {
  num::Tensor t({rows, cols});
  for (auto& v : t.storage()) v = rng.normal(0.0, stddev);
  return t;
}

}  // namespace

AdapterLinear AdapterLinear::init(num::Tensor w0, std::size_t rank, num::Rng& rng, std::optional<double> alpha,
                                  double dropout, const std::string& name) {
  num::require_rank2(w0, "adapter base");
  const std::size_t d_in = w0.rows(), d_out = w0.cols();
  validate_rank(rank, d_in, d_out, name);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(d_in));
  num::Tensor b = normal_matrix(d_in, rank, stddev, rng);
  num::Tensor d = normal_matrix(rank, rank / 2, stddev, rng);
  num::Tensor c({rank / 2, d_out});
  return AdapterLinear(std::move(w0), std::move(b), std::move(d), std::move(c),
                       alpha.value_or(1.0 / static_cast<double>(rank)), dropout, name);
}

AdapterLinear::AdapterLinear(num::Tensor w0, num::Tensor b, num::Tensor d, num::Tensor c, double alpha,
                             double dropout, const std::string& name)
    : w0_(name + ".base", std::move(w0), false),
      b_(name + ".lora_B", std::move(b), false),
      d_(name + ".lora_D", std::move(d), false),
      c_(name + ".lora_C", std::move(c), true),
      alpha_(alpha),
      dropout_(dropout) {
  const auto& W = w0_.value;
  const auto& B = b_.value;
  const auto& D = d_.value;
  const auto& C = c_.value;
  num::require_rank2(W, "adapter base");
  if (B.rank() != 2 || B.rows() != W.rows() || D.rank() != 2 || D.rows() != B.cols() || C.rank() != 2 ||
      C.rows() != D.cols() || C.cols() != W.cols()) {
    throw ShapeError(name + ": inconsistent adapter factors W0" + num::shape_string(W.shape()) + " B" +
                     num::shape_string(B.shape()) + " D" + num::shape_string(D.shape()) + " C" +
                     num::shape_string(C.shape()));
  }
  if (!(alpha_ > 0.0)) throw ConfigError(name + ": alpha must be positive");
  if (dropout_ < 0.0 || dropout_ >= 1.0) throw ConfigError(name + ": dropout must lie in [0, 1)");
}

num::Tensor AdapterLinear::effective_base() const {
  return quantized_ ? dequantize(*quantized_) : w0_.value;
}

num::Var AdapterLinear::forward(num::Tape& tape, num::Var x, num::Rng* dropout_rng) {
  if (x.cols() != in_features()) {
    throw ShapeError(w0_.name + ": input width " + std::to_string(x.cols()) + " does not match " +
                     std::to_string(in_features()));
  }
  num::Var base_w = quantized_ ? tape.constant(dequantize(*quantized_)) : tape.param(w0_);
  num::Var base = num::matmul(x, base_w);

  num::Var xa = (dropout_rng != nullptr) ? num::dropout(x, dropout_, *dropout_rng) : x;
  num::Var low = num::matmul(num::matmul(xa, tape.param(b_)), tape.param(d_));
  tape.record_stored_activation(low.value().size());
  num::Var up = num::matmul(low, tape.param(c_));
  return num::add(base, num::scale(up, alpha_));
}

num::Tensor AdapterLinear::forward(const num::Tensor& x) {
  num::Tape tape;
  return tape.value(forward(tape, tape.constant(x)));
}

num::Tensor AdapterLinear::delta() const {
  return num::scaled(num::matmul(b_.value, num::matmul(d_.value, c_.value)), alpha_);
}

num::Tensor AdapterLinear::merge() const { return num::add(effective_base(), delta()); }

num::Tensor AdapterLinear::unmerge(const num::Tensor& merged) const { return num::sub(merged, delta()); }

void AdapterLinear::quantize_base(int bits) { quantized_ = quantize(w0_.value, bits); }

void AdapterLinear::collect(num::ParameterList& out) {
  out.push_back(&w0_);
  out.push_back(&b_);
  out.push_back(&d_);
  out.push_back(&c_);
}

}  // namespace stproph::lora
