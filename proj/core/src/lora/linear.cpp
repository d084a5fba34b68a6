// SPDX-License-Identifier: Apache-2.0
#include "stproph/lora/linear.hpp"

#include <cmath>

#include "stproph/error.hpp"
#include "stproph/numerics/ops.hpp"

namespace stproph::lora {

Linear::Linear(std::string name, std::size_t in, std::size_t out, bool bias, num::Rng& rng) : name_(std::move(name)) {
  num::Tensor w({in, out});
  const double stddev = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto& v : w.storage()) v = rng.normal(0.0, stddev);
  weight_ = num::Parameter(name_ + ".weight", std::move(w));
  if (bias) bias_.emplace(name_ + ".bias", num::Tensor({1, out}));
}

num::Var Linear::forward(num::Tape& tape, num::Var x, num::Rng* dropout_rng) {
  num::Var y;
  if (!dropout_rng) dropout_rng = tape.dropout_rng();
  if (adapter_) {
    y = adapter_->forward(tape, x, dropout_rng);
  } else {
    if (x.cols() != weight_.value.rows()) {
      throw ShapeError(name_ + ": input " + num::shape_string(x.shape()) + " does not match weight " +
                       num::shape_string(weight_.value.shape()));
    }
    y = num::matmul(x, tape.param(weight_));
  }
  if (bias_) y = num::add_row(y, tape.param(*bias_));
  return y;
}

void Linear::attach_adapter(std::size_t rank, num::Rng& rng, std::optional<double> alpha, double dropout) {
  if (adapter_) throw ConfigError(name_ + ": adapter already attached");
  adapter_.emplace(AdapterLinear::init(weight_.value, rank, rng, alpha, dropout, name_));
  weight_ = num::Parameter();
}

void Linear::merge_adapter() {
  if (!adapter_) return;
  num::Tensor merged = adapter_->merge();
  adapter_.reset();
  weight_ = num::Parameter(name_ + ".weight", std::move(merged));
}

std::size_t Linear::parameter_count() const {
  std::size_t n = bias_ ? bias_->value.size() : 0;
  if (adapter_) return n + adapter_->frozen_count() + adapter_->trainable_count();
  return n + weight_.value.size();
}

void Linear::collect(num::ParameterList& out) {
  if (adapter_) {
    adapter_->collect(out);
  } else {
    out.push_back(&weight_);
  }
  if (bias_) out.push_back(&*bias_);
}

}  // namespace stproph::lora
