// SPDX-License-Identifier: Apache-2.0
#include "stproph/numerics/optim.hpp"

#include <cmath>

#include "stproph/error.hpp"

namespace stproph::num {

Adam::Adam(ParameterList params, AdamOptions options) : params_(std::move(params)), options_(options) {
  if (!(options_.lr > 0.0)) throw ConfigError("Adam: learning rate must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Parameter* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void Adam::step() {
  for (Parameter* p : params_) {
    if (!p->trainable) continue;
    if (p->grad.shape() != p->value.shape()) throw ShapeError("Adam: gradient shape mismatch for " + p->name);
    if (!p->grad.all_finite()) throw NumericalError("Adam: non-finite gradient in parameter '" + p->name + "'");
  }
  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double lr = options_.lr;
  const double decay = lr * options_.weight_decay;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter& p = *params_[k];
    if (!p.trainable) continue;
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      if (decay != 0.0) p.value[i] -= decay * p.value[i];
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

}  // namespace stproph::num
