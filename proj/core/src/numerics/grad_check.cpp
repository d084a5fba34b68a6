// SPDX-License-Identifier: Apache-2.0
#include "stproph/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "stproph/error.hpp"

namespace stproph::num {

namespace {

double evaluate(const LossFn& loss_fn) {
  Tape tape;
  const double v = tape.value(loss_fn(tape))[0];
  if (!std::isfinite(v)) throw NumericalError("grad_check: loss is not finite");
  return v;
}

}  // namespace

GradCheckResult grad_check(const LossFn& loss_fn, const ParameterList& params, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ConfigError("grad_check: eps must lie in [1e-7, 1e-3]");

  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = loss_fn(tape);
    if (!std::isfinite(tape.value(loss)[0])) throw NumericalError("grad_check: loss is not finite");
    tape.backward(loss);
  }

  GradCheckResult result;
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      const auto at = [&](double offset) {
        p->value[i] = orig + offset;
        return evaluate(loss_fn);
      };
      const double up2 = at(2.0 * eps), up = at(eps), down = at(-eps), down2 = at(-2.0 * eps);
      p->value[i] = orig;

      const double numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * eps);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      if (result.worst_param.empty() || rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = p->name;
        result.worst_index = i;
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace stproph::num
