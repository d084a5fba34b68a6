// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>

#include "stproph/numerics/tape.hpp"

namespace stproph::num {

/// Builds a scalar loss on the given tape. Must be deterministic.
using LossFn = std::function<Var(Tape&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients against five-point central differences for
/// every entry of every trainable parameter. Relative error per entry is
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// Throws NumericalError if the loss is non-finite, ConfigError if eps is
/// outside [1e-7, 1e-3].
GradCheckResult grad_check(const LossFn& loss_fn, const ParameterList& params, double eps = 1e-4);

}  // namespace stproph::num
