// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace stproph::trainer {

inline constexpr double kOpTolerance = 1e-6;
inline constexpr double kModelTolerance = 1e-4;

/// Every differentiable op the library records on a tape.
const std::vector<std::string>& registered_ops();

struct GradCheckEntry {
  std::string component;  // op name, or "model.point" / "model.uncertainty"
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::string worst_param;
  bool passed() const { return max_rel_error < tolerance; }
};

/// Checks one op in isolation: loss = sum(op(inputs) * R) for a random
/// weighting R, all inputs drawn from `seed`. Throws ConfigError for an
/// unknown op.
GradCheckEntry check_op(const std::string& op, std::uint64_t seed);

/// One entry per registered op, in registry order.
std::vector<GradCheckEntry> check_all_ops(std::uint64_t seed);

/// Full model (N=3, W=4, d=8, M=4, K=2, G=2, H=2) with the prompt selection
/// held fixed, for both output variants.
std::vector<GradCheckEntry> check_model(std::uint64_t seed);

}  // namespace stproph::trainer
