// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "stproph/numerics/tape.hpp"

namespace stproph::num {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled (AdamW-style) decay; 0 disables it.
  double weight_decay = 0.0;
};

/// Adam with bias-corrected moments. The parameter list is fixed at
/// construction; frozen parameters are skipped.
class Adam {
 public:
  Adam(ParameterList params, AdamOptions options);

  /// Applies one update from the gradients currently stored in the parameters.
  /// Throws NumericalError naming the first parameter with a non-finite gradient.
  void step();
  void zero_grad();

  double lr() const { return options_.lr; }
  void set_lr(double lr) { options_.lr = lr; }
  std::uint64_t step_count() const { return step_; }
  const AdamOptions& options() const { return options_; }

 private:
  ParameterList params_;
  AdamOptions options_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t step_ = 0;
};

}  // namespace stproph::num
