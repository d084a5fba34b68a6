// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

namespace stproph::lora {

struct MethodFootprint {
  std::string method;
  std::uint64_t trainable_params = 0;
  std::uint64_t frozen_params = 0;
  /// Input activation elements kept for the backward pass of one layer.
  std::uint64_t stored_activation_elems = 0;
  std::uint64_t stored_activation_width = 0;
};

/// Per-layer comparison of full fine-tuning, LoRA (rank r, trainable B and A)
/// and LoRA-AMR (only C trainable) for a d x d layer.
struct MemoryReport {
  std::uint64_t d = 0;
  std::uint64_t r = 0;
  std::uint64_t batch = 0;
  std::uint64_t tokens = 0;
  MethodFootprint full;
  MethodFootprint lora;
  MethodFootprint amr;
  double full_over_lora = 0.0;       // d / (2r)
  double full_over_amr = 0.0;        // 2d / r
  double activation_ratio = 0.0;     // d : r/2
  std::string init_note;
};

/// Throws ConfigError for odd or non-positive r, non-positive sizes, or r >= d.
MemoryReport memory_report(std::uint64_t d, std::uint64_t r, std::uint64_t batch, std::uint64_t tokens);

/// Structured key/value document (JSON) for the CLI.
std::string to_json(const MemoryReport& report);

}  // namespace stproph::lora
