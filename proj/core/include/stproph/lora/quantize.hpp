// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "stproph/numerics/tensor.hpp"

namespace stproph::lora {

/// Affine per-output-channel quantization of a d_in x d_out weight. Output
/// channels are columns. Codes are packed little-end first: with 4 bits two
/// codes share a byte, the low nibble holding the earlier element.
struct QuantizedTensor {
  int bits = 4;
  num::Shape shape;
  std::vector<std::uint8_t> packed;
  /// Per column: lowest value (the zero point) and highest value.
  std::vector<double> lo;
  std::vector<double> hi;
  std::vector<double> scale;

  std::uint32_t code(std::size_t flat_index) const;
  std::size_t levels() const { return std::size_t{1} << bits; }
};

inline constexpr double kQuantScaleFloor = 1e-12;

/// bits must be 2, 4 or 8.
/// scale = max(hi - lo, eps) / (levels - 1), code = round((w - lo) / scale).
QuantizedTensor quantize(const num::Tensor& w, int bits = 4);
/// Dequantizes with std::lerp(lo, hi, code / (levels - 1)) so both channel
/// endpoints are reproduced exactly.
num::Tensor dequantize(const QuantizedTensor& q);

}  // namespace stproph::lora
