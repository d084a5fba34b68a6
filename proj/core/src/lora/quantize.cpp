// SPDX-License-Identifier: Apache-2.0
#include "stproph/lora/quantize.hpp"

#include <algorithm>
#include <cmath>

#include "stproph/error.hpp"

namespace stproph::lora {

std::uint32_t QuantizedTensor::code(std::size_t flat_index) const {
  const std::size_t bit = flat_index * static_cast<std::size_t>(bits);
  const std::uint32_t mask = (1u << bits) - 1u;
  return (packed[bit / 8] >> (bit % 8)) & mask;
}

QuantizedTensor quantize(const num::Tensor& w, int bits) {
  if (bits != 2 && bits != 4 && bits != 8) throw ConfigError("quantize: bit width must be 2, 4 or 8");
  num::require_rank2(w, "quantize");
  if (!w.all_finite()) throw NumericalError("quantize: weights must be finite");

  QuantizedTensor q;
  q.bits = bits;
  q.shape = w.shape();
  const std::size_t rows = w.rows(), cols = w.cols();
  const double top = static_cast<double>(q.levels() - 1);
  q.lo.assign(cols, 0.0);
  q.hi.assign(cols, 0.0);
  q.scale.assign(cols, 0.0);
  for (std::size_t j = 0; j < cols; ++j) {
    double lo = w(0, j), hi = w(0, j);
    for (std::size_t i = 1; i < rows; ++i) {
      lo = std::min(lo, w(i, j));
      hi = std::max(hi, w(i, j));
    }
    q.lo[j] = lo;
    q.hi[j] = hi;
    q.scale[j] = std::max(hi - lo, kQuantScaleFloor) / top;
  }

  q.packed.assign((w.size() * static_cast<std::size_t>(bits) + 7) / 8, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const double x = (w(i, j) - q.lo[j]) / q.scale[j];
      const auto c = static_cast<std::uint32_t>(std::clamp(std::round(x), 0.0, top));
      const std::size_t bit = (i * cols + j) * static_cast<std::size_t>(bits);
      q.packed[bit / 8] |= static_cast<std::uint8_t>(c << (bit % 8));
    }
  }
  return q;
}

num::Tensor dequantize(const QuantizedTensor& q) {
  num::Tensor out(q.shape);
  const std::size_t cols = q.shape[1];
  const double top = static_cast<double>(q.levels() - 1);
  for (std::size_t k = 0; k < out.size(); ++k) {
    const std::size_t j = k % cols;
    out[k] = std::lerp(q.lo[j], q.hi[j], static_cast<double>(q.code(k)) / top);
  }
  return out;
}

}  // namespace stproph::lora
