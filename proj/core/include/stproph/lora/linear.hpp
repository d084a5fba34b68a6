// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "stproph/lora/adapter.hpp"
#include "stproph/numerics/rng.hpp"
#include "stproph/numerics/tape.hpp"

namespace stproph::lora {

/// y = x W (+ b). Weights start from N(0, 1/d_in), bias from zero. An adapter
/// can be attached later; the weight then becomes the adapter's frozen base.
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out, bool bias, num::Rng& rng);

  num::Var forward(num::Tape& tape, num::Var x, num::Rng* dropout_rng = nullptr);

  /// Wraps the layer with a zero-initialized adapter. The base weight is frozen.
  void attach_adapter(std::size_t rank, num::Rng& rng, std::optional<double> alpha = {}, double dropout = 0.0);
  /// Replaces base + adapter by the merged plain weight.
  void merge_adapter();

  bool adapted() const { return adapter_.has_value(); }
  AdapterLinear& adapter() { return *adapter_; }
  const AdapterLinear& adapter() const { return *adapter_; }

  num::Parameter& weight() { return adapter_ ? adapter_->base() : weight_; }
  const num::Parameter& weight() const { return adapter_ ? adapter_->base() : weight_; }
  num::Parameter* bias() { return bias_ ? &*bias_ : nullptr; }

  const std::string& name() const { return name_; }
  std::size_t in_features() const { return weight().value.rows(); }
  std::size_t out_features() const { return weight().value.cols(); }
  std::size_t parameter_count() const;

  void collect(num::ParameterList& out);

 private:
  std::string name_;
  num::Parameter weight_;
  std::optional<num::Parameter> bias_;
  std::optional<AdapterLinear> adapter_;
};

}  // namespace stproph::lora
