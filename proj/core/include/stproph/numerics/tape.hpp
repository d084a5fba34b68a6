// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "stproph/numerics/tensor.hpp"

namespace stproph::num {

/// A named learnable (or frozen) tensor that outlives any single tape.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value, bool trainable = true)
      : name(std::move(name)), value(std::move(value)), grad(this->value.shape()), trainable(trainable) {}

  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  void zero_grad() { grad = Tensor(value.shape()); }
};

using ParameterList = std::vector<Parameter*>;

class Tape;
class Rng;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Reverse-mode recording of one forward pass. Nodes are appended in
/// evaluation order, so walking them backwards is a valid topological order.
/// A tape is rebuilt for every forward pass and owned by a single thread.
class Tape {
 public:
  /// Called with the upstream gradient of the node it belongs to.
  using BackwardFn = std::function<void(const Tensor& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf for a parameter. Repeated calls with the same parameter return the
  /// same node so the gradient is flushed exactly once.
  Var param(Parameter& p);
  /// Leaf that is not tied to a parameter but still collects a gradient.
  Var variable(Tensor value);

  Var record(Tensor value, std::string_view op, bool requires_grad, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  const std::string& op(Var v) const { return nodes_[v.id].op; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds `g` into the gradient of `target`. `op` names the operation whose
  /// backward produced the contribution (used for fault injection).
  void accumulate(Var target, const Tensor& g, std::string_view op);

  /// Seeds d(root)/d(root) = 1 (root must be a single element) and propagates.
  /// Parameter gradients are added into Parameter::grad.
  void backward(Var root);

  /// With gradients disabled, parameters enter as constants and nothing is
  /// recorded for the backward pass (evaluation).
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  /// Generator used by layers that apply dropout in training; null in evaluation.
  void set_dropout_rng(Rng* rng) { dropout_rng_ = rng; }
  Rng* dropout_rng() const { return dropout_rng_; }

  /// Activation bookkeeping for memory accounting.
  void record_stored_activation(std::size_t elems) { stored_activation_elems_ += elems; }
  std::size_t stored_activation_elems() const { return stored_activation_elems_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::string op;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  std::size_t stored_activation_elems_ = 0;
  bool grad_enabled_ = true;
  Rng* dropout_rng_ = nullptr;
};

/// Test hook: when set, every gradient contribution produced by the named op
/// is scaled by 1.5, simulating a wrong backward rule. Empty string disables.
void set_fault_injection(std::string op);
const std::string& fault_injection();

}  // namespace stproph::num
