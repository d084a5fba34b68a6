// SPDX-License-Identifier: Apache-2.0
#include "stproph/numerics/tape.hpp"

#include "stproph/error.hpp"

namespace stproph::num {

namespace {
std::string& fault_op() {
  static std::string op;
  return op;
}
}  // namespace

void set_fault_injection(std::string op) { fault_op() = std::move(op); }
const std::string& fault_injection() { return fault_op(); }

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, "constant", false, {}, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, "variable", true, {}, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
  nodes_.push_back(Node{p.value, {}, "param", p.trainable && grad_enabled_, {}, &p});
  const std::size_t id = nodes_.size() - 1;
  param_nodes_.emplace(&p, id);
  return Var{this, id};
}

Var Tape::record(Tensor value, std::string_view op, bool requires_grad, BackwardFn backward) {
  requires_grad = requires_grad && grad_enabled_;
  nodes_.push_back(Node{std::move(value), {}, std::string(op), requires_grad,
                        requires_grad ? std::move(backward) : BackwardFn{}, nullptr});
  return Var{this, nodes_.size() - 1};
}

void Tape::accumulate(Var target, const Tensor& g, std::string_view op) {
  Node& node = nodes_[target.id];
  if (!node.requires_grad) return;
  if (g.shape() != node.value.shape()) {
    throw ShapeError("gradient from '" + std::string(op) + "' has shape " + shape_string(g.shape()) +
                     ", expected " + shape_string(node.value.shape()));
  }
  const bool faulty = !fault_op().empty() && op == fault_op();
  if (node.grad.empty()) {
    node.grad = g;
    if (faulty)
      for (auto& v : node.grad.storage()) v *= 1.5;
    return;
  }
  const double k = faulty ? 1.5 : 1.0;
  for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += k * g[i];
}

void Tape::backward(Var root) {
  Node& r = nodes_[root.id];
  if (r.value.size() != 1) {
    throw ShapeError("backward root must be a scalar, got " + shape_string(r.value.shape()));
  }
  if (!r.requires_grad) return;
  r.grad = Tensor(r.value.shape(), 1.0);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty()) continue;
    // A backward callback only ever writes to earlier nodes.
    if (node.backward) node.backward(node.grad);
    if (node.param != nullptr && node.param->trainable) {
      Tensor& pg = node.param->grad;
      if (pg.shape() != node.grad.shape()) pg = Tensor(node.grad.shape());
      for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += node.grad[k];
    }
  }
}

}  // namespace stproph::num
