#include "instcal/graph.hpp"

#include <stdexcept>

namespace instcal {

const Tensor& Var::value() const { return graph_->value(*this); }
bool Var::requires_grad() const { return graph_->requires_grad(*this); }

void Graph::check_owned(Var v) const {
  if (v.graph_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size()) {
    throw std::invalid_argument("Var does not belong to this graph");
  }
}

Var Graph::constant(Tensor value) {
  if (!value.all_finite()) throw NonFiniteError("non-finite constant");
  nodes_.push_back(Node{"constant", std::move(value), {}, false, false, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NonFiniteError("non-finite leaf");
  nodes_.push_back(Node{"leaf", std::move(value), {}, requires_grad && recording_, false, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

const Tensor& Graph::value(Var v) const {
  check_owned(v);
  return nodes_[v.id_].value;
}

bool Graph::requires_grad(Var v) const {
  check_owned(v);
  return nodes_[v.id_].requires_grad;
}

bool Graph::has_grad(Var v) const {
  check_owned(v);
  return nodes_[v.id_].has_grad;
}

const Tensor& Graph::grad(Var v) const {
  check_owned(v);
  const Node& n = nodes_[v.id_];
  if (!n.has_grad) throw std::logic_error("no gradient recorded for node " + std::to_string(v.id_));
  return n.grad;
}

std::vector<std::string> Graph::op_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const Node& n : nodes_) names.emplace_back(n.op);
  return names;
}

Var Graph::record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  if (backward_done_) throw std::logic_error(std::string("recording '") + op + "' after backward()");
  if (!value.all_finite()) throw NonFiniteError(std::string("non-finite output from ") + op);
  bool needs_grad = false;
  for (Var in : inputs) {
    check_owned(in);
    needs_grad = needs_grad || nodes_[in.id_].requires_grad;
  }
  needs_grad = needs_grad && recording_;
  nodes_.push_back(Node{op, std::move(value), {}, needs_grad, false, needs_grad ? std::move(backward) : BackwardFn{}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Graph::grad_buffer(Var v) {
  check_owned(v);
  Node& n = nodes_[v.id_];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), Real(0));
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::backward(Var loss) {
  check_owned(loss);
  if (backward_done_) throw std::logic_error("backward() called twice on the same computation record");
  if (!recording_) throw std::logic_error("backward() on a non-recording graph");
  if (nodes_[loss.id_].value.numel() != 1) {
    throw DimensionError("backward() target must be a scalar, got shape " + to_string(nodes_[loss.id_].value.shape()));
  }
  backward_done_ = true;
  if (!nodes_[loss.id_].requires_grad) return;
  grad_buffer(loss).fill(Real(1));
  for (int id = loss.id_; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.backward) continue;
    trace_.push_back(id);
    n.backward(*this, n.grad);
    if (!n.grad.all_finite()) throw NonFiniteError(std::string("non-finite gradient at ") + n.op);
    n.backward = nullptr;
  }
}

}  // namespace instcal
