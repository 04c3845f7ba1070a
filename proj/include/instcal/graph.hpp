#pragma once

#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "instcal/tensor.hpp"

namespace instcal {

class Graph;

/// Handle to a value recorded in a Graph. Cheap to copy; only valid while
/// the owning Graph is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  int id() const { return id_; }

 private:
  friend class Graph;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  int id_ = -1;
};

using BackwardFn = std::function<void(Graph&, const Tensor& grad_out)>;

/// Computation record for reverse-mode differentiation.
///
/// Every primitive appends one node holding its output value and, when any
/// input requires a gradient, a closure that maps the output gradient onto its
/// inputs. backward() replays the closures in exact reverse execution order and
/// may be called once per graph. A graph belongs to one thread at a time.
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Value that never receives a gradient.
  Var constant(Tensor value);
  /// Input or parameter; receives a gradient when requires_grad is set and the
  /// graph is recording.
  Var leaf(Tensor value, bool requires_grad = true);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  bool has_grad(Var v) const;
  /// Gradient of the last backward() target with respect to v. Throws when v
  /// received no gradient.
  const Tensor& grad(Var v) const;

  void backward(Var loss);

  bool recording() const { return recording_; }
  bool backward_done() const { return backward_done_; }
  std::size_t size() const { return nodes_.size(); }
  /// Primitive names in execution order.
  std::vector<std::string> op_names() const;
  /// Node ids whose backward closure ran, in the order they ran.
  const std::vector<int>& backward_trace() const { return trace_; }

  // Primitive-implementation interface.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  /// Zero-initialized (on first use) gradient accumulator for v.
  Tensor& grad_buffer(Var v);

 private:
  struct Node {
    const char* op;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  void check_owned(Var v) const;

  bool recording_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::vector<int> trace_;
};

}  // namespace instcal
