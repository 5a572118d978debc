#pragma once

// Tape-based reverse-mode automatic differentiation over Tensor values.
//
// A Graph owns an append-only list of nodes. Every primitive in gandef::ops
// evaluates eagerly, appends its result, and records a backward closure that
// accumulates into the gradient buffers of its inputs. Nodes are created in
// topological order by construction, so backward() is a single reverse sweep.
//
// Parameters can be bound by reference (Graph::parameter) to avoid copying
// large weight tensors into every training step; the referenced Tensor must
// outlive the Graph.

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gandef/error.hpp"
#include "gandef/tensor.hpp"

namespace gandef {

enum class OpKind {
  Leaf,
  Add,
  Subtract,
  Multiply,
  Scale,
  AddScalar,
  MatMul,
  Dense,
  Conv2D,
  MaxPool2D,
  GlobalAvgPool,
  Flatten,
  Reshape,
  Relu,
  Sigmoid,
  Softmax,
  Dropout,
  L2Norm,
  CrossEntropy,
  BinaryCrossEntropy,
  Sign,
  Clip,
  Mean,
  Sum,
};

using NodeId = std::size_t;

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf holding a copy of `t`; excluded from differentiation.
  Var constant(Tensor t) { return push_leaf(std::move(t), nullptr, false); }

  /// Leaf holding a copy of `t` whose gradient is tracked.
  Var variable(Tensor t) { return push_leaf(std::move(t), nullptr, true); }

  /// Leaf bound to externally owned storage (e.g. model weights).
  Var parameter(const Tensor& t, bool requires_grad) { return push_leaf(Tensor{}, &t, requires_grad); }

  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind op(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }

  const Tensor& value(NodeId id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

  /// Gradient accumulated by backward(); all-zero for nodes the loss does not reach.
  Tensor grad(Var v) const {
    check_owner(v);
    const Node& n = nodes_[v.id];
    if (!n.grad.empty()) return n.grad;
    return Tensor(value(v.id).shape(), 0.0);
  }

  /// Mutable gradient buffer, zero-allocated on first touch. Used by backward closures.
  Tensor& grad_buffer(NodeId id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor(value(id).shape(), 0.0);
    return n.grad;
  }

  bool has_grad(NodeId id) const { return !nodes_.at(id).grad.empty(); }

  /// Append a computed node. Any requires-grad input makes the result require grad.
  Var push(OpKind op, std::vector<NodeId> inputs, Tensor value, BackwardFn backward) {
    bool rg = false;
    for (NodeId in : inputs) rg = rg || nodes_.at(in).requires_grad;
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  /// Seed d(loss)/d(loss) = 1 and sweep the tape in reverse.
  void backward(Var loss) {
    require(loss.graph == this && loss.id < nodes_.size(), ErrorKind::GraphNotFinalized,
            "loss does not belong to this graph");
    require(!swept_, ErrorKind::GraphNotFinalized, "backward already ran on this graph");
    require(value(loss.id).size() == 1, ErrorKind::NonScalarLoss,
            "loss has shape " + shape_str(value(loss.id).shape()));
    swept_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id).fill(1.0);
    for (std::size_t k = loss.id + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, k);
    }
  }

 private:
  struct Node {
    OpKind op = OpKind::Leaf;
    std::vector<NodeId> inputs;
    Tensor value;
    const Tensor* external = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
    Tensor grad;
  };

  Var push_leaf(Tensor t, const Tensor* ext, bool rg) {
    Node n;
    n.value = std::move(t);
    n.external = ext;
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  void check_owner(Var v) const {
    require(v.graph == this && v.id < nodes_.size(), ErrorKind::GraphNotFinalized, "foreign Var");
  }

  std::vector<Node> nodes_;
  bool swept_ = false;
};

inline const Tensor& Var::value() const { return graph->value(id); }
inline bool Var::requires_grad() const { return graph->requires_grad(id); }

}  // namespace gandef
