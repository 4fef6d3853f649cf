#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "kwcap/tensor.hpp"

namespace kwcap {

class Tape;
class Gradients;

using NodeId = std::uint32_t;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;

  NodeId id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Accumulation buffer handed to backward closures.
class GradientSink {
 public:
  explicit GradientSink(Tape& tape, std::vector<Tensor>& grads) : tape_(tape), grads_(grads) {}

  /// Zero-initialised gradient slot of `id`, or nullptr when `id` does not
  /// need a gradient.
  Tensor* slot(NodeId id);

 private:
  Tape& tape_;
  std::vector<Tensor>& grads_;
};

using BackwardFn = std::function<void(const Tensor& upstream, GradientSink& sink)>;

/// Append-only record of a forward computation for reverse-mode
/// differentiation. Node inputs always precede the node, so a single reverse
/// sweep visits each node once in topological order.
///
/// A tape is confined to one thread. Run one tape per example to evaluate a
/// batch in parallel.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf owning its value. Collects a gradient when `requires_grad`.
  Var leaf(Tensor value, bool requires_grad);
  Var leaf(Tensor value) {
    bool rg = value.requires_grad();
    return leaf(std::move(value), rg);
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Leaf that borrows `value`; the tensor must outlive the tape and stay
  /// unmodified until backward() returns.
  Var leaf_ref(const Tensor& value, bool requires_grad);

  /// Records an op result. `backward` is dropped when no input needs a
  /// gradient.
  Var record(const char* op, Tensor value, std::vector<NodeId> inputs, BackwardFn backward);

  const Tensor& value(NodeId id) const {
    const Node& n = nodes_[id];
    return n.borrowed ? *n.borrowed : n.value;
  }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  const char* op(NodeId id) const { return nodes_[id].op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_[id].inputs; }
  std::size_t size() const { return nodes_.size(); }
  /// Id the next recorded node will receive.
  NodeId next_id() const { return static_cast<NodeId>(nodes_.size()); }

  /// Reverse sweep from a scalar loss.
  Gradients backward(Var loss);

 private:
  struct Node {
    const char* op = "leaf";
    Tensor value;
    const Tensor* borrowed = nullptr;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

/// Gradient map produced by Tape::backward: node id -> gradient tensor.
class Gradients {
 public:
  Gradients() = default;
  Gradients(const Tape* tape, std::vector<Tensor> grads) : tape_(tape), grads_(std::move(grads)) {}

  /// Gradient of the loss with respect to `v`; zeros when `v` was not
  /// reached from the loss.
  Tensor of(Var v) const;
  bool reached(Var v) const { return v.id() < grads_.size() && !grads_[v.id()].empty(); }

 private:
  const Tape* tape_ = nullptr;
  std::vector<Tensor> grads_;
};

}  // namespace kwcap
