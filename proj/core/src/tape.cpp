#include "kwcap/tape.hpp"

#include "kwcap/errors.hpp"

namespace kwcap {

const Tensor& Var::value() const { return tape_->value(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor* GradientSink::slot(NodeId id) {
  if (!tape_.requires_grad(id)) return nullptr;
  Tensor& g = grads_[id];
  if (g.empty() && tape_.value(id).size() > 0) g = Tensor::zeros(tape_.value(id).shape());
  return &g;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.value.set_requires_grad(requires_grad);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Var Tape::leaf_ref(const Tensor& value, bool requires_grad) {
  Node n;
  n.borrowed = &value;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Var Tape::record(const char* op, Tensor value, std::vector<NodeId> inputs, BackwardFn backward) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  for (NodeId in : inputs) {
    if (in >= nodes_.size()) throw ContractError("tape input does not precede its node");
    n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  }
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Gradients Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ContractError("backward: loss recorded on a different tape");
  if (value(loss.id()).size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_string(value(loss.id()).shape()));
  }
  std::vector<Tensor> grads(nodes_.size());
  if (!nodes_[loss.id()].requires_grad) return Gradients(this, std::move(grads));
  grads[loss.id()] = Tensor::filled(value(loss.id()).shape(), 1.0);
  GradientSink sink(*this, grads);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || grads[i].empty()) continue;
    n.backward(grads[i], sink);
  }
  return Gradients(this, std::move(grads));
}

Tensor Gradients::of(Var v) const {
  if (reached(v)) return grads_[v.id()];
  return Tensor::zeros(v.value().shape());
}

}  // namespace kwcap
