#include "mpq/autodiff.hpp"

#include "mpq/errors.hpp"

namespace mpq::ad {

const Tensor& Var::value() const { return tape_->nodes_.at(id_).value; }

bool Var::requires_grad() const { return tape_->nodes_.at(id_).requires_grad; }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  bool needs = false;
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw ValidationError("op mixes variables from different tapes");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  if (grad_enabled_ && needs) {
    node.requires_grad = true;
    node.backward = std::move(backward);
    node.inputs.reserve(inputs.size());
    for (const Var& in : inputs) node.inputs.push_back(in.id());
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor Gradients::operator[](const Var& v) const {
  if (reachable(v)) return grads_[v.id()].value();
  return Tensor(v.shape(), 0.0);
}

Var Gradients::var(const Var& v) const { return reachable(v) ? grads_[v.id()] : Var{}; }

bool Gradients::reachable(const Var& v) const {
  return v.id() < grads_.size() && grads_[v.id()].valid();
}

Gradients backward(const Var& loss, bool create_graph) {
  if (!loss.valid()) throw ValidationError("backward: invalid loss handle");
  if (loss.value().numel() != 1) {
    throw ValidationError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  Tape& tape = loss.tape();
  const bool saved = tape.grad_enabled_;
  tape.grad_enabled_ = create_graph;

  Gradients out;
  out.grads_.resize(loss.id() + 1);
  if (tape.nodes_[loss.id()].requires_grad) {
    out.grads_[loss.id()] = tape.constant(Tensor(loss.shape(), 1.0));
  }
  try {
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      const Var g = out.grads_[id];
      if (!g.valid()) continue;
      // Copy: evaluating the rule appends nodes to the deque.
      const BackwardFn fn = tape.nodes_[id].backward;
      const std::vector<std::size_t> inputs = tape.nodes_[id].inputs;
      if (!fn) continue;
      std::vector<Var> in_grads = fn(g, Var(&tape, id));
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        const std::size_t in = inputs[k];
        if (k >= in_grads.size() || !in_grads[k].valid() || !tape.nodes_[in].requires_grad) continue;
        Var& slot = out.grads_[in];
        slot = slot.valid() ? add(slot, in_grads[k]) : in_grads[k];
      }
    }
  } catch (...) {
    tape.grad_enabled_ = saved;
    throw;
  }
  tape.grad_enabled_ = saved;
  return out;
}

}  // namespace mpq::ad
