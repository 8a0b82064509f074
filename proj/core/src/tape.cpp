#include "camid/tape.hpp"

#include <cmath>
#include <limits>

#include "camid/errors.hpp"

namespace camid {

ValueId Tape::leaf(Tensor t) {
  Node n;
  n.kind = OpKind::Leaf;
  n.out = std::move(t);
  return push(std::move(n));
}

ValueId Tape::constant(Tensor t) {
  Node n;
  n.kind = OpKind::Constant;
  n.out = std::move(t);
  return push(std::move(n));
}

ValueId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<ValueId>(nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(ValueId id) {
  if (grads_.size() != nodes_.size()) grads_.resize(nodes_.size());
  Tensor& g = grads_[id];
  if (g.shape != nodes_[id].out.shape) {
    g = Tensor::zeros(nodes_[id].out.shape);
  }
  return g;
}

const Tensor& Tape::grad(ValueId id) { return grad_buffer(id); }

double Tape::min_abs_relu_input() const {
  double m = std::numeric_limits<double>::infinity();
  for (const Node& n : nodes_) {
    if (n.kind != OpKind::Relu) continue;
    const Tensor& x = nodes_[n.inputs[0]].out;
    for (double v : x.data) m = std::min(m, std::fabs(v));
  }
  return m;
}

}  // namespace camid
