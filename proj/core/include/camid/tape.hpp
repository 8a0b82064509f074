#pragma once

#include <cstdint>
#include <vector>

#include "camid/tensor.hpp"

namespace camid {

/// Forward-pass mode for layers with train/eval behaviour (batch norm).
enum class Mode { Train, Eval };

using ValueId = std::uint32_t;
inline constexpr ValueId kNoValue = 0xffffffffu;

enum class OpKind : std::uint8_t {
  Leaf,
  Constant,
  Conv2d,
  DepthwiseConv2d,
  BatchNorm2d,
  Linear,
  Matmul,
  Relu,
  Sigmoid,
  Gelu,
  Softmax,
  LayerNorm,
  Add,
  Mul,
  Scale,
  Reshape,
  Permute,
  Reindex,
  MeanAxis,
  MeanAll,
  SumAll,
  CrossEntropy,
};

struct NodeMeta {
  int stride = 1;
  int pad = 0;
  int axis = 0;
  double eps = 0.0;
  double factor = 1.0;
  Mode mode = Mode::Eval;
  bool keepdim = false;
  std::vector<int> axes;              // Permute: out axis i comes from in axis axes[i]
  std::vector<std::size_t> index_map; // Reindex: out[i] = in[index_map[i]]
  std::vector<int> labels;            // CrossEntropy
};

struct Node {
  OpKind kind = OpKind::Leaf;
  std::vector<ValueId> inputs;
  Tensor out;
  std::vector<Tensor> saved; // op byproducts needed by the backward pass
  NodeMeta meta;
};

/// Record of executed primitive ops with enough saved state to evaluate
/// vector-Jacobian products.
///
/// The tape owns every intermediate value of a forward evaluation; ops are
/// appended in execution order and backward() replays them in exact reverse
/// order, accumulating gradients additively whenever a value feeds several
/// consumers. A tape is single-use: backward() marks it consumed.
class Tape {
 public:
  /// Registers a differentiable input (parameter or network input).
  ValueId leaf(Tensor t);
  /// Registers a non-differentiable input (masks, fixed coefficient tensors).
  ValueId constant(Tensor t);

  const Tensor& val(ValueId id) const { return nodes_[id].out; }
  std::size_t num_nodes() const { return nodes_.size(); }
  const Node& node(ValueId id) const { return nodes_[id]; }

  /// Reverse-mode sweep from a scalar loss (seed gradient 1).
  void backward(ValueId loss);

  bool consumed() const { return consumed_; }

  /// Gradient accumulated for `id` by the last backward(); zeros if the
  /// node was not reached.
  const Tensor& grad(ValueId id);

  /// Smallest |x| over all elements fed into Relu nodes so far; +infinity
  /// when no Relu was recorded. Used to steer gradient checks away from
  /// the kink at zero.
  double min_abs_relu_input() const;

  // Used by op constructors in ops.cpp.
  ValueId push(Node n);
  Tensor& grad_buffer(ValueId id);

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_; // parallel to nodes_, lazily shaped
  bool consumed_ = false;
};

}  // namespace camid
