#pragma once

#include <vector>

#include "camid/tape.hpp"
#include "camid/tensor.hpp"

namespace camid::ops {

/// 2-D convolution with cross-correlation semantics (no kernel flip).
/// x: [B,Cin,H,W], w: [Cout,Cin,m,m] with m odd, optional bias [Cout].
/// Output spatial size: H' = floor((H + 2p - m)/s) + 1.
ValueId conv2d(Tape& t, ValueId x, ValueId w, ValueId bias, int stride, int pad);

/// Channel-wise convolution. x: [B,C,H,W], w: [C,1,m,m], optional bias [C].
ValueId depthwise_conv2d(Tape& t, ValueId x, ValueId w, ValueId bias, int stride, int pad);

/// Batch normalization over (B,H,W) per channel.
///
/// Train mode normalizes with batch statistics and, when `update_running`
/// is set, folds them into the running stats in place with the given
/// momentum (running var uses the unbiased estimate). Eval mode normalizes
/// with the running stats, which must then be provided.
ValueId batchnorm2d(Tape& t, ValueId x, ValueId gamma, ValueId beta, Tensor* running_mean,
                    Tensor* running_var, Mode mode, double eps = 1e-5, double momentum = 0.1,
                    bool update_running = true);

ValueId relu(Tape& t, ValueId x);
ValueId sigmoid(Tape& t, ValueId x);
/// Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
ValueId gelu(Tape& t, ValueId x);

/// Numerically stable softmax along `axis` (negative axes count from the
/// end). Each line sums to 1; the max is subtracted before exponentiation.
ValueId softmax(Tape& t, ValueId x, int axis);

/// Layer normalization along `axis` with per-position gamma/beta of length
/// shape[axis].
ValueId layernorm(Tape& t, ValueId x, ValueId gamma, ValueId beta, int axis, double eps = 1e-5);

/// Mean over the channel axis, keeping it: [B,C,H,W] -> [B,1,H,W].
ValueId avgpool_channels(Tape& t, ValueId x);

/// Affine map over the last axis. x: [...,F], w: [F,G], optional bias [G].
ValueId linear(Tape& t, ValueId x, ValueId w, ValueId bias);

/// Batched matrix product over the last two axes; leading axes must match.
ValueId matmul(Tape& t, ValueId a, ValueId b);

/// Elementwise add/multiply with numpy-style right-aligned broadcasting.
ValueId add(Tape& t, ValueId a, ValueId b);
ValueId mul(Tape& t, ValueId a, ValueId b);

ValueId scale(Tape& t, ValueId x, double factor);

ValueId reshape(Tape& t, ValueId x, Shape new_shape);

/// out axis i takes its extent and data from input axis axes[i].
ValueId permute(Tape& t, ValueId x, std::vector<int> axes);

/// Generic gather: out flat index i reads input flat index index_map[i].
/// The backward pass scatter-adds, so duplicate sources accumulate.
ValueId reindex(Tape& t, ValueId x, Shape out_shape, std::vector<std::size_t> index_map);

/// Slice of length `len` starting at `start` along `axis`.
ValueId narrow(Tape& t, ValueId x, int axis, std::size_t start, std::size_t len);

/// Mean along one axis, optionally keeping it with extent 1.
ValueId mean_axis(Tape& t, ValueId x, int axis, bool keepdim);

ValueId sum_all(Tape& t, ValueId x);
ValueId mean_all(Tape& t, ValueId x);

/// Mean over the batch of -log softmax(logits)[label]; stable log-sum-exp.
/// logits: [B,K], labels in [0,K).
ValueId cross_entropy(Tape& t, ValueId logits, const std::vector<int>& labels);

/// sum(x * w) with constant weights; well-conditioned scalar objective for
/// gradient checks.
ValueId weighted_sum(Tape& t, ValueId x, Tensor weights);

}  // namespace camid::ops
