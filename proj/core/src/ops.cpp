#include "camid/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "camid/errors.hpp"

namespace camid {
namespace {

int normalize_axis(int axis, std::size_t ndim, const char* op) {
  int nd = static_cast<int>(ndim);
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) {
    throw ShapeError(std::string(op) + ": invalid axis " + std::to_string(axis) + " for rank " +
                     std::to_string(nd));
  }
  return axis;
}

struct AxisLines {
  std::size_t outer, len, inner;
};

AxisLines axis_lines(const Shape& s, int axis) {
  AxisLines l{1, s[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) l.outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) l.inner *= s[i];
  return l;
}

// Right-aligned broadcast of `in` against `out`: element stride per out axis
// (0 where the input is broadcast along that axis).
std::vector<std::size_t> broadcast_strides(const Shape& out, const Shape& in, const char* op) {
  const auto in_strides = row_major_strides(in);
  std::vector<std::size_t> strides(out.size(), 0);
  const std::size_t off = out.size() - in.size();
  if (in.size() > out.size()) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(in) + " to " +
                     shape_str(out));
  }
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t o = off + i;
    if (in[i] == out[o]) {
      strides[o] = in_strides[i];
    } else if (in[i] == 1) {
      strides[o] = 0;
    } else {
      throw ShapeError(std::string(op) + ": shape " + shape_str(in) +
                       " does not broadcast to " + shape_str(out) + " at axis " +
                       std::to_string(o));
    }
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t ea = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t eb = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b) + " at axis " + std::to_string(i));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Odometer walk over `shape`, invoking f(flat, off_a, off_b) with offsets
// advanced by the given per-axis strides.
template <typename F>
void for_each_2(const Shape& shape, const std::vector<std::size_t>& sa,
                const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = shape_product(shape);
  if (total == 0) return;
  const std::size_t nd = shape.size();
  if (nd == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(nd, 0);
  std::size_t offa = 0, offb = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    f(flat, offa, offb);
    for (std::size_t ax = nd; ax-- > 0;) {
      ++idx[ax];
      offa += sa[ax];
      offb += sb[ax];
      if (idx[ax] < shape[ax]) break;
      offa -= sa[ax] * shape[ax];
      offb -= sb[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
}

struct ConvDims {
  std::size_t B, Ci, H, W, Co, m, Ho, Wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad,
                   bool depthwise, const char* op) {
  if (x.ndim() != 4) {
    throw ShapeError(std::string(op) + ": input must be [B,C,H,W], got " + shape_str(x.shape));
  }
  if (w.ndim() != 4) {
    throw ShapeError(std::string(op) + ": weight must be rank 4, got " + shape_str(w.shape));
  }
  ConvDims d{};
  d.B = x.shape[0];
  d.Ci = x.shape[1];
  d.H = x.shape[2];
  d.W = x.shape[3];
  d.Co = w.shape[0];
  d.m = w.shape[2];
  if (w.shape[2] != w.shape[3]) {
    throw ShapeError(std::string(op) + ": kernel must be square, got " + shape_str(w.shape));
  }
  if (d.m % 2 == 0) {
    throw ShapeError(std::string(op) + ": kernel size must be odd, got " + std::to_string(d.m));
  }
  if (depthwise) {
    if (w.shape[0] != d.Ci || w.shape[1] != 1) {
      throw ShapeError(std::string(op) + ": weight " + shape_str(w.shape) +
                       " must be [C,1,m,m] with C == input channels " + std::to_string(d.Ci));
    }
    d.Co = d.Ci;
  } else if (w.shape[1] != d.Ci) {
    throw ShapeError(std::string(op) + ": weight input channels " + std::to_string(w.shape[1]) +
                     " != input channels " + std::to_string(d.Ci));
  }
  if (stride < 1) throw ShapeError(std::string(op) + ": stride must be >= 1");
  if (pad < 0) throw ShapeError(std::string(op) + ": padding must be >= 0");
  const std::size_t p = static_cast<std::size_t>(pad);
  if (d.H + 2 * p < d.m || d.W + 2 * p < d.m) {
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(d.m) +
                     " exceeds padded input " + std::to_string(d.H + 2 * p) + "x" +
                     std::to_string(d.W + 2 * p));
  }
  if (bias && !(bias->ndim() == 1 && bias->shape[0] == d.Co)) {
    throw ShapeError(std::string(op) + ": bias must be [" + std::to_string(d.Co) + "], got " +
                     shape_str(bias->shape));
  }
  d.Ho = (d.H + 2 * p - d.m) / static_cast<std::size_t>(stride) + 1;
  d.Wo = (d.W + 2 * p - d.m) / static_cast<std::size_t>(stride) + 1;
  return d;
}

// Shared dense/depthwise convolution kernel. For depthwise, ci iterates a
// single channel equal to co.
void conv_forward(const ConvDims& d, bool depthwise, int stride, int pad, const double* X,
                  const double* Wt, const double* Bv, double* Y) {
  const std::size_t s = static_cast<std::size_t>(stride);
  const long p = pad;
  const std::size_t cg = depthwise ? 1 : d.Ci; // channels per output group
  for (std::size_t b = 0; b < d.B; ++b) {
    for (std::size_t co = 0; co < d.Co; ++co) {
      const double bias = Bv ? Bv[co] : 0.0;
      double* yrow = Y + ((b * d.Co + co) * d.Ho) * d.Wo;
      for (std::size_t oy = 0; oy < d.Ho; ++oy) {
        const long y0 = static_cast<long>(oy * s) - p;
        const std::size_t ky0 = static_cast<std::size_t>(std::max(0L, -y0));
        const std::size_t ky1 = std::min(d.m, static_cast<std::size_t>(
                                                  std::max(0L, static_cast<long>(d.H) - y0)));
        for (std::size_t ox = 0; ox < d.Wo; ++ox) {
          const long x0 = static_cast<long>(ox * s) - p;
          const std::size_t kx0 = static_cast<std::size_t>(std::max(0L, -x0));
          const std::size_t kx1 = std::min(d.m, static_cast<std::size_t>(std::max(
                                                    0L, static_cast<long>(d.W) - x0)));
          double acc = bias;
          for (std::size_t g = 0; g < cg; ++g) {
            const std::size_t ci = depthwise ? co : g;
            const double* xc = X + ((b * d.Ci + ci) * d.H) * d.W;
            const double* wc = Wt + ((co * cg + g) * d.m) * d.m;
            for (std::size_t ky = ky0; ky < ky1; ++ky) {
              const double* xr = xc + static_cast<std::size_t>(y0 + static_cast<long>(ky)) * d.W +
                                 static_cast<std::size_t>(x0 + static_cast<long>(kx0));
              const double* wr = wc + ky * d.m + kx0;
              for (std::size_t kx = kx0; kx < kx1; ++kx) {
                acc += xr[kx - kx0] * wr[kx - kx0];
              }
            }
          }
          yrow[oy * d.Wo + ox] = acc;
        }
      }
    }
  }
}

void conv_backward(const ConvDims& d, bool depthwise, int stride, int pad, const double* X,
                   const double* Wt, const double* G, double* GX, double* GW, double* GB) {
  const std::size_t s = static_cast<std::size_t>(stride);
  const long p = pad;
  const std::size_t cg = depthwise ? 1 : d.Ci;
  for (std::size_t b = 0; b < d.B; ++b) {
    for (std::size_t co = 0; co < d.Co; ++co) {
      const double* grow = G + ((b * d.Co + co) * d.Ho) * d.Wo;
      for (std::size_t oy = 0; oy < d.Ho; ++oy) {
        const long y0 = static_cast<long>(oy * s) - p;
        const std::size_t ky0 = static_cast<std::size_t>(std::max(0L, -y0));
        const std::size_t ky1 = std::min(d.m, static_cast<std::size_t>(
                                                  std::max(0L, static_cast<long>(d.H) - y0)));
        for (std::size_t ox = 0; ox < d.Wo; ++ox) {
          const double g = grow[oy * d.Wo + ox];
          if (g == 0.0) continue;
          if (GB) GB[co] += g;
          const long x0 = static_cast<long>(ox * s) - p;
          const std::size_t kx0 = static_cast<std::size_t>(std::max(0L, -x0));
          const std::size_t kx1 = std::min(d.m, static_cast<std::size_t>(std::max(
                                                    0L, static_cast<long>(d.W) - x0)));
          for (std::size_t gch = 0; gch < cg; ++gch) {
            const std::size_t ci = depthwise ? co : gch;
            const std::size_t xbase = ((b * d.Ci + ci) * d.H) * d.W;
            const std::size_t wbase = ((co * cg + gch) * d.m) * d.m;
            for (std::size_t ky = ky0; ky < ky1; ++ky) {
              const std::size_t row =
                  xbase + static_cast<std::size_t>(y0 + static_cast<long>(ky)) * d.W +
                  static_cast<std::size_t>(x0 + static_cast<long>(kx0));
              const std::size_t wrow = wbase + ky * d.m + kx0;
              for (std::size_t kx = 0; kx < kx1 - kx0; ++kx) {
                GX[row + kx] += g * Wt[wrow + kx];
                GW[wrow + kx] += g * X[row + kx];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

namespace ops {

static ValueId conv_common(Tape& t, ValueId x, ValueId w, ValueId bias, int stride, int pad,
                           bool depthwise) {
  const char* opname = depthwise ? "depthwise_conv2d" : "conv2d";
  const Tensor& xt = t.val(x);
  const Tensor& wt = t.val(w);
  const Tensor* bt = bias == kNoValue ? nullptr : &t.val(bias);
  const ConvDims d = conv_dims(xt, wt, bt, stride, pad, depthwise, opname);

  Node n;
  n.kind = depthwise ? OpKind::DepthwiseConv2d : OpKind::Conv2d;
  n.inputs = {x, w};
  if (bt) n.inputs.push_back(bias);
  n.meta.stride = stride;
  n.meta.pad = pad;
  n.out = Tensor::zeros({d.B, d.Co, d.Ho, d.Wo});
  conv_forward(d, depthwise, stride, pad, xt.data.data(), wt.data.data(),
               bt ? bt->data.data() : nullptr, n.out.data.data());
  return t.push(std::move(n));
}

ValueId conv2d(Tape& t, ValueId x, ValueId w, ValueId bias, int stride, int pad) {
  return conv_common(t, x, w, bias, stride, pad, false);
}

ValueId depthwise_conv2d(Tape& t, ValueId x, ValueId w, ValueId bias, int stride, int pad) {
  return conv_common(t, x, w, bias, stride, pad, true);
}

ValueId batchnorm2d(Tape& t, ValueId x, ValueId gamma, ValueId beta, Tensor* running_mean,
                    Tensor* running_var, Mode mode, double eps, double momentum,
                    bool update_running) {
  const Tensor& xt = t.val(x);
  if (xt.ndim() != 4) {
    throw ShapeError("batchnorm2d: input must be [B,C,H,W], got " + shape_str(xt.shape));
  }
  if (eps <= 0.0) throw UsageError("batchnorm2d: epsilon must be > 0");
  const std::size_t B = xt.shape[0], C = xt.shape[1], H = xt.shape[2], W = xt.shape[3];
  const Tensor& gt = t.val(gamma);
  const Tensor& bt = t.val(beta);
  if (gt.size() != C || bt.size() != C) {
    throw ShapeError("batchnorm2d: gamma/beta must have " + std::to_string(C) + " entries, got " +
                     shape_str(gt.shape) + "/" + shape_str(bt.shape));
  }
  const std::size_t N = B * H * W;

  Tensor mean({C});
  Tensor invstd({C});
  if (mode == Mode::Train) {
    if (N == 0) throw DataError("batchnorm2d: zero-size batch in train mode");
    const std::size_t plane = H * W;
    for (std::size_t c = 0; c < C; ++c) {
      double sum = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = xt.data.data() + ((b * C + c) * plane);
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(N);
      double ss = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = xt.data.data() + ((b * C + c) * plane);
        for (std::size_t i = 0; i < plane; ++i) {
          const double dlt = p[i] - mu;
          ss += dlt * dlt;
        }
      }
      const double var = ss / static_cast<double>(N);
      mean[c] = mu;
      invstd[c] = 1.0 / std::sqrt(var + eps);
      if (update_running && running_mean && running_var) {
        const double unbiased =
            N > 1 ? var * static_cast<double>(N) / static_cast<double>(N - 1) : var;
        (*running_mean)[c] = (1.0 - momentum) * (*running_mean)[c] + momentum * mu;
        (*running_var)[c] = (1.0 - momentum) * (*running_var)[c] + momentum * unbiased;
      }
    }
  } else {
    if (!running_mean || !running_var) {
      throw UsageError("batchnorm2d: eval mode requires running statistics");
    }
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = (*running_mean)[c];
      invstd[c] = 1.0 / std::sqrt((*running_var)[c] + eps);
    }
  }

  Node n;
  n.kind = OpKind::BatchNorm2d;
  n.inputs = {x, gamma, beta};
  n.meta.mode = mode;
  n.meta.eps = eps;
  n.out = Tensor::zeros(xt.shape);
  const std::size_t plane = H * W;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double mu = mean[c], is = invstd[c], ga = gt[c], be = bt[c];
      const double* p = xt.data.data() + ((b * C + c) * plane);
      double* q = n.out.data.data() + ((b * C + c) * plane);
      for (std::size_t i = 0; i < plane; ++i) q[i] = ga * (p[i] - mu) * is + be;
    }
  }
  n.saved.push_back(std::move(mean));
  n.saved.push_back(std::move(invstd));
  return t.push(std::move(n));
}

static ValueId unary(Tape& t, ValueId x, OpKind kind) {
  const Tensor& xt = t.val(x);
  Node n;
  n.kind = kind;
  n.inputs = {x};
  n.out = Tensor::zeros(xt.shape);
  const std::size_t sz = xt.size();
  switch (kind) {
    case OpKind::Relu:
      for (std::size_t i = 0; i < sz; ++i) n.out[i] = xt[i] > 0.0 ? xt[i] : 0.0;
      break;
    case OpKind::Sigmoid:
      for (std::size_t i = 0; i < sz; ++i) {
        const double v = xt[i];
        if (v >= 0.0) {
          n.out[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
          const double e = std::exp(v);
          n.out[i] = e / (1.0 + e);
        }
      }
      break;
    case OpKind::Gelu:
      for (std::size_t i = 0; i < sz; ++i) {
        const double v = xt[i];
        n.out[i] = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
      }
      break;
    default:
      throw Error("unary: unsupported op");
  }
  return t.push(std::move(n));
}

ValueId relu(Tape& t, ValueId x) { return unary(t, x, OpKind::Relu); }
ValueId sigmoid(Tape& t, ValueId x) { return unary(t, x, OpKind::Sigmoid); }
ValueId gelu(Tape& t, ValueId x) { return unary(t, x, OpKind::Gelu); }

ValueId softmax(Tape& t, ValueId x, int axis) {
  const Tensor& xt = t.val(x);
  const int ax = normalize_axis(axis, xt.ndim(), "softmax");
  const AxisLines l = axis_lines(xt.shape, ax);
  Node n;
  n.kind = OpKind::Softmax;
  n.inputs = {x};
  n.meta.axis = ax;
  n.out = Tensor::zeros(xt.shape);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t s = 0; s < l.inner; ++s) {
      const std::size_t base = o * l.len * l.inner + s;
      double mx = xt[base];
      for (std::size_t i = 1; i < l.len; ++i) mx = std::max(mx, xt[base + i * l.inner]);
      double sum = 0.0;
      for (std::size_t i = 0; i < l.len; ++i) {
        const double e = std::exp(xt[base + i * l.inner] - mx);
        n.out[base + i * l.inner] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::size_t i = 0; i < l.len; ++i) n.out[base + i * l.inner] *= inv;
    }
  }
  return t.push(std::move(n));
}

ValueId layernorm(Tape& t, ValueId x, ValueId gamma, ValueId beta, int axis, double eps) {
  const Tensor& xt = t.val(x);
  const int ax = normalize_axis(axis, xt.ndim(), "layernorm");
  const AxisLines l = axis_lines(xt.shape, ax);
  const Tensor& gt = t.val(gamma);
  const Tensor& bt = t.val(beta);
  if (gt.size() != l.len || bt.size() != l.len) {
    throw ShapeError("layernorm: gamma/beta must have " + std::to_string(l.len) +
                     " entries, got " + shape_str(gt.shape) + "/" + shape_str(bt.shape));
  }
  Node n;
  n.kind = OpKind::LayerNorm;
  n.inputs = {x, gamma, beta};
  n.meta.axis = ax;
  n.meta.eps = eps;
  n.out = Tensor::zeros(xt.shape);
  Tensor mean({l.outer * l.inner});
  Tensor invstd({l.outer * l.inner});
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t s = 0; s < l.inner; ++s) {
      const std::size_t base = o * l.len * l.inner + s;
      const std::size_t line = o * l.inner + s;
      double sum = 0.0;
      for (std::size_t i = 0; i < l.len; ++i) sum += xt[base + i * l.inner];
      const double mu = sum / static_cast<double>(l.len);
      double ss = 0.0;
      for (std::size_t i = 0; i < l.len; ++i) {
        const double d = xt[base + i * l.inner] - mu;
        ss += d * d;
      }
      const double is = 1.0 / std::sqrt(ss / static_cast<double>(l.len) + eps);
      mean[line] = mu;
      invstd[line] = is;
      for (std::size_t i = 0; i < l.len; ++i) {
        n.out[base + i * l.inner] = gt[i] * (xt[base + i * l.inner] - mu) * is + bt[i];
      }
    }
  }
  n.saved.push_back(std::move(mean));
  n.saved.push_back(std::move(invstd));
  return t.push(std::move(n));
}

ValueId avgpool_channels(Tape& t, ValueId x) {
  const Tensor& xt = t.val(x);
  if (xt.ndim() != 4 || xt.shape[1] < 1) {
    throw ShapeError("avgpool_channels: input must be [B,C,H,W] with C >= 1, got " +
                     shape_str(xt.shape));
  }
  return mean_axis(t, x, 1, /*keepdim=*/true);
}

ValueId linear(Tape& t, ValueId x, ValueId w, ValueId bias) {
  const Tensor& xt = t.val(x);
  const Tensor& wt = t.val(w);
  if (xt.ndim() < 1 || wt.ndim() != 2) {
    throw ShapeError("linear: need x [...,F] and w [F,G], got " + shape_str(xt.shape) + " and " +
                     shape_str(wt.shape));
  }
  const std::size_t F = xt.shape.back();
  const std::size_t G = wt.shape[1];
  if (wt.shape[0] != F) {
    throw ShapeError("linear: weight rows " + std::to_string(wt.shape[0]) +
                     " != input features " + std::to_string(F));
  }
  const Tensor* bt = bias == kNoValue ? nullptr : &t.val(bias);
  if (bt && bt->size() != G) {
    throw ShapeError("linear: bias must have " + std::to_string(G) + " entries, got " +
                     shape_str(bt->shape));
  }
  const std::size_t R = xt.size() / F;

  Node n;
  n.kind = OpKind::Linear;
  n.inputs = {x, w};
  if (bt) n.inputs.push_back(bias);
  Shape out_shape = xt.shape;
  out_shape.back() = G;
  n.out = Tensor::zeros(out_shape);
  const double* X = xt.data.data();
  const double* W = wt.data.data();
  double* Y = n.out.data.data();
  for (std::size_t r = 0; r < R; ++r) {
    double* yr = Y + r * G;
    if (bt) {
      for (std::size_t g = 0; g < G; ++g) yr[g] = (*bt)[g];
    }
    const double* xr = X + r * F;
    for (std::size_t f = 0; f < F; ++f) {
      const double xv = xr[f];
      const double* wr = W + f * G;
      for (std::size_t g = 0; g < G; ++g) yr[g] += xv * wr[g];
    }
  }
  return t.push(std::move(n));
}

ValueId matmul(Tape& t, ValueId a, ValueId b) {
  const Tensor& at = t.val(a);
  const Tensor& bt = t.val(b);
  if (at.ndim() < 2 || bt.ndim() != at.ndim()) {
    throw ShapeError("matmul: ranks must match and be >= 2, got " + shape_str(at.shape) +
                     " and " + shape_str(bt.shape));
  }
  const std::size_t nd = at.ndim();
  for (std::size_t i = 0; i + 2 < nd; ++i) {
    if (at.shape[i] != bt.shape[i]) {
      throw ShapeError("matmul: leading axis " + std::to_string(i) + " mismatch: " +
                       shape_str(at.shape) + " vs " + shape_str(bt.shape));
    }
  }
  const std::size_t N = at.shape[nd - 2], K = at.shape[nd - 1];
  const std::size_t K2 = bt.shape[nd - 2], M = bt.shape[nd - 1];
  if (K != K2) {
    throw ShapeError("matmul: inner dimensions differ: " + std::to_string(K) + " vs " +
                     std::to_string(K2));
  }
  std::size_t P = 1;
  for (std::size_t i = 0; i + 2 < nd; ++i) P *= at.shape[i];

  Node n;
  n.kind = OpKind::Matmul;
  n.inputs = {a, b};
  Shape out_shape = at.shape;
  out_shape[nd - 1] = M;
  n.out = Tensor::zeros(out_shape);
  const double* A = at.data.data();
  const double* B = bt.data.data();
  double* C = n.out.data.data();
  for (std::size_t p = 0; p < P; ++p) {
    const double* Ap = A + p * N * K;
    const double* Bp = B + p * K * M;
    double* Cp = C + p * N * M;
    for (std::size_t i = 0; i < N; ++i) {
      double* Cr = Cp + i * M;
      for (std::size_t k = 0; k < K; ++k) {
        const double av = Ap[i * K + k];
        const double* Br = Bp + k * M;
        for (std::size_t j = 0; j < M; ++j) Cr[j] += av * Br[j];
      }
    }
  }
  return t.push(std::move(n));
}

static ValueId binary(Tape& t, ValueId a, ValueId b, OpKind kind) {
  const char* opname = kind == OpKind::Add ? "add" : "mul";
  const Tensor& at = t.val(a);
  const Tensor& bt = t.val(b);
  Node n;
  n.kind = kind;
  n.inputs = {a, b};
  const Shape out_shape = broadcast_shape(at.shape, bt.shape, opname);
  n.out = Tensor::zeros(out_shape);
  const auto sa = broadcast_strides(out_shape, at.shape, opname);
  const auto sb = broadcast_strides(out_shape, bt.shape, opname);
  double* Y = n.out.data.data();
  const double* A = at.data.data();
  const double* B = bt.data.data();
  if (kind == OpKind::Add) {
    for_each_2(out_shape, sa, sb,
               [&](std::size_t f, std::size_t oa, std::size_t ob) { Y[f] = A[oa] + B[ob]; });
  } else {
    for_each_2(out_shape, sa, sb,
               [&](std::size_t f, std::size_t oa, std::size_t ob) { Y[f] = A[oa] * B[ob]; });
  }
  return t.push(std::move(n));
}

ValueId add(Tape& t, ValueId a, ValueId b) { return binary(t, a, b, OpKind::Add); }
ValueId mul(Tape& t, ValueId a, ValueId b) { return binary(t, a, b, OpKind::Mul); }

ValueId scale(Tape& t, ValueId x, double factor) {
  const Tensor& xt = t.val(x);
  Node n;
  n.kind = OpKind::Scale;
  n.inputs = {x};
  n.meta.factor = factor;
  n.out = Tensor::zeros(xt.shape);
  for (std::size_t i = 0; i < xt.size(); ++i) n.out[i] = factor * xt[i];
  return t.push(std::move(n));
}

ValueId reshape(Tape& t, ValueId x, Shape new_shape) {
  const Tensor& xt = t.val(x);
  if (shape_product(new_shape) != xt.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(xt.shape) + " as " +
                     shape_str(new_shape));
  }
  Node n;
  n.kind = OpKind::Reshape;
  n.inputs = {x};
  n.out = Tensor(std::move(new_shape), xt.data);
  return t.push(std::move(n));
}

ValueId permute(Tape& t, ValueId x, std::vector<int> axes) {
  const Tensor& xt = t.val(x);
  const std::size_t nd = xt.ndim();
  if (axes.size() != nd) {
    throw ShapeError("permute: axes size " + std::to_string(axes.size()) + " != rank " +
                     std::to_string(nd));
  }
  std::vector<bool> seen(nd, false);
  for (int a : axes) {
    if (a < 0 || static_cast<std::size_t>(a) >= nd || seen[static_cast<std::size_t>(a)]) {
      throw ShapeError("permute: axes must be a permutation of 0.." + std::to_string(nd - 1));
    }
    seen[static_cast<std::size_t>(a)] = true;
  }
  Shape out_shape(nd);
  const auto in_strides = row_major_strides(xt.shape);
  std::vector<std::size_t> walk(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    out_shape[i] = xt.shape[static_cast<std::size_t>(axes[i])];
    walk[i] = in_strides[static_cast<std::size_t>(axes[i])];
  }
  Node n;
  n.kind = OpKind::Permute;
  n.inputs = {x};
  n.meta.axes = std::move(axes);
  n.out = Tensor::zeros(out_shape);
  double* Y = n.out.data.data();
  const double* X = xt.data.data();
  const std::vector<std::size_t> zero(nd, 0);
  for_each_2(out_shape, walk, zero,
             [&](std::size_t f, std::size_t off, std::size_t) { Y[f] = X[off]; });
  return t.push(std::move(n));
}

ValueId reindex(Tape& t, ValueId x, Shape out_shape, std::vector<std::size_t> index_map) {
  const Tensor& xt = t.val(x);
  if (index_map.size() != shape_product(out_shape)) {
    throw ShapeError("reindex: map size " + std::to_string(index_map.size()) +
                     " != output size " + std::to_string(shape_product(out_shape)));
  }
  Node n;
  n.kind = OpKind::Reindex;
  n.inputs = {x};
  n.out = Tensor::zeros(out_shape);
  for (std::size_t i = 0; i < index_map.size(); ++i) {
    if (index_map[i] >= xt.size()) {
      throw ShapeError("reindex: map entry " + std::to_string(index_map[i]) +
                       " out of range for input size " + std::to_string(xt.size()));
    }
    n.out[i] = xt[index_map[i]];
  }
  n.meta.index_map = std::move(index_map);
  return t.push(std::move(n));
}

ValueId narrow(Tape& t, ValueId x, int axis, std::size_t start, std::size_t len) {
  const Tensor& xt = t.val(x);
  const int ax = normalize_axis(axis, xt.ndim(), "narrow");
  const std::size_t extent = xt.shape[static_cast<std::size_t>(ax)];
  if (start + len > extent) {
    throw ShapeError("narrow: slice [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") exceeds extent " + std::to_string(extent));
  }
  Shape out_shape = xt.shape;
  out_shape[static_cast<std::size_t>(ax)] = len;
  const AxisLines l = axis_lines(xt.shape, ax);
  std::vector<std::size_t> map;
  map.reserve(shape_product(out_shape));
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = start; i < start + len; ++i) {
      const std::size_t base = (o * l.len + i) * l.inner;
      for (std::size_t s = 0; s < l.inner; ++s) map.push_back(base + s);
    }
  }
  return reindex(t, x, std::move(out_shape), std::move(map));
}

ValueId mean_axis(Tape& t, ValueId x, int axis, bool keepdim) {
  const Tensor& xt = t.val(x);
  const int ax = normalize_axis(axis, xt.ndim(), "mean_axis");
  const AxisLines l = axis_lines(xt.shape, ax);
  Shape out_shape;
  for (std::size_t i = 0; i < xt.ndim(); ++i) {
    if (static_cast<int>(i) == ax) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(xt.shape[i]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Node n;
  n.kind = OpKind::MeanAxis;
  n.inputs = {x};
  n.meta.axis = ax;
  n.meta.keepdim = keepdim;
  n.out = Tensor::zeros(out_shape);
  const double inv = 1.0 / static_cast<double>(l.len);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t s = 0; s < l.inner; ++s) {
      const std::size_t base = o * l.len * l.inner + s;
      double sum = 0.0;
      for (std::size_t i = 0; i < l.len; ++i) sum += xt[base + i * l.inner];
      n.out[o * l.inner + s] = sum * inv;
    }
  }
  return t.push(std::move(n));
}

static ValueId reduce_all(Tape& t, ValueId x, OpKind kind) {
  const Tensor& xt = t.val(x);
  Node n;
  n.kind = kind;
  n.inputs = {x};
  n.out = Tensor::zeros({1});
  double sum = 0.0;
  for (double v : xt.data) sum += v;
  n.out[0] = kind == OpKind::MeanAll ? sum / static_cast<double>(xt.size()) : sum;
  return t.push(std::move(n));
}

ValueId sum_all(Tape& t, ValueId x) { return reduce_all(t, x, OpKind::SumAll); }
ValueId mean_all(Tape& t, ValueId x) { return reduce_all(t, x, OpKind::MeanAll); }

ValueId cross_entropy(Tape& t, ValueId logits, const std::vector<int>& labels) {
  const Tensor& lt = t.val(logits);
  if (lt.ndim() != 2) {
    throw ShapeError("cross_entropy: logits must be [B,K], got " + shape_str(lt.shape));
  }
  const std::size_t B = lt.shape[0], K = lt.shape[1];
  if (labels.size() != B) {
    throw ShapeError("cross_entropy: got " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(B));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0," +
                      std::to_string(K) + ")");
    }
  }
  Node n;
  n.kind = OpKind::CrossEntropy;
  n.inputs = {logits};
  n.meta.labels = labels;
  n.out = Tensor::zeros({1});
  Tensor probs(lt.shape);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = lt.data.data() + b * K;
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(row[k] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t k = 0; k < K; ++k) probs[b * K + k] = std::exp(row[k] - lse);
    total += lse - row[static_cast<std::size_t>(labels[b])];
  }
  n.out[0] = total / static_cast<double>(B);
  n.saved.push_back(std::move(probs));
  return t.push(std::move(n));
}

ValueId weighted_sum(Tape& t, ValueId x, Tensor weights) {
  if (weights.shape != t.val(x).shape) {
    throw ShapeError("weighted_sum: weights " + shape_str(weights.shape) + " != value " +
                     shape_str(t.val(x).shape));
  }
  const ValueId w = t.constant(std::move(weights));
  return sum_all(t, mul(t, x, w));
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Reverse sweep.
// ---------------------------------------------------------------------------

void Tape::backward(ValueId loss) {
  if (consumed_) throw Error("Tape::backward: tape already consumed");
  if (loss >= nodes_.size()) throw Error("Tape::backward: bad loss id");
  if (nodes_[loss].out.size() != 1) {
    throw ShapeError("Tape::backward: loss must be scalar, got " +
                     shape_str(nodes_[loss].out.shape));
  }
  grads_.assign(nodes_.size(), Tensor());
  grad_buffer(loss)[0] = 1.0;

  for (std::size_t raw = nodes_.size(); raw-- > 0;) {
    const ValueId id = static_cast<ValueId>(raw);
    Node& n = nodes_[id];
    if (grads_[id].data.empty()) continue; // node did not contribute to the loss
    const Tensor& g = grads_[id];

    switch (n.kind) {
      case OpKind::Leaf:
      case OpKind::Constant:
        break;

      case OpKind::Conv2d:
      case OpKind::DepthwiseConv2d: {
        const bool dw = n.kind == OpKind::DepthwiseConv2d;
        const Tensor& xt = nodes_[n.inputs[0]].out;
        const Tensor& wt = nodes_[n.inputs[1]].out;
        const bool has_bias = n.inputs.size() == 3;
        const ConvDims d = conv_dims(xt, wt, nullptr, n.meta.stride, n.meta.pad, dw, "conv");
        Tensor& gx = grad_buffer(n.inputs[0]);
        Tensor& gw = grad_buffer(n.inputs[1]);
        double* gb = has_bias ? grad_buffer(n.inputs[2]).data.data() : nullptr;
        conv_backward(d, dw, n.meta.stride, n.meta.pad, xt.data.data(), wt.data.data(),
                      g.data.data(), gx.data.data(), gw.data.data(), gb);
        break;
      }

      case OpKind::BatchNorm2d: {
        const Tensor& xt = nodes_[n.inputs[0]].out;
        const Tensor& gt = nodes_[n.inputs[1]].out;
        const Tensor& mean = n.saved[0];
        const Tensor& invstd = n.saved[1];
        const std::size_t B = xt.shape[0], C = xt.shape[1], plane = xt.shape[2] * xt.shape[3];
        const std::size_t N = B * plane;
        Tensor& gx = grad_buffer(n.inputs[0]);
        Tensor& gga = grad_buffer(n.inputs[1]);
        Tensor& gbe = grad_buffer(n.inputs[2]);
        for (std::size_t c = 0; c < C; ++c) {
          const double mu = mean[c], is = invstd[c], ga = gt[c];
          double sg = 0.0, sgx = 0.0;
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t off = (b * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              const double gv = g[off + i];
              sg += gv;
              sgx += gv * (xt[off + i] - mu) * is;
            }
          }
          gga[c] += sgx;
          gbe[c] += sg;
          if (n.meta.mode == Mode::Train) {
            const double k = ga * is / static_cast<double>(N);
            for (std::size_t b = 0; b < B; ++b) {
              const std::size_t off = (b * C + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                const double xhat = (xt[off + i] - mu) * is;
                gx[off + i] += k * (static_cast<double>(N) * g[off + i] - sg - xhat * sgx);
              }
            }
          } else {
            const double k = ga * is;
            for (std::size_t b = 0; b < B; ++b) {
              const std::size_t off = (b * C + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) gx[off + i] += k * g[off + i];
            }
          }
        }
        break;
      }

      case OpKind::Linear: {
        const Tensor& xt = nodes_[n.inputs[0]].out;
        const Tensor& wt = nodes_[n.inputs[1]].out;
        const std::size_t F = xt.shape.back(), G = wt.shape[1];
        const std::size_t R = xt.size() / F;
        Tensor& gx = grad_buffer(n.inputs[0]);
        Tensor& gw = grad_buffer(n.inputs[1]);
        const double* X = xt.data.data();
        const double* W = wt.data.data();
        const double* Gd = g.data.data();
        for (std::size_t r = 0; r < R; ++r) {
          const double* gr = Gd + r * G;
          const double* xr = X + r * F;
          double* gxr = gx.data.data() + r * F;
          for (std::size_t f = 0; f < F; ++f) {
            const double* wr = W + f * G;
            double* gwr = gw.data.data() + f * G;
            double acc = 0.0;
            const double xv = xr[f];
            for (std::size_t gg = 0; gg < G; ++gg) {
              acc += gr[gg] * wr[gg];
              gwr[gg] += xv * gr[gg];
            }
            gxr[f] += acc;
          }
        }
        if (n.inputs.size() == 3) {
          Tensor& gb = grad_buffer(n.inputs[2]);
          for (std::size_t r = 0; r < R; ++r) {
            const double* gr = Gd + r * G;
            for (std::size_t gg = 0; gg < G; ++gg) gb[gg] += gr[gg];
          }
        }
        break;
      }

      case OpKind::Matmul: {
        const Tensor& at = nodes_[n.inputs[0]].out;
        const Tensor& bt = nodes_[n.inputs[1]].out;
        const std::size_t nd = at.ndim();
        const std::size_t N = at.shape[nd - 2], K = at.shape[nd - 1], M = bt.shape[nd - 1];
        std::size_t P = 1;
        for (std::size_t i = 0; i + 2 < nd; ++i) P *= at.shape[i];
        Tensor& ga = grad_buffer(n.inputs[0]);
        Tensor& gb = grad_buffer(n.inputs[1]);
        const double* A = at.data.data();
        const double* B = bt.data.data();
        const double* Gd = g.data.data();
        for (std::size_t p = 0; p < P; ++p) {
          const double* Ap = A + p * N * K;
          const double* Bp = B + p * K * M;
          const double* Gp = Gd + p * N * M;
          double* gAp = ga.data.data() + p * N * K;
          double* gBp = gb.data.data() + p * K * M;
          for (std::size_t i = 0; i < N; ++i) {
            const double* Gr = Gp + i * M;
            for (std::size_t k = 0; k < K; ++k) {
              const double* Br = Bp + k * M;
              double* gBr = gBp + k * M;
              const double av = Ap[i * K + k];
              double acc = 0.0;
              for (std::size_t j = 0; j < M; ++j) {
                acc += Gr[j] * Br[j];
                gBr[j] += av * Gr[j];
              }
              gAp[i * K + k] += acc;
            }
          }
        }
        break;
      }

      case OpKind::Relu: {
        const Tensor& xt = nodes_[n.inputs[0]].out;
        Tensor& gx = grad_buffer(n.inputs[0]);
        // Subgradient at exactly 0 is defined as 0.
        for (std::size_t i = 0; i < xt.size(); ++i) gx[i] += xt[i] > 0.0 ? g[i] : 0.0;
        break;
      }

      case OpKind::Sigmoid: {
        Tensor& gx = grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < n.out.size(); ++i) {
          gx[i] += g[i] * n.out[i] * (1.0 - n.out[i]);
        }
        break;
      }

      case OpKind::Gelu: {
        const Tensor& xt = nodes_[n.inputs[0]].out;
        Tensor& gx = grad_buffer(n.inputs[0]);
        constexpr double kInvSqrt2Pi = 0.3989422804014327;
        for (std::size_t i = 0; i < xt.size(); ++i) {
          const double v = xt[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          gx[i] += g[i] * (cdf + v * pdf);
        }
        break;
      }

      case OpKind::Softmax: {
        const AxisLines l = axis_lines(n.out.shape, n.meta.axis);
        Tensor& gx = grad_buffer(n.inputs[0]);
        for (std::size_t o = 0; o < l.outer; ++o) {
          for (std::size_t s = 0; s < l.inner; ++s) {
            const std::size_t base = o * l.len * l.inner + s;
            double dot = 0.0;
            for (std::size_t i = 0; i < l.len; ++i) {
              dot += g[base + i * l.inner] * n.out[base + i * l.inner];
            }
            for (std::size_t i = 0; i < l.len; ++i) {
              const std::size_t k = base + i * l.inner;
              gx[k] += n.out[k] * (g[k] - dot);
            }
          }
        }
        break;
      }

      case OpKind::LayerNorm: {
        const Tensor& xt = nodes_[n.inputs[0]].out;
        const Tensor& gt = nodes_[n.inputs[1]].out;
        const Tensor& mean = n.saved[0];
        const Tensor& invstd = n.saved[1];
        const AxisLines l = axis_lines(xt.shape, n.meta.axis);
        Tensor& gx = grad_buffer(n.inputs[0]);
        Tensor& gga = grad_buffer(n.inputs[1]);
        Tensor& gbe = grad_buffer(n.inputs[2]);
        const double L = static_cast<double>(l.len);
        for (std::size_t o = 0; o < l.outer; ++o) {
          for (std::size_t s = 0; s < l.inner; ++s) {
            const std::size_t base = o * l.len * l.inner + s;
            const std::size_t line = o * l.inner + s;
            const double mu = mean[line], is = invstd[line];
            double sh = 0.0, shx = 0.0;
            for (std::size_t i = 0; i < l.len; ++i) {
              const std::size_t k = base + i * l.inner;
              const double xhat = (xt[k] - mu) * is;
              const double h = g[k] * gt[i];
              sh += h;
              shx += h * xhat;
              gga[i] += g[k] * xhat;
              gbe[i] += g[k];
            }
            for (std::size_t i = 0; i < l.len; ++i) {
              const std::size_t k = base + i * l.inner;
              const double xhat = (xt[k] - mu) * is;
              const double h = g[k] * gt[i];
              gx[k] += is / L * (L * h - sh - xhat * shx);
            }
          }
        }
        break;
      }

      case OpKind::Add:
      case OpKind::Mul: {
        const Tensor& at = nodes_[n.inputs[0]].out;
        const Tensor& bt = nodes_[n.inputs[1]].out;
        Tensor& ga = grad_buffer(n.inputs[0]);
        Tensor& gb = grad_buffer(n.inputs[1]);
        const auto sa = broadcast_strides(n.out.shape, at.shape, "add/mul");
        const auto sb = broadcast_strides(n.out.shape, bt.shape, "add/mul");
        const double* A = at.data.data();
        const double* B = bt.data.data();
        if (n.kind == OpKind::Add) {
          for_each_2(n.out.shape, sa, sb, [&](std::size_t f, std::size_t oa, std::size_t ob) {
            ga[oa] += g[f];
            gb[ob] += g[f];
          });
        } else {
          for_each_2(n.out.shape, sa, sb, [&](std::size_t f, std::size_t oa, std::size_t ob) {
            ga[oa] += g[f] * B[ob];
            gb[ob] += g[f] * A[oa];
          });
        }
        break;
      }

      case OpKind::Scale: {
        Tensor& gx = grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += n.meta.factor * g[i];
        break;
      }

      case OpKind::Reshape: {
        Tensor& gx = grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        break;
      }

      case OpKind::Permute: {
        const Tensor& xt = nodes_[n.inputs[0]].out;
        Tensor& gx = grad_buffer(n.inputs[0]);
        const auto in_strides = row_major_strides(xt.shape);
        std::vector<std::size_t> walk(n.meta.axes.size());
        for (std::size_t i = 0; i < n.meta.axes.size(); ++i) {
          walk[i] = in_strides[static_cast<std::size_t>(n.meta.axes[i])];
        }
        const std::vector<std::size_t> zero(walk.size(), 0);
        for_each_2(n.out.shape, walk, zero,
                   [&](std::size_t f, std::size_t off, std::size_t) { gx[off] += g[f]; });
        break;
      }

      case OpKind::Reindex: {
        Tensor& gx = grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[n.meta.index_map[i]] += g[i];
        break;
      }

      case OpKind::MeanAxis: {
        const Tensor& xt = nodes_[n.inputs[0]].out;
        const AxisLines l = axis_lines(xt.shape, n.meta.axis);
        Tensor& gx = grad_buffer(n.inputs[0]);
        const double inv = 1.0 / static_cast<double>(l.len);
        for (std::size_t o = 0; o < l.outer; ++o) {
          for (std::size_t s = 0; s < l.inner; ++s) {
            const double gv = g[o * l.inner + s] * inv;
            const std::size_t base = o * l.len * l.inner + s;
            for (std::size_t i = 0; i < l.len; ++i) gx[base + i * l.inner] += gv;
          }
        }
        break;
      }

      case OpKind::SumAll:
      case OpKind::MeanAll: {
        const Tensor& xt = nodes_[n.inputs[0]].out;
        Tensor& gx = grad_buffer(n.inputs[0]);
        const double gv =
            n.kind == OpKind::MeanAll ? g[0] / static_cast<double>(xt.size()) : g[0];
        for (std::size_t i = 0; i < xt.size(); ++i) gx[i] += gv;
        break;
      }

      case OpKind::CrossEntropy: {
        const Tensor& probs = n.saved[0];
        const std::size_t B = probs.shape[0], K = probs.shape[1];
        Tensor& gx = grad_buffer(n.inputs[0]);
        const double gv = g[0] / static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t y = static_cast<std::size_t>(n.meta.labels[b]);
          for (std::size_t k = 0; k < K; ++k) {
            gx[b * K + k] += gv * (probs[b * K + k] - (k == y ? 1.0 : 0.0));
          }
        }
        break;
      }
    }
  }
  consumed_ = true;
}

}  // namespace camid
