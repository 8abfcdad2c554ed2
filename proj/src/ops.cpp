#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "mpq/autodiff.hpp"
#include "mpq/errors.hpp"
#include "mpq/kernels/kernels.hpp"

namespace mpq::ad {
namespace {

using Grads = std::vector<Var>;

void require_same(const Var& a, const Var& b, const char* op) {
  require_same_shape(a.value(), b.value(), op);
}

Tensor like(const Var& v) { return Tensor(v.shape()); }

// (rows, cols) of a tensor whose rows run along axis 0; rank 1 is one row.
std::pair<std::size_t, std::size_t> row_layout(const Shape& s) {
  if (s.empty()) return {1, 1};
  if (s.size() == 1) return {1, s[0]};
  const std::size_t n = s[0];
  return {n, n ? shape_numel(s) / n : 0};
}

// (outer, channels, inner) of a tensor split at axis 1.
struct ChannelLayout {
  std::size_t outer, channels, inner;
};

ChannelLayout channel_layout(const Shape& s) {
  if (s.size() < 2) throw DimensionError("channel op needs rank >= 2, got " + shape_str(s));
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], s[1], inner};
}

}  // namespace

std::size_t conv_out_dim(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw DimensionError("stride must be positive");
  if (kernel == 0) throw DimensionError("window must be positive");
  if (in + 2 * pad < kernel) {
    throw DimensionError("window " + std::to_string(kernel) + " larger than padded input " +
                         std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out = like(a);
  kernels::add(a.value().data(), b.value().data(), out.data());
  return a.tape().record(std::move(out), {a, b}, [](const Var& g, const Var&) {
    return Grads{g, g};
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out = like(a);
  kernels::sub(a.value().data(), b.value().data(), out.data());
  return a.tape().record(std::move(out), {a, b}, [](const Var& g, const Var&) {
    return Grads{g, scale(g, -1.0)};
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out = like(a);
  kernels::mul(a.value().data(), b.value().data(), out.data());
  return a.tape().record(std::move(out), {a, b}, [a, b](const Var& g, const Var&) {
    Grads r(2);
    if (a.requires_grad()) r[0] = mul(g, b);
    if (b.requires_grad()) r[1] = mul(g, a);
    return r;
  });
}

Var scale(const Var& a, double s) {
  Tensor out = like(a);
  kernels::scale(a.value().data(), s, out.data());
  return a.tape().record(std::move(out), {a}, [s](const Var& g, const Var&) {
    return Grads{scale(g, s)};
  });
}

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2) throw DimensionError("matmul: operands must be rank 2");
  const std::size_t m = trans_a ? sa[1] : sa[0];
  const std::size_t k = trans_a ? sa[0] : sa[1];
  const std::size_t kb = trans_b ? sb[1] : sb[0];
  const std::size_t n = trans_b ? sb[0] : sb[1];
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(sa) + " x " +
                         shape_str(sb));
  }
  Tensor out(Shape{m, n});
  kernels::gemm(trans_a, trans_b, m, n, k, a.value().data().data(), b.value().data().data(),
                out.data().data());
  return a.tape().record(std::move(out), {a, b}, [a, b, trans_a, trans_b](const Var& g, const Var&) {
    Grads r(2);
    const bool ga = a.requires_grad();
    const bool gb = b.requires_grad();
    if (!trans_a && !trans_b) {
      if (ga) r[0] = matmul(g, b, false, true);
      if (gb) r[1] = matmul(a, g, true, false);
    } else if (!trans_a && trans_b) {
      if (ga) r[0] = matmul(g, b, false, false);
      if (gb) r[1] = matmul(g, a, true, false);
    } else if (trans_a && !trans_b) {
      if (ga) r[0] = matmul(b, g, false, true);
      if (gb) r[1] = matmul(a, g, false, false);
    } else {
      if (ga) r[0] = matmul(b, g, true, true);
      if (gb) r[1] = matmul(g, a, true, true);
    }
    return r;
  });
}

namespace {

// value = x > 0 ? g : 0 for a fixed x. Linear and self-adjoint in g.
Var relu_gate(const Var& g, std::shared_ptr<const Tensor> x) {
  Tensor out = like(g);
  kernels::relu_mask(x->data(), g.value().data(), out.data());
  return g.tape().record(std::move(out), {g}, [x](const Var& gg, const Var&) {
    return Grads{relu_gate(gg, x)};
  });
}

}  // namespace

Var relu(const Var& x) {
  Tensor out = like(x);
  kernels::relu(x.value().data(), out.data());
  auto saved = std::make_shared<const Tensor>(x.value());
  return x.tape().record(std::move(out), {x}, [saved](const Var& g, const Var&) {
    return Grads{relu_gate(g, saved)};
  });
}

Var clamp(const Var& x, double lo, double hi) {
  if (!(lo <= hi)) throw ValidationError("clamp: lo must not exceed hi");
  Tensor out = like(x);
  auto mask = std::make_shared<Tensor>(x.shape());
  const auto in = x.value().data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::min(std::max(in[i], lo), hi);
    (*mask)[i] = (in[i] > lo && in[i] < hi) ? 1.0 : 0.0;
  }
  return x.tape().record(std::move(out), {x}, [mask](const Var& g, const Var&) {
    return Grads{mul(g, g.tape().constant(*mask))};
  });
}

Var exp(const Var& x) {
  Tensor out = like(x);
  const auto in = x.value().data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::exp(in[i]);
  return x.tape().record(std::move(out), {x}, [](const Var& g, const Var& self) {
    return Grads{mul(g, self)};
  });
}

Var reciprocal(const Var& x) {
  Tensor out = like(x);
  const auto in = x.value().data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] == 0.0 ? 0.0 : 1.0 / in[i];
  return x.tape().record(std::move(out), {x}, [](const Var& g, const Var& self) {
    return Grads{scale(mul(g, mul(self, self)), -1.0)};
  });
}

Var sqrt(const Var& x) {
  Tensor out = like(x);
  const auto in = x.value().data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] < 0.0) throw ValidationError("sqrt of negative value");
    out[i] = std::sqrt(in[i]);
  }
  return x.tape().record(std::move(out), {x}, [](const Var& g, const Var& self) {
    return Grads{scale(mul(g, reciprocal(self)), 0.5)};
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  Shape in_shape = x.shape();
  return x.tape().record(std::move(out), {x}, [in_shape](const Var& g, const Var&) {
    return Grads{reshape(g, in_shape)};
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  Shape in_shape = x.shape();
  return x.tape().record(Tensor::scalar(s), {x}, [in_shape](const Var& g, const Var&) {
    return Grads{broadcast_scalar(g, in_shape)};
  });
}

Var broadcast_scalar(const Var& s, Shape shape) {
  Tensor out(std::move(shape), s.value().item());
  Shape in_shape = s.shape();
  return s.tape().record(std::move(out), {s}, [in_shape](const Var& g, const Var&) {
    return Grads{reshape(sum(g), in_shape)};
  });
}

Var row_sum(const Var& x) {
  if (x.shape().size() != 2) throw DimensionError("row_sum expects rank 2");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  Tensor out(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x.value().at(i, j);
    out[i] = s;
  }
  return x.tape().record(std::move(out), {x}, [c](const Var& g, const Var&) {
    return Grads{row_broadcast(g, c)};
  });
}

Var row_broadcast(const Var& x, std::size_t cols) {
  if (x.shape().size() != 2 || x.shape()[1] != 1) {
    throw DimensionError("row_broadcast expects [n,1], got " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape()[0];
  Tensor out(Shape{n, cols});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = x.value()[i];
  return x.tape().record(std::move(out), {x}, [](const Var& g, const Var&) {
    return Grads{row_sum(g)};
  });
}

Var channel_broadcast(const Var& b, Shape shape) {
  const ChannelLayout l = channel_layout(shape);
  if (b.shape().size() != 1 || b.shape()[0] != l.channels) {
    throw DimensionError("channel_broadcast: vector " + shape_str(b.shape()) +
                         " does not match axis 1 of " + shape_str(shape));
  }
  Tensor out(std::move(shape));
  const auto bv = b.value().data();
  auto o = out.data();
  std::size_t idx = 0;
  for (std::size_t n = 0; n < l.outer; ++n)
    for (std::size_t c = 0; c < l.channels; ++c)
      for (std::size_t i = 0; i < l.inner; ++i) o[idx++] = bv[c];
  return b.tape().record(std::move(out), {b}, [](const Var& g, const Var&) {
    return Grads{channel_sum(g)};
  });
}

Var channel_sum(const Var& x) {
  const ChannelLayout l = channel_layout(x.shape());
  Tensor out(Shape{l.channels});
  const auto in = x.value().data();
  std::size_t idx = 0;
  for (std::size_t n = 0; n < l.outer; ++n)
    for (std::size_t c = 0; c < l.channels; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < l.inner; ++i) s += in[idx++];
      out[c] += s;
    }
  Shape in_shape = x.shape();
  return x.tape().record(std::move(out), {x}, [in_shape](const Var& g, const Var&) {
    return Grads{channel_broadcast(g, in_shape)};
  });
}

Var add_bias(const Var& x, const Var& b) { return add(x, channel_broadcast(b, x.shape())); }

Var log_softmax(const Var& logits) {
  if (logits.shape().size() != 2) throw DimensionError("log_softmax expects [n,C]");
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, logits.value().at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(logits.value().at(i, j) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = logits.value().at(i, j) - lse;
  }
  return logits.tape().record(std::move(out), {logits}, [c](const Var& g, const Var& self) {
    return Grads{sub(g, mul(exp(self), row_broadcast(row_sum(g), c)))};
  });
}

Var softmax(const Var& logits) { return exp(log_softmax(logits)); }

// ---------------------------------------------------------------------------
// Convolution. Per sample: cols[cin*kh*kw, oh*ow] = im2col(x), y = K·cols.

namespace {

struct ConvDims {
  std::size_t n, cin, h, w, cout, kh, kw, oh, ow;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t spatial() const { return oh * ow; }
};

ConvDims conv_dims(const Shape& x, const Shape& k, Conv2dGeometry geo) {
  if (x.size() != 4 || k.size() != 4) {
    throw DimensionError("conv2d expects rank-4 input and kernel, got " + shape_str(x) + " and " +
                         shape_str(k));
  }
  if (x[1] != k[1]) {
    throw DimensionError("conv2d: input channels " + std::to_string(x[1]) +
                         " != kernel channels " + std::to_string(k[1]));
  }
  ConvDims d{x[0], x[1], x[2], x[3], k[0], k[2], k[3], 0, 0};
  d.oh = conv_out_dim(d.h, d.kh, geo.stride, geo.pad);
  d.ow = conv_out_dim(d.w, d.kw, geo.stride, geo.pad);
  return d;
}

void im2col(const double* x, const ConvDims& d, Conv2dGeometry geo, double* cols) {
  const std::size_t sp = d.spatial();
  for (std::size_t c = 0; c < d.cin; ++c)
    for (std::size_t i = 0; i < d.kh; ++i)
      for (std::size_t j = 0; j < d.kw; ++j) {
        double* row = cols + ((c * d.kh + i) * d.kw + j) * sp;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const std::ptrdiff_t y = std::ptrdiff_t(oy * geo.stride + i) - std::ptrdiff_t(geo.pad);
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::ptrdiff_t xx =
                std::ptrdiff_t(ox * geo.stride + j) - std::ptrdiff_t(geo.pad);
            const bool inside = y >= 0 && xx >= 0 && y < std::ptrdiff_t(d.h) &&
                                xx < std::ptrdiff_t(d.w);
            row[oy * d.ow + ox] = inside ? x[(c * d.h + y) * d.w + xx] : 0.0;
          }
        }
      }
}

void col2im(const double* cols, const ConvDims& d, Conv2dGeometry geo, double* x) {
  const std::size_t sp = d.spatial();
  for (std::size_t c = 0; c < d.cin; ++c)
    for (std::size_t i = 0; i < d.kh; ++i)
      for (std::size_t j = 0; j < d.kw; ++j) {
        const double* row = cols + ((c * d.kh + i) * d.kw + j) * sp;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const std::ptrdiff_t y = std::ptrdiff_t(oy * geo.stride + i) - std::ptrdiff_t(geo.pad);
          if (y < 0 || y >= std::ptrdiff_t(d.h)) continue;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::ptrdiff_t xx =
                std::ptrdiff_t(ox * geo.stride + j) - std::ptrdiff_t(geo.pad);
            if (xx < 0 || xx >= std::ptrdiff_t(d.w)) continue;
            x[(c * d.h + y) * d.w + xx] += row[oy * d.ow + ox];
          }
        }
      }
}

Tensor conv_forward(const Tensor& x, const Tensor& k, const ConvDims& d, Conv2dGeometry geo) {
  Tensor out(Shape{d.n, d.cout, d.oh, d.ow});
  std::vector<double> cols(d.patch() * d.spatial());
  for (std::size_t s = 0; s < d.n; ++s) {
    im2col(x.data().data() + s * d.cin * d.h * d.w, d, geo, cols.data());
    kernels::gemm(false, false, d.cout, d.spatial(), d.patch(), k.data().data(), cols.data(),
                  out.data().data() + s * d.cout * d.spatial());
  }
  return out;
}

Tensor conv_input_adjoint(const Tensor& g, const Tensor& k, const ConvDims& d,
                          Conv2dGeometry geo) {
  Tensor out(Shape{d.n, d.cin, d.h, d.w});
  std::vector<double> cols(d.patch() * d.spatial());
  for (std::size_t s = 0; s < d.n; ++s) {
    kernels::gemm(true, false, d.patch(), d.spatial(), d.cout, k.data().data(),
                  g.data().data() + s * d.cout * d.spatial(), cols.data());
    col2im(cols.data(), d, geo, out.data().data() + s * d.cin * d.h * d.w);
  }
  return out;
}

Tensor conv_kernel_adjoint(const Tensor& x, const Tensor& g, const ConvDims& d,
                           Conv2dGeometry geo) {
  Tensor out(Shape{d.cout, d.cin, d.kh, d.kw});
  std::vector<double> cols(d.patch() * d.spatial());
  for (std::size_t s = 0; s < d.n; ++s) {
    im2col(x.data().data() + s * d.cin * d.h * d.w, d, geo, cols.data());
    kernels::gemm(false, true, d.cout, d.patch(), d.spatial(),
                  g.data().data() + s * d.cout * d.spatial(), cols.data(), out.data().data(),
                  s > 0);
  }
  return out;
}

void require_grad_shape(const Var& g, const ConvDims& d) {
  const Shape expect{d.n, d.cout, d.oh, d.ow};
  if (g.shape() != expect) {
    throw DimensionError("conv2d adjoint: gradient shape " + shape_str(g.shape()) +
                         " != expected " + shape_str(expect));
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& kernel, Conv2dGeometry geo) {
  const ConvDims d = conv_dims(x.shape(), kernel.shape(), geo);
  Tensor out = conv_forward(x.value(), kernel.value(), d, geo);
  Shape xs = x.shape(), ks = kernel.shape();
  return x.tape().record(std::move(out), {x, kernel},
                         [x, kernel, xs, ks, geo](const Var& g, const Var&) {
                           Grads r(2);
                           if (x.requires_grad()) r[0] = conv2d_input_grad(g, kernel, xs, geo);
                           if (kernel.requires_grad()) r[1] = conv2d_kernel_grad(x, g, ks, geo);
                           return r;
                         });
}

Var conv2d_input_grad(const Var& grad_out, const Var& kernel, const Shape& input_shape,
                      Conv2dGeometry geo) {
  const ConvDims d = conv_dims(input_shape, kernel.shape(), geo);
  require_grad_shape(grad_out, d);
  Tensor out = conv_input_adjoint(grad_out.value(), kernel.value(), d, geo);
  return grad_out.tape().record(std::move(out), {grad_out, kernel},
                                [grad_out, kernel, geo](const Var& gg, const Var&) {
                                  Grads r(2);
                                  if (grad_out.requires_grad()) r[0] = conv2d(gg, kernel, geo);
                                  if (kernel.requires_grad())
                                    r[1] = conv2d_kernel_grad(gg, grad_out, kernel.shape(), geo);
                                  return r;
                                });
}

Var conv2d_kernel_grad(const Var& x, const Var& grad_out, const Shape& kernel_shape,
                       Conv2dGeometry geo) {
  const ConvDims d = conv_dims(x.shape(), kernel_shape, geo);
  require_grad_shape(grad_out, d);
  Tensor out = conv_kernel_adjoint(x.value(), grad_out.value(), d, geo);
  Shape xs = x.shape();
  return x.tape().record(std::move(out), {x, grad_out},
                         [x, grad_out, xs, geo](const Var& gg, const Var&) {
                           Grads r(2);
                           if (x.requires_grad()) r[0] = conv2d_input_grad(grad_out, gg, xs, geo);
                           if (grad_out.requires_grad()) r[1] = conv2d(x, gg, geo);
                           return r;
                         });
}

// ---------------------------------------------------------------------------
// Index maps and pooling.

Var gather(const Var& x, IndexMap index, Shape out_shape) {
  if (shape_numel(out_shape) != index->size()) throw DimensionError("gather: index size mismatch");
  Tensor out(std::move(out_shape));
  const auto in = x.value().data();
  for (std::size_t i = 0; i < index->size(); ++i) out[i] = in[(*index)[i]];
  Shape in_shape = x.shape();
  return x.tape().record(std::move(out), {x}, [index, in_shape](const Var& g, const Var&) {
    return Grads{scatter_add(g, index, in_shape)};
  });
}

Var scatter_add(const Var& x, IndexMap index, Shape out_shape) {
  if (x.value().numel() != index->size()) throw DimensionError("scatter_add: index size mismatch");
  Tensor out(std::move(out_shape));
  const auto in = x.value().data();
  for (std::size_t i = 0; i < index->size(); ++i) out[(*index)[i]] += in[i];
  Shape in_shape = x.shape();
  return x.tape().record(std::move(out), {x}, [index, in_shape](const Var& g, const Var&) {
    return Grads{gather(g, index, in_shape)};
  });
}

namespace {

struct PoolDims {
  std::size_t n, c, h, w, oh, ow;
};

PoolDims pool_dims(const Shape& s, std::size_t window, std::size_t stride) {
  if (s.size() != 4) throw DimensionError("pool2d expects rank-4 input, got " + shape_str(s));
  if (window > s[2] || window > s[3]) {
    throw DimensionError("pool window " + std::to_string(window) + " exceeds input " +
                         shape_str(s));
  }
  return {s[0], s[1], s[2], s[3], conv_out_dim(s[2], window, stride, 0),
          conv_out_dim(s[3], window, stride, 0)};
}

}  // namespace

Var max_pool2d(const Var& x, std::size_t window, std::size_t stride) {
  const PoolDims d = pool_dims(x.shape(), window, stride);
  auto index = std::make_shared<std::vector<std::size_t>>();
  index->reserve(d.n * d.c * d.oh * d.ow);
  const auto in = x.value().data();
  for (std::size_t p = 0; p < d.n * d.c; ++p) {
    const std::size_t base = p * d.h * d.w;
    for (std::size_t oy = 0; oy < d.oh; ++oy)
      for (std::size_t ox = 0; ox < d.ow; ++ox) {
        std::size_t best = base + oy * stride * d.w + ox * stride;
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t at = base + (oy * stride + i) * d.w + ox * stride + j;
            if (in[at] > in[best]) best = at;
          }
        index->push_back(best);
      }
  }
  return gather(x, std::move(index), Shape{d.n, d.c, d.oh, d.ow});
}

namespace {

// out (pooled) = mean of windows of in, or its adjoint when `adjoint`.
void avg_pool_apply(const double* in, double* out, const PoolDims& d, std::size_t window,
                    std::size_t stride, bool adjoint) {
  const double inv = 1.0 / double(window * window);
  for (std::size_t p = 0; p < d.n * d.c; ++p) {
    const std::size_t ibase = p * d.h * d.w;
    const std::size_t obase = p * d.oh * d.ow;
    for (std::size_t oy = 0; oy < d.oh; ++oy)
      for (std::size_t ox = 0; ox < d.ow; ++ox) {
        const std::size_t o = obase + oy * d.ow + ox;
        if (adjoint) {
          const double v = in[o] * inv;
          for (std::size_t i = 0; i < window; ++i)
            for (std::size_t j = 0; j < window; ++j)
              out[ibase + (oy * stride + i) * d.w + ox * stride + j] += v;
        } else {
          double s = 0.0;
          for (std::size_t i = 0; i < window; ++i)
            for (std::size_t j = 0; j < window; ++j)
              s += in[ibase + (oy * stride + i) * d.w + ox * stride + j];
          out[o] = s * inv;
        }
      }
  }
}

}  // namespace

Var avg_pool2d(const Var& x, std::size_t window, std::size_t stride) {
  const PoolDims d = pool_dims(x.shape(), window, stride);
  Tensor out(Shape{d.n, d.c, d.oh, d.ow});
  avg_pool_apply(x.value().data().data(), out.data().data(), d, window, stride, false);
  Shape in_shape = x.shape();
  return x.tape().record(std::move(out), {x}, [in_shape, window, stride](const Var& g, const Var&) {
    return Grads{avg_pool2d_adjoint(g, in_shape, window, stride)};
  });
}

Var avg_pool2d_adjoint(const Var& g, const Shape& input_shape, std::size_t window,
                       std::size_t stride) {
  const PoolDims d = pool_dims(input_shape, window, stride);
  if (g.shape() != Shape{d.n, d.c, d.oh, d.ow}) {
    throw DimensionError("avg_pool2d adjoint: gradient shape " + shape_str(g.shape()));
  }
  Tensor out(input_shape);
  avg_pool_apply(g.value().data().data(), out.data().data(), d, window, stride, true);
  return g.tape().record(std::move(out), {g}, [window, stride](const Var& gg, const Var&) {
    return Grads{avg_pool2d(gg, window, stride)};
  });
}

// ---------------------------------------------------------------------------

Var straight_through(const Var& x, const Var& err, Tensor value) {
  require_same(x, err, "straight_through");
  require_same_shape(x.value(), value, "straight_through");
  return x.tape().record(std::move(value), {x, err}, [](const Var& g, const Var&) {
    return Grads{g, g};
  });
}

Var softmax_crossentropy(const Var& logits, const Tensor& targets) {
  require_same_shape(logits.value(), targets, "softmax_crossentropy");
  if (targets.rank() != 2) throw DimensionError("softmax_crossentropy expects [n,C]");
  const std::size_t n = targets.dim(0), c = targets.dim(1);
  if (n == 0) throw ValidationError("softmax_crossentropy: empty batch");
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double t = targets.at(i, j);
      if (!(t >= 0.0)) {
        throw ValidationError("softmax_crossentropy: negative target in row " + std::to_string(i));
      }
      s += t;
    }
    if (std::fabs(s - 1.0) > 1e-9) {
      throw ValidationError("softmax_crossentropy: target row " + std::to_string(i) +
                            " sums to " + std::to_string(s));
    }
  }
  Tape& tape = logits.tape();
  const Var t = tape.constant(targets);
  return scale(sum(mul(t, log_softmax(logits))), -1.0 / double(n));
}

Var euclidean_loss(const Var& a, const Var& b) {
  require_same(a, b, "euclidean_loss");
  const auto [rows, cols] = row_layout(a.shape());
  if (rows == 0) throw ValidationError("euclidean_loss: empty batch");
  const Var d = reshape(sub(a, b), Shape{rows, cols});
  const Var norms = sqrt(row_sum(mul(d, d)));
  return scale(sum(norms), 1.0 / double(rows));
}

Var batchnorm_inference(const Var& x, const Tensor& gamma, const Tensor& beta, const Tensor& mean,
                        const Tensor& var, double eps) {
  const ChannelLayout l = channel_layout(x.shape());
  for (const Tensor* t : {&gamma, &beta, &mean, &var}) {
    if (t->rank() != 1 || t->dim(0) != l.channels) {
      throw DimensionError("batchnorm: parameter shape " + shape_str(t->shape()) +
                           " does not match channels " + std::to_string(l.channels));
    }
  }
  Tensor mult(Shape{l.channels}), shift(Shape{l.channels});
  for (std::size_t c = 0; c < l.channels; ++c) {
    mult[c] = gamma[c] / std::sqrt(var[c] + eps);
    shift[c] = beta[c] - mean[c] * mult[c];
  }
  Tape& tape = x.tape();
  const Var scaled = mul(x, channel_broadcast(tape.constant(std::move(mult)), x.shape()));
  return add_bias(scaled, tape.constant(std::move(shift)));
}

}  // namespace mpq::ad
