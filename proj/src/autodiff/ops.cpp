#include <algorithm>
#include <cmath>
#include <limits>

#include "cdkd/autodiff.hpp"
#include "cdkd/errors.hpp"
#include "cdkd/kernels.hpp"

namespace cdkd::ad {

namespace {

using NodePtrs = std::vector<std::shared_ptr<Node>>;

// Output tensor without construction-time validation; record_primitive
// checks finiteness with an op-specific message.
Tensor raw(Shape shape, std::vector<double> values) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return Tensor(std::move(n));
}

std::size_t resolve_axis(int axis, std::size_t rank) {
  const auto r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(a);
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(t.shape()));
  }
}

double checked_tau(const Tensor& tau) {
  if (tau.numel() != 1) throw ShapeError("temperature must be a scalar tensor");
  const double t = tau.item();
  if (!(t > 0.0)) throw NumericError("non-positive temperature for temperature-softmax");
  return t;
}

// Softmax of x / tau along the split axis.
std::vector<double> softmax_values(std::span<const double> x, const AxisSplit& s, double tau) {
  std::vector<double> y(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, x[base + l * s.inner] / tau);
      double total = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(x[base + l * s.inner] / tau - mx);
        y[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) y[base + l * s.inner] /= total;
    }
  }
  return y;
}

std::vector<double> log_softmax_values(std::span<const double> x, const AxisSplit& s,
                                       double tau) {
  std::vector<double> y(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, x[base + l * s.inner] / tau);
      double total = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) total += std::exp(x[base + l * s.inner] / tau - mx);
      const double lse = mx + std::log(total);
      for (std::size_t l = 0; l < s.len; ++l) {
        y[base + l * s.inner] = x[base + l * s.inner] / tau - lse;
      }
    }
  }
  return y;
}

Tensor softmax_impl(const Tensor& x, const Tensor* tau_tensor, double tau, int axis) {
  const auto ax = resolve_axis(axis, x.rank());
  const auto s = split_at(x.shape(), ax);
  auto out = raw(x.shape(), softmax_values(x.values(), s, tau));
  std::vector<Tensor> inputs{x};
  if (tau_tensor) inputs.push_back(*tau_tensor);
  return record_primitive(
      OpKind::kSoftmax, inputs, std::move(out),
      [s, tau](const NodePtrs& in, const Node& out) {
        const auto& xv = in[0]->value;
        const auto& y = out.value;
        const auto& g = out.grad;
        const bool want_x = in[0]->requires_grad;
        const bool want_tau = in.size() > 1 && in[1]->requires_grad;
        double dtau = 0.0;
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            double dot = 0.0;
            for (std::size_t l = 0; l < s.len; ++l) {
              dot += g[base + l * s.inner] * y[base + l * s.inner];
            }
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t k = base + l * s.inner;
              const double dz = y[k] * (g[k] - dot);  // d/d(x / tau)
              if (want_x) in[0]->grad[k] += dz / tau;
              if (want_tau) dtau += dz * (-xv[k] / (tau * tau));
            }
          }
        }
        if (want_tau) in[1]->grad[0] += dtau;
      });
}

Tensor log_softmax_impl(const Tensor& x, const Tensor* tau_tensor, double tau, int axis) {
  const auto ax = resolve_axis(axis, x.rank());
  const auto s = split_at(x.shape(), ax);
  auto out = raw(x.shape(), log_softmax_values(x.values(), s, tau));
  std::vector<Tensor> inputs{x};
  if (tau_tensor) inputs.push_back(*tau_tensor);
  return record_primitive(
      OpKind::kLogSoftmax, inputs, std::move(out),
      [s, tau](const NodePtrs& in, const Node& out) {
        const auto& xv = in[0]->value;
        const auto& y = out.value;
        const auto& g = out.grad;
        const bool want_x = in[0]->requires_grad;
        const bool want_tau = in.size() > 1 && in[1]->requires_grad;
        double dtau = 0.0;
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            double gsum = 0.0;
            for (std::size_t l = 0; l < s.len; ++l) gsum += g[base + l * s.inner];
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t k = base + l * s.inner;
              const double dz = g[k] - std::exp(y[k]) * gsum;
              if (want_x) in[0]->grad[k] += dz / tau;
              if (want_tau) dtau += dz * (-xv[k] / (tau * tau));
            }
          }
        }
        if (want_tau) in[1]->grad[0] += dtau;
      });
}

enum class Binary { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, Binary op) {
  const OpKind kind =
      op == Binary::kAdd ? OpKind::kAdd : (op == Binary::kSub ? OpKind::kSub : OpKind::kMul);
  bool a_scalar = false, b_scalar = false;
  if (a.shape() != b.shape()) {
    if (b.numel() == 1) {
      b_scalar = true;
    } else if (a.numel() == 1) {
      a_scalar = true;
    } else {
      throw ShapeError(std::string(op_name(kind)) + ": shape mismatch " + to_string(a.shape()) +
                       " vs " + to_string(b.shape()));
    }
  }
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double l = a_scalar ? av[0] : av[i];
    const double r = b_scalar ? bv[0] : bv[i];
    y[i] = op == Binary::kAdd ? l + r : (op == Binary::kSub ? l - r : l * r);
  }
  return record_primitive(
      kind, {a, b}, raw(shape, std::move(y)),
      [op, a_scalar, b_scalar, n](const NodePtrs& in, const Node& out) {
        const auto& g = out.grad;
        const auto& av = in[0]->value;
        const auto& bv = in[1]->value;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t ia = a_scalar ? 0 : i;
          const std::size_t ib = b_scalar ? 0 : i;
          double ga = g[i], gb = g[i];
          if (op == Binary::kSub) gb = -g[i];
          if (op == Binary::kMul) {
            ga = g[i] * bv[ib];
            gb = g[i] * av[ia];
          }
          if (in[0]->requires_grad) in[0]->grad[ia] += ga;
          if (in[1]->requires_grad) in[1]->grad[ib] += gb;
        }
      });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  std::vector<double> y(n * m);
  kernels::gemm(kernels::Trans::kNo, kernels::Trans::kNo, n, m, k, a.values(), b.values(), y,
                false);
  return record_primitive(OpKind::kMatmul, {a, b}, raw({n, m}, std::move(y)),
                          [n, k, m](const NodePtrs& in, const Node& out) {
                            using kernels::Trans;
                            if (in[0]->requires_grad) {
                              kernels::gemm(Trans::kNo, Trans::kYes, n, k, m, out.grad,
                                            in[1]->value, in[0]->grad, true);
                            }
                            if (in[1]->requires_grad) {
                              kernels::gemm(Trans::kYes, Trans::kNo, k, m, n, in[0]->value,
                                            out.grad, in[1]->grad, true);
                            }
                          });
}

Tensor bias_add(const Tensor& x, const Tensor& bias, int axis) {
  const auto ax = resolve_axis(axis, x.rank());
  require_rank(bias, 1, "bias_add");
  const auto s = split_at(x.shape(), ax);
  if (bias.dim(0) != s.len) {
    throw ShapeError("bias_add: bias length " + std::to_string(bias.dim(0)) +
                     " does not match axis size " + std::to_string(s.len));
  }
  std::vector<double> y(x.values().begin(), x.values().end());
  const auto bv = bias.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      double* row = y.data() + (o * s.len + l) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) row[i] += bv[l];
    }
  }
  return record_primitive(OpKind::kBiasAdd, {x, bias}, raw(x.shape(), std::move(y)),
                          [s](const NodePtrs& in, const Node& out) {
                            const auto& g = out.grad;
                            if (in[0]->requires_grad) {
                              for (std::size_t i = 0; i < g.size(); ++i) in[0]->grad[i] += g[i];
                            }
                            if (in[1]->requires_grad) {
                              for (std::size_t o = 0; o < s.outer; ++o) {
                                for (std::size_t l = 0; l < s.len; ++l) {
                                  const double* row = g.data() + (o * s.len + l) * s.inner;
                                  double acc = 0.0;
                                  for (std::size_t i = 0; i < s.inner; ++i) acc += row[i];
                                  in[1]->grad[l] += acc;
                                }
                              }
                            }
                          });
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  if (w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d: weight " + to_string(w.shape()) + " incompatible with input " +
                     to_string(x.shape()));
  }
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = x.dim(1);
  g.height = x.dim(2);
  g.width = x.dim(3);
  g.out_channels = w.dim(0);
  g.kernel = w.dim(2);
  g.stride = stride;
  g.pad = pad < 0 ? g.kernel / 2 : static_cast<std::size_t>(pad);
  if (!g.valid()) throw ShapeError("conv2d: kernel larger than padded input");
  std::vector<double> y(g.batch * g.out_channels * g.out_height() * g.out_width());
  kernels::conv2d_forward(g, x.values(), w.values(), y);
  return record_primitive(
      OpKind::kConv2d, {x, w},
      raw({g.batch, g.out_channels, g.out_height(), g.out_width()}, std::move(y)),
      [g](const NodePtrs& in, const Node& out) {
        std::span<double> dx, dw;
        if (in[0]->requires_grad) dx = in[0]->grad;
        if (in[1]->requires_grad) dw = in[1]->grad;
        kernels::conv2d_backward(g, in[0]->value, in[1]->value, out.grad, dx, dw);
      });
}

Tensor relu(const Tensor& x) {
  std::vector<double> y(x.values().begin(), x.values().end());
  for (auto& v : y) v = v > 0.0 ? v : 0.0;
  return record_primitive(OpKind::kRelu, {x}, raw(x.shape(), std::move(y)),
                          [](const NodePtrs& in, const Node& out) {
                            const auto& xv = in[0]->value;
                            for (std::size_t i = 0; i < xv.size(); ++i) {
                              if (xv[i] > 0.0) in[0]->grad[i] += out.grad[i];
                            }
                          });
}

Tensor softmax(const Tensor& x, const Tensor& tau, int axis) {
  return softmax_impl(x, &tau, checked_tau(tau), axis);
}

Tensor softmax(const Tensor& x, double tau, int axis) {
  if (!(tau > 0.0)) throw NumericError("non-positive temperature for temperature-softmax");
  return softmax_impl(x, nullptr, tau, axis);
}

Tensor log_softmax(const Tensor& x, const Tensor& tau, int axis) {
  return log_softmax_impl(x, &tau, checked_tau(tau), axis);
}

Tensor log_softmax(const Tensor& x, double tau, int axis) {
  if (!(tau > 0.0)) throw NumericError("non-positive temperature for temperature-softmax");
  return log_softmax_impl(x, nullptr, tau, axis);
}

Tensor log(const Tensor& x) {
  std::vector<double> y(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(xv[i] > 0.0)) throw NumericError("log: non-positive input");
    y[i] = std::log(xv[i]);
  }
  return record_primitive(OpKind::kLog, {x}, raw(x.shape(), std::move(y)),
                          [](const NodePtrs& in, const Node& out) {
                            const auto& xv = in[0]->value;
                            for (std::size_t i = 0; i < xv.size(); ++i) {
                              in[0]->grad[i] += out.grad[i] / xv[i];
                            }
                          });
}

Tensor xlogx(const Tensor& x) {
  std::vector<double> y(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (xv[i] < 0.0) throw NumericError("xlogx: negative input");
    y[i] = xv[i] > 0.0 ? xv[i] * std::log(xv[i]) : 0.0;
  }
  return record_primitive(OpKind::kXLogX, {x}, raw(x.shape(), std::move(y)),
                          [](const NodePtrs& in, const Node& out) {
                            const auto& xv = in[0]->value;
                            for (std::size_t i = 0; i < xv.size(); ++i) {
                              // Subgradient 0 at the boundary.
                              if (xv[i] > 0.0) in[0]->grad[i] += out.grad[i] * (std::log(xv[i]) + 1.0);
                            }
                          });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kAdd); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kSub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kMul); }

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> y(x.values().begin(), x.values().end());
  for (auto& v : y) v *= factor;
  return record_primitive(OpKind::kScale, {x}, raw(x.shape(), std::move(y)),
                          [factor](const NodePtrs& in, const Node& out) {
                            for (std::size_t i = 0; i < out.grad.size(); ++i) {
                              in[0]->grad[i] += factor * out.grad[i];
                            }
                          });
}

Tensor shift(const Tensor& x, double offset) {
  std::vector<double> y(x.values().begin(), x.values().end());
  for (auto& v : y) v += offset;
  return record_primitive(OpKind::kShift, {x}, raw(x.shape(), std::move(y)),
                          [](const NodePtrs& in, const Node& out) {
                            for (std::size_t i = 0; i < out.grad.size(); ++i) {
                              in[0]->grad[i] += out.grad[i];
                            }
                          });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.dim(d) != first[d]) {
        throw ShapeError("concat: shape mismatch " + to_string(p.shape()) + " vs " +
                         to_string(first));
      }
    }
    lens.push_back(p.dim(axis));
    out_shape[axis] += p.dim(axis);
  }
  const auto s = split_at(out_shape, axis);
  std::vector<double> y(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto pv = parts[pi].values();
    const std::size_t block = lens[pi] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pv.data() + o * block, block, y.data() + o * s.len * s.inner + offset);
    }
    offset += block;
  }
  return record_primitive(OpKind::kConcat, parts, raw(out_shape, std::move(y)),
                          [s, lens](const NodePtrs& in, const Node& out) {
                            std::size_t offset = 0;
                            for (std::size_t pi = 0; pi < in.size(); ++pi) {
                              const std::size_t block = lens[pi] * s.inner;
                              if (in[pi]->requires_grad) {
                                for (std::size_t o = 0; o < s.outer; ++o) {
                                  const double* src = out.grad.data() + o * s.len * s.inner + offset;
                                  double* dst = in[pi]->grad.data() + o * block;
                                  for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                                }
                              }
                              offset += block;
                            }
                          });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t index) {
  if (axis >= x.rank()) throw ShapeError("slice: axis out of range");
  if (index >= x.dim(axis)) throw ShapeError("slice: index out of range");
  const auto s = split_at(x.shape(), axis);
  Shape out_shape;
  for (std::size_t d = 0; d < x.rank(); ++d) {
    if (d != axis) out_shape.push_back(x.dim(d));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> y(s.outer * s.inner);
  const auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv.data() + (o * s.len + index) * s.inner, s.inner, y.data() + o * s.inner);
  }
  return record_primitive(OpKind::kSlice, {x}, raw(out_shape, std::move(y)),
                          [s, index](const NodePtrs& in, const Node& out) {
                            for (std::size_t o = 0; o < s.outer; ++o) {
                              double* dst = in[0]->grad.data() + (o * s.len + index) * s.inner;
                              const double* src = out.grad.data() + o * s.inner;
                              for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
                            }
                          });
}

Tensor channel_scale(const Tensor& x, const Tensor& w) {
  require_rank(w, 2, "channel_scale");
  if (x.rank() < 2 || x.dim(0) != w.dim(0) || x.dim(1) != w.dim(1)) {
    throw ShapeError("channel_scale: weights " + to_string(w.shape()) +
                     " do not match input " + to_string(x.shape()));
  }
  const std::size_t planes = w.numel();
  const std::size_t inner = x.numel() / planes;
  std::vector<double> y(x.values().begin(), x.values().end());
  const auto wv = w.values();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < inner; ++i) y[p * inner + i] *= wv[p];
  }
  return record_primitive(OpKind::kChannelScale, {x, w}, raw(x.shape(), std::move(y)),
                          [planes, inner](const NodePtrs& in, const Node& out) {
                            const auto& g = out.grad;
                            const auto& xv = in[0]->value;
                            const auto& wv = in[1]->value;
                            for (std::size_t p = 0; p < planes; ++p) {
                              double acc = 0.0;
                              for (std::size_t i = 0; i < inner; ++i) {
                                const std::size_t k = p * inner + i;
                                if (in[0]->requires_grad) in[0]->grad[k] += g[k] * wv[p];
                                acc += g[k] * xv[k];
                              }
                              if (in[1]->requires_grad) in[1]->grad[p] += acc;
                            }
                          });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t area = x.dim(2) * x.dim(3);
  std::vector<double> y(planes);
  const auto xv = x.values();
  for (std::size_t p = 0; p < planes; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < area; ++i) acc += xv[p * area + i];
    y[p] = acc / static_cast<double>(area);
  }
  return record_primitive(OpKind::kGlobalAvgPool, {x}, raw({x.dim(0), x.dim(1)}, std::move(y)),
                          [planes, area](const NodePtrs& in, const Node& out) {
                            const double inv = 1.0 / static_cast<double>(area);
                            for (std::size_t p = 0; p < planes; ++p) {
                              const double g = out.grad[p] * inv;
                              for (std::size_t i = 0; i < area; ++i) in[0]->grad[p * area + i] += g;
                            }
                          });
}

Tensor avg_pool(const Tensor& x, std::size_t window) {
  require_rank(x, 4, "avg_pool");
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2), w = x.dim(3);
  if (window == 0 || h % window || w % window) {
    throw ShapeError("avg_pool: window " + std::to_string(window) + " does not divide " +
                     to_string(x.shape()));
  }
  std::vector<double> y(planes * (h / window) * (w / window));
  kernels::avg_pool_forward(planes, h, w, window, x.values(), y);
  return record_primitive(OpKind::kAvgPool, {x},
                          raw({x.dim(0), x.dim(1), h / window, w / window}, std::move(y)),
                          [planes, h, w, window](const NodePtrs& in, const Node& out) {
                            kernels::avg_pool_backward(planes, h, w, window, out.grad,
                                                       in[0]->grad);
                          });
}

Tensor l2_normalize(const Tensor& x) {
  const std::size_t batch = x.dim(0);
  const std::size_t len = x.numel() / batch;
  const auto xv = x.values();
  std::vector<double> norms(batch);
  std::vector<double> y(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    double peak = 0.0;
    for (std::size_t i = 0; i < len; ++i) peak = std::max(peak, std::abs(xv[b * len + i]));
    if (peak == 0.0) throw NumericError("l2_normalize: zero-norm vector");
    // Scaled by the largest entry so tiny or huge rows neither underflow nor overflow.
    double sq = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double u = xv[b * len + i] / peak;
      sq += u * u;
    }
    norms[b] = peak * std::sqrt(sq);
    for (std::size_t i = 0; i < len; ++i) y[b * len + i] = xv[b * len + i] / norms[b];
  }
  return record_primitive(OpKind::kL2Normalize, {x}, raw(x.shape(), std::move(y)),
                          [batch, len, norms](const NodePtrs& in, const Node& out) {
                            const auto& y = out.value;
                            const auto& g = out.grad;
                            for (std::size_t b = 0; b < batch; ++b) {
                              double dot = 0.0;
                              for (std::size_t i = 0; i < len; ++i) {
                                dot += g[b * len + i] * y[b * len + i];
                              }
                              for (std::size_t i = 0; i < len; ++i) {
                                const std::size_t k = b * len + i;
                                in[0]->grad[k] += (g[k] - y[k] * dot) / norms[b];
                              }
                            }
                          });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return record_primitive(OpKind::kSum, {x}, raw({1}, {acc}),
                          [](const NodePtrs& in, const Node& out) {
                            for (auto& g : in[0]->grad) g += out.grad[0];
                          });
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const double n = static_cast<double>(x.numel());
  return record_primitive(OpKind::kMean, {x}, raw({1}, {acc / n}),
                          [n](const NodePtrs& in, const Node& out) {
                            const double g = out.grad[0] / n;
                            for (auto& v : in[0]->grad) v += g;
                          });
}

Tensor sum_last_axis(const Tensor& x) {
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.numel() / len;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> y(rows);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t l = 0; l < len; ++l) acc += xv[r * len + l];
    y[r] = acc;
  }
  return record_primitive(OpKind::kSumLastAxis, {x}, raw(out_shape, std::move(y)),
                          [rows, len](const NodePtrs& in, const Node& out) {
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t l = 0; l < len; ++l) {
                                in[0]->grad[r * len + l] += out.grad[r];
                              }
                            }
                          });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<double> y(x.values().begin(), x.values().end());
  return record_primitive(OpKind::kReshape, {x}, raw(std::move(shape), std::move(y)),
                          [](const NodePtrs& in, const Node& out) {
                            for (std::size_t i = 0; i < out.grad.size(); ++i) {
                              in[0]->grad[i] += out.grad[i];
                            }
                          });
}

Tensor grad_reverse(const Tensor& x, double factor) {
  if (!(factor >= 0.0)) throw Error("grad_reverse: scale must be nonnegative");
  std::vector<double> y(x.values().begin(), x.values().end());
  const double negated = -factor;
  return record_primitive(OpKind::kGradReverse, {x}, raw(x.shape(), std::move(y)),
                          [negated](const NodePtrs& in, const Node& out) {
                            for (std::size_t i = 0; i < out.grad.size(); ++i) {
                              in[0]->grad[i] += negated * out.grad[i];
                            }
                          });
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double h) {
  if (!(h > 0.0)) throw Error("finite_diff_check: step must be positive");
  if (!x.is_leaf()) throw TapeError("finite_diff_check: x must be a leaf");
  const bool had_grad = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<double> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = f(x);
    if (loss.is_leaf()) {
      // f does not depend on x through any recorded primitive.
      analytic.assign(x.numel(), 0.0);
    } else {
      tape.backprop(loss);
      analytic.assign(x.grad().begin(), x.grad().end());
    }
  }
  x.zero_grad();
  x.set_requires_grad(had_grad);

  auto values = x.mutable_values();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double fp = f(x).item();
    values[i] = saved - h;
    const double fm = f(x).item();
    values[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_check: f is non-finite at a perturbed point");
    }
    const double central = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - central) / std::max(1.0, std::abs(central)));
  }
  return worst;
}

}  // namespace cdkd::ad
