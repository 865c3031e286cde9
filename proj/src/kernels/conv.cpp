#include <algorithm>
#include <vector>

#include "cdkd/errors.hpp"
#include "cdkd/kernels.hpp"

namespace cdkd::kernels {

bool ConvGeometry::valid() const {
  return batch > 0 && in_channels > 0 && out_channels > 0 && kernel > 0 &&
         stride > 0 && height + 2 * pad >= kernel && width + 2 * pad >= kernel;
}

namespace {

void check(const ConvGeometry& g, std::size_t x, std::size_t w, std::size_t y) {
  if (!g.valid()) throw ShapeError("conv2d: invalid geometry");
  if (x != g.batch * g.in_channels * g.height * g.width ||
      w != g.out_channels * g.patch_size() ||
      y != g.batch * g.out_channels * g.out_height() * g.out_width()) {
    throw ShapeError("conv2d: buffer sizes do not match geometry");
  }
}

// Per-thread scratch that only grows, so steady-state training does not
// touch the allocator.
std::vector<double>& scratch(int slot, std::size_t n) {
  thread_local std::vector<double> buffers[3];
  auto& buf = buffers[slot];
  if (buf.size() < n) buf.resize(n);
  return buf;
}

// cols[(c, ky, kx), (oy, ox)] for one sample, rows ld apart; every entry
// written.
void im2col(const ConvGeometry& g, const double* x, double* cols, std::size_t ld) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const auto rows = static_cast<std::ptrdiff_t>(g.patch_size());
  const auto h = static_cast<std::ptrdiff_t>(g.height);
  const auto w = static_cast<std::ptrdiff_t>(g.width);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t sr = 0; sr < rows; ++sr) {
    const auto r = static_cast<std::size_t>(sr);
    const std::size_t c = r / (g.kernel * g.kernel);
    const auto ky = static_cast<std::ptrdiff_t>((r / g.kernel) % g.kernel);
    const auto kx = static_cast<std::ptrdiff_t>(r % g.kernel);
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    const auto stride = static_cast<std::ptrdiff_t>(g.stride);
    double* dst = cols + r * ld;
    const double* src = x + c * g.height * g.width;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const auto iy = static_cast<std::ptrdiff_t>(oy) * stride + ky - pad;
      double* row = dst + oy * ow;
      if (iy < 0 || iy >= h) {
        std::fill_n(row, ow, 0.0);
        continue;
      }
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto ix = static_cast<std::ptrdiff_t>(ox) * stride + kx - pad;
        row[ox] = (ix < 0 || ix >= w) ? 0.0 : src[iy * w + ix];
      }
    }
  }
}

// Accumulates one sample's cols back into dx. Parallel over channels so that
// every dx element is owned by one thread.
void col2im(const ConvGeometry& g, const double* cols, std::size_t ld, double* dx) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t kk = g.kernel * g.kernel;
  const auto h = static_cast<std::ptrdiff_t>(g.height);
  const auto w = static_cast<std::ptrdiff_t>(g.width);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t sc = 0; sc < static_cast<std::ptrdiff_t>(g.in_channels); ++sc) {
    const auto c = static_cast<std::size_t>(sc);
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    const auto stride = static_cast<std::ptrdiff_t>(g.stride);
    double* dst = dx + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* src = cols + (c * kk + ky * g.kernel + kx) * ld;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy) * stride +
                          static_cast<std::ptrdiff_t>(ky) - pad;
          if (iy < 0 || iy >= h) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox) * stride +
                            static_cast<std::ptrdiff_t>(kx) - pad;
            if (ix < 0 || ix >= w) continue;
            dst[iy * w + ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

// Samples per GEMM: as many as fit a fixed scratch budget, at least one.
std::size_t group_size(const ConvGeometry& g) {
  constexpr std::size_t kBudget = std::size_t{1} << 19;  // doubles
  const std::size_t per = g.patch_size() * g.out_height() * g.out_width();
  return std::clamp<std::size_t>(kBudget / per, 1, g.batch);
}

}  // namespace

// Samples are taken in fixed groups: cols[CKK, (b, P)] for the group, one
// GEMM y_g[Co, (b, P)] = W * cols, then a scatter into [B, Co, P].
void conv2d_forward(const ConvGeometry& g, std::span<const double> x,
                    std::span<const double> w, std::span<double> y) {
  check(g, x.size(), w.size(), y.size());
  const std::size_t plane = g.out_height() * g.out_width();
  const std::size_t in_block = g.in_channels * g.height * g.width;
  const std::size_t out_block = g.out_channels * plane;
  const std::size_t group = group_size(g);
  auto& cols = scratch(0, g.patch_size() * plane * group);
  auto& tmp = scratch(1, out_block * group);
  for (std::size_t b0 = 0; b0 < g.batch; b0 += group) {
    const std::size_t nb = std::min(group, g.batch - b0);
    const std::size_t ld = nb * plane;
    for (std::size_t b = 0; b < nb; ++b) {
      im2col(g, x.data() + (b0 + b) * in_block, cols.data() + b * plane, ld);
    }
    if (nb == 1) {
      gemm(Trans::kNo, Trans::kNo, g.out_channels, plane, g.patch_size(), w,
           std::span<const double>(cols.data(), g.patch_size() * plane),
           y.subspan(b0 * out_block, out_block), false);
      continue;
    }
    gemm(Trans::kNo, Trans::kNo, g.out_channels, ld, g.patch_size(), w,
         std::span<const double>(cols.data(), g.patch_size() * ld),
         std::span<double>(tmp.data(), g.out_channels * ld), false);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        std::copy_n(tmp.data() + o * ld + b * plane, plane,
                    y.data() + (b0 + b) * out_block + o * plane);
      }
    }
  }
}

// Same grouping as the forward pass; dw accumulates group by group in
// ascending order.
void conv2d_backward(const ConvGeometry& g, std::span<const double> x,
                     std::span<const double> w, std::span<const double> dy,
                     std::span<double> dx, std::span<double> dw) {
  check(g, x.size(), w.size(), dy.size());
  if (!dx.empty() && dx.size() != x.size()) throw ShapeError("conv2d: dx size");
  if (!dw.empty() && dw.size() != w.size()) throw ShapeError("conv2d: dw size");
  const std::size_t plane = g.out_height() * g.out_width();
  const std::size_t in_block = g.in_channels * g.height * g.width;
  const std::size_t out_block = g.out_channels * plane;
  const std::size_t group = group_size(g);
  const std::size_t cols_size = g.patch_size() * plane * group;
  auto& cols = scratch(0, dw.empty() ? 0 : cols_size);
  auto& dyg = scratch(1, out_block * group);
  auto& dcols = scratch(2, dx.empty() ? 0 : cols_size);
  for (std::size_t b0 = 0; b0 < g.batch; b0 += group) {
    const std::size_t nb = std::min(group, g.batch - b0);
    const std::size_t ld = nb * plane;
    std::span<const double> dy_g;
    if (nb == 1) {
      dy_g = dy.subspan(b0 * out_block, out_block);
    } else {
      for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t o = 0; o < g.out_channels; ++o) {
          std::copy_n(dy.data() + (b0 + b) * out_block + o * plane, plane,
                      dyg.data() + o * ld + b * plane);
        }
      }
      dy_g = std::span<const double>(dyg.data(), g.out_channels * ld);
    }
    if (!dw.empty()) {
      for (std::size_t b = 0; b < nb; ++b) {
        im2col(g, x.data() + (b0 + b) * in_block, cols.data() + b * plane, ld);
      }
      gemm(Trans::kNo, Trans::kYes, g.out_channels, g.patch_size(), ld, dy_g,
           std::span<const double>(cols.data(), g.patch_size() * ld), dw, true);
    }
    if (!dx.empty()) {
      gemm(Trans::kYes, Trans::kNo, g.patch_size(), ld, g.out_channels, w, dy_g,
           std::span<double>(dcols.data(), g.patch_size() * ld), false);
      for (std::size_t b = 0; b < nb; ++b) {
        col2im(g, dcols.data() + b * plane, ld, dx.data() + (b0 + b) * in_block);
      }
    }
  }
}

void avg_pool_forward(std::size_t planes, std::size_t height, std::size_t width,
                      std::size_t window, std::span<const double> x,
                      std::span<double> y) {
  if (window == 0 || height % window != 0 || width % window != 0) {
    throw ShapeError("avg_pool: window must divide spatial size");
  }
  const std::size_t oh = height / window, ow = width / window;
  if (x.size() != planes * height * width || y.size() != planes * oh * ow) {
    throw ShapeError("avg_pool: buffer sizes do not match geometry");
  }
  const double inv = 1.0 / static_cast<double>(window * window);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t sp = 0; sp < static_cast<std::ptrdiff_t>(planes); ++sp) {
    const auto p = static_cast<std::size_t>(sp);
    const double* src = x.data() + p * height * width;
    double* dst = y.data() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double sum = 0.0;
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            sum += src[(oy * window + dy) * width + ox * window + dx];
          }
        }
        dst[oy * ow + ox] = sum * inv;
      }
    }
  }
}

void avg_pool_backward(std::size_t planes, std::size_t height, std::size_t width,
                       std::size_t window, std::span<const double> dy,
                       std::span<double> dx) {
  if (window == 0 || height % window != 0 || width % window != 0) {
    throw ShapeError("avg_pool: window must divide spatial size");
  }
  const std::size_t oh = height / window, ow = width / window;
  if (dx.size() != planes * height * width || dy.size() != planes * oh * ow) {
    throw ShapeError("avg_pool: buffer sizes do not match geometry");
  }
  const double inv = 1.0 / static_cast<double>(window * window);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t sp = 0; sp < static_cast<std::ptrdiff_t>(planes); ++sp) {
    const auto p = static_cast<std::size_t>(sp);
    const double* src = dy.data() + p * oh * ow;
    double* dst = dx.data() + p * height * width;
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        dst[y * width + x] += src[(y / window) * ow + x / window] * inv;
      }
    }
  }
}

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> x,
                    std::span<const double> w, std::span<double> y) {
  check(g, x.size(), w.size(), y.size());
  const std::size_t oh = g.out_height(), ow = g.out_width();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double sum = 0.0;
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const auto iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                const auto ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) ||
                    ix >= static_cast<long>(g.width)) {
                  continue;
                }
                sum += x[((b * g.in_channels + c) * g.height + iy) * g.width + ix] *
                       w[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx];
              }
            }
          }
          y[((b * g.out_channels + o) * oh + oy) * ow + ox] = sum;
        }
      }
    }
  }
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> x,
                     std::span<const double> w, std::span<const double> dy,
                     std::span<double> dx, std::span<double> dw) {
  check(g, x.size(), w.size(), dy.size());
  const std::size_t oh = g.out_height(), ow = g.out_width();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double up = dy[((b * g.out_channels + o) * oh + oy) * ow + ox];
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const auto iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                const auto ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) ||
                    ix >= static_cast<long>(g.width)) {
                  continue;
                }
                const std::size_t xi = ((b * g.in_channels + c) * g.height + iy) * g.width + ix;
                const std::size_t wi = ((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx;
                if (!dx.empty()) dx[xi] += up * w[wi];
                if (!dw.empty()) dw[wi] += up * x[xi];
              }
            }
          }
        }
      }
    }
  }
}

void avg_pool_forward(std::size_t planes, std::size_t height, std::size_t width,
                      std::size_t window, std::span<const double> x,
                      std::span<double> y) {
  const std::size_t oh = height / window, ow = width / window;
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double sum = 0.0;
        for (std::size_t row = oy * window; row < (oy + 1) * window; ++row) {
          for (std::size_t col = ox * window; col < (ox + 1) * window; ++col) {
            sum += x[(p * height + row) * width + col];
          }
        }
        y[(p * oh + oy) * ow + ox] = sum / static_cast<double>(window * window);
      }
    }
  }
}

}  // namespace reference

}  // namespace cdkd::kernels
