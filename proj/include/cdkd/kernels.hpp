#pragma once

// Dense numeric kernels used by the autodiff primitives.
//
// Every kernel has an OpenMP implementation (namespace kernels) and a plain
// serial implementation (namespace kernels::reference) kept for testing and
// benchmarking. Parallel kernels partition output elements only; the
// accumulation order of each output element is fixed, so results do not
// depend on the thread count.

#include <cstddef>
#include <span>

namespace cdkd::kernels {

enum class Trans { kNo, kYes };

/// C[M x N] = (accumulate ? C : 0) + op(A) * op(B), row-major.
/// op(A) is M x K (A stored K x M when transposed), op(B) is K x N.
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate);

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t patch_size() const { return in_channels * kernel * kernel; }
  bool valid() const;
};

/// y[B, Co, Ho, Wo] = conv(x[B, Ci, H, W], w[Co, Ci, k, k]); zero padding, no bias.
void conv2d_forward(const ConvGeometry& g, std::span<const double> x,
                    std::span<const double> w, std::span<double> y);

/// Accumulates input and weight gradients. Either output span may be empty
/// to skip that gradient.
void conv2d_backward(const ConvGeometry& g, std::span<const double> x,
                     std::span<const double> w, std::span<const double> dy,
                     std::span<double> dx, std::span<double> dw);

/// Non-overlapping window x window average pooling over `planes` H x W planes.
void avg_pool_forward(std::size_t planes, std::size_t height, std::size_t width,
                      std::size_t window, std::span<const double> x,
                      std::span<double> y);

void avg_pool_backward(std::size_t planes, std::size_t height, std::size_t width,
                       std::size_t window, std::span<const double> dy,
                       std::span<double> dx);

namespace reference {

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate);

/// Direct seven-loop convolution.
void conv2d_forward(const ConvGeometry& g, std::span<const double> x,
                    std::span<const double> w, std::span<double> y);

void conv2d_backward(const ConvGeometry& g, std::span<const double> x,
                     std::span<const double> w, std::span<const double> dy,
                     std::span<double> dx, std::span<double> dw);

void avg_pool_forward(std::size_t planes, std::size_t height, std::size_t width,
                      std::size_t window, std::span<const double> x,
                      std::span<double> y);

}  // namespace reference

}  // namespace cdkd::kernels
