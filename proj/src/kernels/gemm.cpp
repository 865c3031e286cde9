#include <algorithm>
#include <vector>

#include "cdkd/errors.hpp"
#include "cdkd/kernels.hpp"

namespace cdkd::kernels {

namespace {

// Register tile: kMr rows x kNr columns of C held in vector accumulators.
constexpr std::size_t kMr = 6;
constexpr std::size_t kNr = 16;
constexpr std::size_t kKc = 256;
constexpr std::size_t kMc = 96;
constexpr std::size_t kNc = 1024;

typedef double v8 __attribute__((vector_size(64)));

void check_sizes(std::size_t m, std::size_t n, std::size_t k, std::size_t a, std::size_t b,
                 std::size_t c) {
  if (a < m * k || b < k * n || c < m * n) {
    throw ShapeError("gemm: operand buffer smaller than its dimensions");
  }
}

// op(A)[i0:i0+mc, p0:p0+kc] into kMr-row slivers, k-major, zero padded.
void pack_a(const double* a, bool trans, std::size_t m, std::size_t k, std::size_t i0,
            std::size_t mc, std::size_t p0, std::size_t kc, double* out) {
  for (std::size_t ir = 0; ir < mc; ir += kMr) {
    const std::size_t rows = std::min(kMr, mc - ir);
    double* dst = out + ir * kc;
    for (std::size_t p = 0; p < kc; ++p) {
      for (std::size_t r = 0; r < kMr; ++r) {
        double v = 0.0;
        if (r < rows) {
          const std::size_t i = i0 + ir + r;
          const std::size_t kk = p0 + p;
          v = trans ? a[kk * m + i] : a[i * k + kk];
        }
        dst[p * kMr + r] = v;
      }
    }
  }
}

// op(B)[p0:p0+kc, j0:j0+nc] into kNr-column slivers, k-major, zero padded.
void pack_b(const double* b, bool trans, std::size_t n, std::size_t k, std::size_t p0,
            std::size_t kc, std::size_t j0, std::size_t nc, double* out) {
  const std::size_t slivers = (nc + kNr - 1) / kNr;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < static_cast<std::ptrdiff_t>(slivers); ++s) {
    const std::size_t jr = static_cast<std::size_t>(s) * kNr;
    const std::size_t cols = std::min(kNr, nc - jr);
    double* dst = out + jr * kc;
    for (std::size_t p = 0; p < kc; ++p) {
      const std::size_t kk = p0 + p;
      for (std::size_t c = 0; c < kNr; ++c) {
        double v = 0.0;
        if (c < cols) {
          const std::size_t j = j0 + jr + c;
          v = trans ? b[j * k + kk] : b[kk * n + j];
        }
        dst[p * kNr + c] = v;
      }
    }
  }
}

// tile = sum_p a[p, :] (x) b[p, :], then C[rows x cols] += tile.
void micro_kernel(std::size_t kc, const double* __restrict a, const double* __restrict b,
                  double* __restrict c, std::size_t ldc, std::size_t rows, std::size_t cols) {
  v8 acc[kMr][2];
  for (std::size_t r = 0; r < kMr; ++r) acc[r][0] = acc[r][1] = v8{};
  for (std::size_t p = 0; p < kc; ++p) {
    v8 b0, b1;
    __builtin_memcpy(&b0, b + p * kNr, sizeof b0);
    __builtin_memcpy(&b1, b + p * kNr + 8, sizeof b1);
    const double* ap = a + p * kMr;
    for (std::size_t r = 0; r < kMr; ++r) {
      acc[r][0] += ap[r] * b0;
      acc[r][1] += ap[r] * b1;
    }
  }
  if (rows == kMr && cols == kNr) {
    for (std::size_t r = 0; r < kMr; ++r) {
      v8 c0, c1;
      __builtin_memcpy(&c0, c + r * ldc, sizeof c0);
      __builtin_memcpy(&c1, c + r * ldc + 8, sizeof c1);
      c0 += acc[r][0];
      c1 += acc[r][1];
      __builtin_memcpy(c + r * ldc, &c0, sizeof c0);
      __builtin_memcpy(c + r * ldc + 8, &c1, sizeof c1);
    }
    return;
  }
  alignas(64) double tile[kMr][kNr];
  __builtin_memcpy(tile, acc, sizeof tile);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) c[r * ldc + j] += tile[r][j];
  }
}

}  // namespace

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate) {
  check_sizes(m, n, k, a.size(), b.size(), c.size());
  if (!accumulate) std::fill_n(c.begin(), m * n, 0.0);
  if (m == 0 || n == 0 || k == 0) return;

  const bool a_trans = ta == Trans::kYes;
  const bool b_trans = tb == Trans::kYes;
  const std::size_t nc_max = std::min(kNc, (n + kNr - 1) / kNr * kNr);
  const std::size_t kc_max = std::min(kKc, k);
  thread_local std::vector<double> bpack, apack;
  if (bpack.size() < nc_max * kc_max) bpack.resize(nc_max * kc_max);
  if (apack.size() < (m + kMr - 1) / kMr * kMr * kc_max) {
    apack.resize((m + kMr - 1) / kMr * kMr * kc_max);
  }

  // C[i, j] gains one partial sum per kKc block, blocks in ascending k.
  for (std::size_t j0 = 0; j0 < n; j0 += kNc) {
    const std::size_t nc = std::min(kNc, n - j0);
    for (std::size_t p0 = 0; p0 < k; p0 += kKc) {
      const std::size_t kc = std::min(kKc, k - p0);
      pack_b(b.data(), b_trans, n, k, p0, kc, j0, nc, bpack.data());
      pack_a(a.data(), a_trans, m, k, 0, m, p0, kc, apack.data());
      const std::size_t row_tiles = (m + kMr - 1) / kMr;
      const std::size_t col_tiles = (nc + kNr - 1) / kNr;
      const std::size_t row_blocks = (row_tiles * kMr + kMc - 1) / kMc;
      // Each task owns a (row block, column tile) of C.
#pragma omp parallel for collapse(2) schedule(static)
      for (std::ptrdiff_t jt = 0; jt < static_cast<std::ptrdiff_t>(col_tiles); ++jt) {
        for (std::ptrdiff_t rb = 0; rb < static_cast<std::ptrdiff_t>(row_blocks); ++rb) {
          const std::size_t jr = static_cast<std::size_t>(jt) * kNr;
          const std::size_t cols = std::min(kNr, nc - jr);
          const std::size_t ir_end = std::min(m, (static_cast<std::size_t>(rb) + 1) * kMc);
          for (std::size_t ir = static_cast<std::size_t>(rb) * kMc; ir < ir_end; ir += kMr) {
            micro_kernel(kc, apack.data() + ir * kc, bpack.data() + jr * kc,
                         c.data() + ir * n + j0 + jr, n, std::min(kMr, m - ir), cols);
          }
        }
      }
    }
  }
}

namespace reference {

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate) {
  check_sizes(m, n, k, a.size(), b.size(), c.size());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double av = ta == Trans::kYes ? a[kk * m + i] : a[i * k + kk];
        const double bv = tb == Trans::kYes ? b[j * k + kk] : b[kk * n + j];
        sum += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + sum : sum;
    }
  }
}

}  // namespace reference

}  // namespace cdkd::kernels
