// Parallel kernels against their serial references.

#include <benchmark/benchmark.h>

#include <vector>

#include "cdkd/kernels.hpp"
#include "cdkd/rng.hpp"

using namespace cdkd;
using namespace cdkd::kernels;

namespace {

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

template <bool kReference>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (kReference) {
      reference::gemm(Trans::kNo, Trans::kNo, n, n, n, a, b, c, false);
    } else {
      gemm(Trans::kNo, Trans::kNo, n, n, n, a, b, c, false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

// Geometries of the default backbone: teacher stage 0 and student stage 1.
ConvGeometry conv_geometry(int which) {
  return which == 0 ? ConvGeometry{32, 1, 64, 64, 16, 3, 1, 1}
                    : ConvGeometry{32, 16, 8, 8, 32, 3, 1, 1};
}

template <bool kReference>
void BM_ConvForward(benchmark::State& state) {
  const auto g = conv_geometry(static_cast<int>(state.range(0)));
  const auto x = filled(g.batch * g.in_channels * g.height * g.width, 3);
  const auto w = filled(g.out_channels * g.patch_size(), 4);
  std::vector<double> y(g.batch * g.out_channels * g.out_height() * g.out_width());
  for (auto _ : state) {
    if constexpr (kReference) {
      reference::conv2d_forward(g, x, w, y);
    } else {
      conv2d_forward(g, x, w, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool kReference>
void BM_ConvBackward(benchmark::State& state) {
  const auto g = conv_geometry(static_cast<int>(state.range(0)));
  const auto x = filled(g.batch * g.in_channels * g.height * g.width, 5);
  const auto w = filled(g.out_channels * g.patch_size(), 6);
  const auto dy = filled(g.batch * g.out_channels * g.out_height() * g.out_width(), 7);
  std::vector<double> dx(x.size()), dw(w.size());
  for (auto _ : state) {
    if constexpr (kReference) {
      reference::conv2d_backward(g, x, w, dy, dx, dw);
    } else {
      conv2d_backward(g, x, w, dy, dx, dw);
    }
    benchmark::DoNotOptimize(dx.data());
    benchmark::DoNotOptimize(dw.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/parallel")->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_Gemm<true>)->Name("gemm/reference")->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_ConvForward<false>)->Name("conv_fwd/parallel")->Arg(0)->Arg(1);
BENCHMARK(BM_ConvForward<true>)->Name("conv_fwd/reference")->Arg(0)->Arg(1);
BENCHMARK(BM_ConvBackward<false>)->Name("conv_bwd/parallel")->Arg(0)->Arg(1);
BENCHMARK(BM_ConvBackward<true>)->Name("conv_bwd/reference")->Arg(0)->Arg(1);

BENCHMARK_MAIN();
