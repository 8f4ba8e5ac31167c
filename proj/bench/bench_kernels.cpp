// OpenMP kernels against their serial reference twins, at the shapes the
// model actually runs (48x80 frames, 7 frames, 32-channel tokens).

#include <benchmark/benchmark.h>

#include <vector>

#include "osvi/kernels.hpp"
#include "osvi/reference.hpp"
#include "osvi/rng.hpp"

using namespace osvi;

namespace {

std::vector<float> rvec(std::size_t n, std::uint64_t seed) {
  Rng r(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(r.uniform(-1, 1));
  return v;
}

kernels::ConvGeometry encoder_conv() {
  kernels::ConvGeometry g;
  g.in_channels = 16;
  g.out_channels = 24;
  g.height = 48;
  g.width = 80;
  g.kernel = 3;
  g.pad = 1;
  g.stride = 2;
  return g;
}

// tokens = 7 frames x 12x20 grid, split into `groups` independent blocks
kernels::AttentionShape token_shape(std::size_t groups) { return {7 * 240, 32, 4, groups}; }

void BM_gemm(benchmark::State& st, bool parallel) {
  const std::size_t n = static_cast<std::size_t>(st.range(0));
  const auto a = rvec(n * n, 1), b = rvec(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : st) {
    if (parallel) {
      kernels::gemm<float>(false, false, n, n, n, 1.0f, a.data(), b.data(), 0.0f, c.data());
    } else {
      reference::gemm<float>(false, false, n, n, n, 1.0f, a.data(), b.data(), 0.0f, c.data());
    }
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * 2 * n * n * n));
}

void BM_conv(benchmark::State& st, bool parallel) {
  const auto g = encoder_conv();
  const auto x = rvec(g.in_channels * g.height * g.width, 3), w = rvec(g.out_channels * g.patch(), 4);
  const auto b = rvec(g.out_channels, 5);
  std::vector<float> y(g.out_channels * g.out_pixels());
  for (auto _ : st) {
    if (parallel) {
      kernels::conv_forward(g, x.data(), w.data(), b.data(), y.data());
    } else {
      reference::conv_forward(g, x.data(), w.data(), b.data(), y.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_softmax(benchmark::State& st, bool parallel) {
  const auto src = rvec(1680 * 240, 6);
  std::vector<float> buf(src.size());
  for (auto _ : st) {
    buf = src;
    if (parallel) {
      kernels::softmax_rows(buf.data(), 1680, 240);
    } else {
      reference::softmax_rows(buf.data(), 1680, 240);
    }
    benchmark::DoNotOptimize(buf.data());
  }
}

void BM_attention(benchmark::State& st, bool parallel) {
  const auto s = token_shape(static_cast<std::size_t>(st.range(0)));
  const std::size_t nc = s.tokens * s.channels;
  const auto q = rvec(nc, 7), k = rvec(nc, 8), v = rvec(nc, 9);
  std::vector<float> out(nc), probs(s.groups * s.heads * s.group_tokens() * s.group_tokens());
  const kernels::AttentionMask none;
  for (auto _ : st) {
    if (parallel) {
      kernels::attention_forward(s, none, 0.35f, -1e9f, q.data(), k.data(), v.data(), out.data(),
                                 probs.data());
    } else {
      reference::attention_forward(s, none, 0.35f, -1e9f, q.data(), k.data(), v.data(), out.data());
    }
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK_CAPTURE(BM_gemm, openmp, true)->Arg(64)->Arg(256);
BENCHMARK_CAPTURE(BM_gemm, reference, false)->Arg(64)->Arg(256);
BENCHMARK_CAPTURE(BM_conv, openmp, true);
BENCHMARK_CAPTURE(BM_conv, reference, false);
BENCHMARK_CAPTURE(BM_softmax, openmp, true);
BENCHMARK_CAPTURE(BM_softmax, reference, false);
// 1 group = full space-time attention, 7 groups = per-frame attention
BENCHMARK_CAPTURE(BM_attention, openmp, true)->Arg(1)->Arg(7)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_attention, reference, false)->Arg(1)->Arg(7)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
