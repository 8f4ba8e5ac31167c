#include "osvi/kernels.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "osvi/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace osvi::kernels {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

using Index = Eigen::Index;

template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t od = g.out_depth(), oh = g.out_height(), ow = g.out_width();
  const std::size_t npix = od * oh * ow;
  const std::size_t plane = g.height * g.width;
  const std::size_t rows = g.patch();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    std::size_t rem = static_cast<std::size_t>(r);
    const std::size_t kx = rem % g.kernel;
    rem /= g.kernel;
    const std::size_t ky = rem % g.kernel;
    rem /= g.kernel;
    const std::size_t kd = rem % g.kernel_d;
    const std::size_t c = rem / g.kernel_d;
    T* dst = cols + static_cast<std::size_t>(r) * npix;
    for (std::size_t zd = 0; zd < od; ++zd) {
      const std::ptrdiff_t id = static_cast<std::ptrdiff_t>(zd * g.stride_d + kd) -
                                static_cast<std::ptrdiff_t>(g.pad_d);
      const bool dvalid = id >= 0 && id < static_cast<std::ptrdiff_t>(g.depth);
      const T* src = x + (c * g.depth + (dvalid ? id : 0)) * plane;
      for (std::size_t y = 0; y < oh; ++y) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) -
                                  static_cast<std::ptrdiff_t>(g.pad);
        T* out = dst + (zd * oh + y) * ow;
        if (!dvalid || iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
          std::fill(out, out + ow, T{0});
          continue;
        }
        const T* row = src + static_cast<std::size_t>(iy) * g.width;
        for (std::size_t xo = 0; xo < ow; ++xo) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * g.stride + kx) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          out[xo] = (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) ? row[ix] : T{0};
        }
      }
    }
  }
}

// Accumulating inverse of im2col. Parallel over input channels so every
// dx element is written by one thread in a fixed order.
template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* dx) {
  const std::size_t od = g.out_depth(), oh = g.out_height(), ow = g.out_width();
  const std::size_t npix = od * oh * ow;
  const std::size_t plane = g.height * g.width;
  const std::size_t per_channel = g.kernel_d * g.kernel * g.kernel;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(g.in_channels); ++ci) {
    const std::size_t c = static_cast<std::size_t>(ci);
    for (std::size_t kk = 0; kk < per_channel; ++kk) {
      const std::size_t kx = kk % g.kernel;
      const std::size_t ky = (kk / g.kernel) % g.kernel;
      const std::size_t kd = kk / (g.kernel * g.kernel);
      const T* src = cols + (c * per_channel + kk) * npix;
      for (std::size_t zd = 0; zd < od; ++zd) {
        const std::ptrdiff_t id = static_cast<std::ptrdiff_t>(zd * g.stride_d + kd) -
                                  static_cast<std::ptrdiff_t>(g.pad_d);
        if (id < 0 || id >= static_cast<std::ptrdiff_t>(g.depth)) continue;
        T* dst = dx + (c * g.depth + static_cast<std::size_t>(id)) * plane;
        for (std::size_t y = 0; y < oh; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* row = dst + static_cast<std::size_t>(iy) * g.width;
          const T* in = src + (zd * oh + y) * ow;
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) row[ix] += in[xo];
          }
        }
      }
    }
  }
}

// Eigen handles an unaligned head with scalar code, so the bits would depend
// on where the row lives. Work in an aligned copy instead.
template <typename T>
void softmax_row(T* row, std::size_t n, const std::uint8_t* zero_mask) {
  thread_local Eigen::Array<T, Eigen::Dynamic, 1> buf;
  buf = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(row, static_cast<Index>(n));
  buf = (buf - buf.maxCoeff()).exp();
  if (zero_mask != nullptr) {
    for (std::size_t j = 0; j < n; ++j)
      if (zero_mask[j] != 0) buf[static_cast<Index>(j)] = T{0};
  }
  buf /= buf.sum();
  std::copy(buf.data(), buf.data() + n, row);
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == 1 && g.kernel_d == 1 && g.stride == 1 && g.stride_d == 1 &&
         g.pad == 0 && g.pad_d == 0;
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          T alpha, const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta,
          T* c, std::size_t ldc) {
  MutMap<T> C(c, static_cast<Index>(m), static_cast<Index>(n),
              Eigen::OuterStride<>(static_cast<Index>(ldc)));
  if (k == 0) {
    if (beta == T{0}) {
      C.setZero();
    } else {
      C *= beta;
    }
    return;
  }
  const Index ar = static_cast<Index>(trans_a ? k : m), ac = static_cast<Index>(trans_a ? m : k);
  const Index br = static_cast<Index>(trans_b ? n : k), bc = static_cast<Index>(trans_b ? k : n);
  ConstMap<T> A(a, ar, ac, Eigen::OuterStride<>(static_cast<Index>(lda)));
  ConstMap<T> B(b, br, bc, Eigen::OuterStride<>(static_cast<Index>(ldb)));
  auto run = [&](const auto& product) {
    if (beta == T{0}) {
      C.noalias() = alpha * product;
    } else {
      if (beta != T{1}) C *= beta;
      C.noalias() += alpha * product;
    }
  };
  if (!trans_a && !trans_b) {
    run(A * B);
  } else if (trans_a && !trans_b) {
    run(A.transpose() * B);
  } else if (!trans_a && trans_b) {
    run(A * B.transpose());
  } else {
    run(A.transpose() * B.transpose());
  }
}

void ConvGeometry::validate() const {
  if (kernel % 2 == 0 || kernel_d % 2 == 0) {
    throw GeometryError("conv kernel size must be odd, got " + std::to_string(kernel));
  }
  if (stride == 0 || stride_d == 0) throw GeometryError("conv stride must be positive");
  if (height + 2 * pad < kernel || width + 2 * pad < kernel || depth + 2 * pad_d < kernel_d) {
    throw GeometryError("conv kernel " + std::to_string(kernel) + " larger than padded input");
  }
  if (strict && (height % stride != 0 || width % stride != 0 || depth % stride_d != 0)) {
    throw GeometryError("conv stride " + std::to_string(stride) + " does not divide input " +
                        std::to_string(depth) + "x" + std::to_string(height) + "x" +
                        std::to_string(width));
  }
}

template <typename T>
void conv_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* out) {
  const std::size_t npix = g.out_pixels();
  const std::size_t patch = g.patch();
  if (is_pointwise(g)) {
    gemm(false, false, g.out_channels, npix, patch, T{1}, w, x, T{0}, out);
  } else {
    std::vector<T> cols(patch * npix);
    im2col(g, x, cols.data());
    gemm(false, false, g.out_channels, npix, patch, T{1}, w, cols.data(), T{0}, out);
  }
  if (bias != nullptr) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t co = 0; co < static_cast<std::ptrdiff_t>(g.out_channels); ++co) {
      T* row = out + static_cast<std::size_t>(co) * npix;
      const T b = bias[co];
      for (std::size_t p = 0; p < npix; ++p) row[p] += b;
    }
  }
}

template <typename T>
void conv_backward(const ConvGeometry& g, const T* x, const T* w, const T* dout, T* dx,
                   T* dw, T* db) {
  const std::size_t npix = g.out_pixels();
  const std::size_t patch = g.patch();
  const bool pointwise = is_pointwise(g);
  if (db != nullptr) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      const T* row = dout + co * npix;
      T s{0};
      for (std::size_t p = 0; p < npix; ++p) s += row[p];
      db[co] += s;
    }
  }
  if (dw != nullptr) {
    if (pointwise) {
      gemm(false, true, g.out_channels, patch, npix, T{1}, dout, x, T{1}, dw);
    } else {
      std::vector<T> cols(patch * npix);
      im2col(g, x, cols.data());
      gemm(false, true, g.out_channels, patch, npix, T{1}, dout, cols.data(), T{1}, dw);
    }
  }
  if (dx != nullptr) {
    if (pointwise) {
      gemm(true, false, patch, npix, g.out_channels, T{1}, w, dout, T{1}, dx);
    } else {
      std::vector<T> dcols(patch * npix);
      gemm(true, false, patch, npix, g.out_channels, T{1}, w, dout, T{0}, dcols.data());
      col2im(g, dcols.data(), dx);
    }
  }
}

template <typename T>
void softmax_rows(T* data, std::size_t rows, std::size_t cols) {
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    softmax_row(data + static_cast<std::size_t>(r) * cols, cols, nullptr);
  }
}

template <typename T>
void resample_forward(ResampleMode mode, std::size_t channels, std::size_t h, std::size_t w,
                      std::size_t h2, std::size_t w2, const T* x, T* out,
                      std::uint32_t* argmax) {
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(channels); ++ci) {
    const std::size_t c = static_cast<std::size_t>(ci);
    const T* src = x + c * h * w;
    T* dst = out + c * h2 * w2;
    for (std::size_t i = 0; i < h2; ++i) {
      for (std::size_t j = 0; j < w2; ++j) {
        T v{0};
        switch (mode) {
          case ResampleMode::kAdaptiveAvgPool: {
            const std::size_t y0 = pool_begin(i, h, h2), y1 = pool_end(i, h, h2);
            const std::size_t x0 = pool_begin(j, w, w2), x1 = pool_end(j, w, w2);
            T s{0};
            for (std::size_t y = y0; y < y1; ++y)
              for (std::size_t xx = x0; xx < x1; ++xx) s += src[y * w + xx];
            v = s / static_cast<T>((y1 - y0) * (x1 - x0));
            break;
          }
          case ResampleMode::kMaxPool: {
            const std::size_t y0 = pool_begin(i, h, h2), y1 = pool_end(i, h, h2);
            const std::size_t x0 = pool_begin(j, w, w2), x1 = pool_end(j, w, w2);
            std::size_t best = y0 * w + x0;
            for (std::size_t y = y0; y < y1; ++y)
              for (std::size_t xx = x0; xx < x1; ++xx)
                if (src[y * w + xx] > src[best]) best = y * w + xx;
            v = src[best];
            if (argmax != nullptr) argmax[c * h2 * w2 + i * w2 + j] = static_cast<std::uint32_t>(best);
            break;
          }
          case ResampleMode::kNearestUp: {
            v = src[(i * h / h2) * w + (j * w / w2)];
            break;
          }
          case ResampleMode::kBilinearUp: {
            // half-pixel centres, edge clamped
            const double sy = std::max(0.0, (static_cast<double>(i) + 0.5) * h / h2 - 0.5);
            const double sx = std::max(0.0, (static_cast<double>(j) + 0.5) * w / w2 - 0.5);
            const std::size_t y0 = std::min(static_cast<std::size_t>(sy), h - 1);
            const std::size_t x0 = std::min(static_cast<std::size_t>(sx), w - 1);
            const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            const T fy = static_cast<T>(sy - static_cast<double>(y0));
            const T fx = static_cast<T>(sx - static_cast<double>(x0));
            v = (T{1} - fy) * ((T{1} - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1]) +
                fy * ((T{1} - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
            break;
          }
        }
        dst[i * w2 + j] = v;
      }
    }
  }
}

template <typename T>
void resample_backward(ResampleMode mode, std::size_t channels, std::size_t h, std::size_t w,
                       std::size_t h2, std::size_t w2, const T* dout,
                       const std::uint32_t* argmax, T* dx) {
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(channels); ++ci) {
    const std::size_t c = static_cast<std::size_t>(ci);
    const T* g = dout + c * h2 * w2;
    T* dst = dx + c * h * w;
    for (std::size_t i = 0; i < h2; ++i) {
      for (std::size_t j = 0; j < w2; ++j) {
        const T gv = g[i * w2 + j];
        switch (mode) {
          case ResampleMode::kAdaptiveAvgPool: {
            const std::size_t y0 = pool_begin(i, h, h2), y1 = pool_end(i, h, h2);
            const std::size_t x0 = pool_begin(j, w, w2), x1 = pool_end(j, w, w2);
            const T share = gv / static_cast<T>((y1 - y0) * (x1 - x0));
            for (std::size_t y = y0; y < y1; ++y)
              for (std::size_t xx = x0; xx < x1; ++xx) dst[y * w + xx] += share;
            break;
          }
          case ResampleMode::kMaxPool:
            dst[argmax[c * h2 * w2 + i * w2 + j]] += gv;
            break;
          case ResampleMode::kNearestUp:
            dst[(i * h / h2) * w + (j * w / w2)] += gv;
            break;
          case ResampleMode::kBilinearUp: {
            const double sy = std::max(0.0, (static_cast<double>(i) + 0.5) * h / h2 - 0.5);
            const double sx = std::max(0.0, (static_cast<double>(j) + 0.5) * w / w2 - 0.5);
            const std::size_t y0 = std::min(static_cast<std::size_t>(sy), h - 1);
            const std::size_t x0 = std::min(static_cast<std::size_t>(sx), w - 1);
            const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            const T fy = static_cast<T>(sy - static_cast<double>(y0));
            const T fx = static_cast<T>(sx - static_cast<double>(x0));
            dst[y0 * w + x0] += (T{1} - fy) * (T{1} - fx) * gv;
            dst[y0 * w + x1] += (T{1} - fy) * fx * gv;
            dst[y1 * w + x0] += fy * (T{1} - fx) * gv;
            dst[y1 * w + x1] += fy * fx * gv;
            break;
          }
        }
      }
    }
  }
}

bool AttentionMask::any() const {
  switch (kind) {
    case Kind::kKey: return std::any_of(key.begin(), key.end(), [](auto b) { return b != 0; });
    case Kind::kPair: return std::any_of(pair.begin(), pair.end(), [](auto b) { return b != 0; });
    default: return false;
  }
}

namespace {

// Mask flags for query i of a group over the group's keys, or nullptr.
inline const std::uint8_t* row_mask(const AttentionMask& mask, std::size_t base, std::size_t i) {
  switch (mask.kind) {
    case AttentionMask::Kind::kKey: return mask.key.data() + base;
    case AttentionMask::Kind::kPair: return mask.pair.data() + (base + i) * mask.tokens + base;
    default: return nullptr;
  }
}

}  // namespace

template <typename T>
void attention_forward(const AttentionShape& s, const AttentionMask& mask, T scale,
                       T sentinel, const T* q, const T* k, const T* v, T* out, T* probs) {
  const std::size_t n = s.group_tokens(), d = s.head_dim(), c = s.channels;
  const std::size_t jobs = s.groups * s.heads;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t job = 0; job < static_cast<std::ptrdiff_t>(jobs); ++job) {
    const std::size_t g = static_cast<std::size_t>(job) / s.heads;
    const std::size_t h = static_cast<std::size_t>(job) % s.heads;
    const std::size_t base = g * n;
    const std::size_t off = base * c + h * d;
    T* p = probs + static_cast<std::size_t>(job) * n * n;
    gemm(false, true, n, n, d, scale, q + off, c, k + off, c, T{0}, p, n);
    for (std::size_t i = 0; i < n; ++i) {
      T* row = p + i * n;
      const std::uint8_t* rm = row_mask(mask, base, i);
      std::size_t kept = n;
      if (rm != nullptr) {
        kept = 0;
        for (std::size_t j = 0; j < n; ++j) {
          kept += rm[j] == 0;
          row[j] = rm[j] != 0 ? sentinel : row[j];
        }
      }
      if (kept == 0) {
        std::fill(row, row + n, T{0});
        continue;
      }
      softmax_row(row, n, kept != n ? rm : nullptr);
    }
    gemm(false, false, n, d, n, T{1}, p, n, v + off, c, T{0}, out + off, c);
  }
}

template <typename T>
void attention_backward(const AttentionShape& s, const AttentionMask& mask, T scale,
                        const T* q, const T* k, const T* v, const T* probs, const T* dout,
                        T* dq, T* dk, T* dv) {
  (void)mask;  // masked weights are exactly zero in probs, which blocks their gradient
  const std::size_t n = s.group_tokens(), d = s.head_dim(), c = s.channels;
  const std::size_t jobs = s.groups * s.heads;
#pragma omp parallel
  {
    std::vector<T> dp(n * n);
#pragma omp for schedule(static)
    for (std::ptrdiff_t job = 0; job < static_cast<std::ptrdiff_t>(jobs); ++job) {
      const std::size_t g = static_cast<std::size_t>(job) / s.heads;
      const std::size_t h = static_cast<std::size_t>(job) % s.heads;
      const std::size_t off = g * n * c + h * d;
      const T* p = probs + static_cast<std::size_t>(job) * n * n;
      const T* dog = dout + off;
      gemm(false, true, n, n, d, T{1}, dog, c, v + off, c, T{0}, dp.data(), n);
      gemm(true, false, n, d, n, T{1}, p, n, dog, c, T{1}, dv + off, c);
      for (std::size_t i = 0; i < n; ++i) {
        const T* prow = p + i * n;
        T* drow = dp.data() + i * n;
        T dot{0};
#pragma omp simd reduction(+ : dot)
        for (std::size_t j = 0; j < n; ++j) dot += prow[j] * drow[j];
#pragma omp simd
        for (std::size_t j = 0; j < n; ++j) drow[j] = prow[j] * (drow[j] - dot);
      }
      gemm(false, false, n, d, n, scale, dp.data(), n, k + off, c, T{1}, dq + off, c);
      gemm(true, false, n, d, n, scale, dp.data(), n, q + off, c, T{1}, dk + off, c);
    }
  }
}

#define OSVI_INSTANTIATE_KERNELS(T)                                                        \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, T, const T*,    \
                        std::size_t, const T*, std::size_t, T, T*, std::size_t);            \
  template void conv_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);    \
  template void conv_backward<T>(const ConvGeometry&, const T*, const T*, const T*, T*, T*, \
                                 T*);                                                      \
  template void softmax_rows<T>(T*, std::size_t, std::size_t);                             \
  template void resample_forward<T>(ResampleMode, std::size_t, std::size_t, std::size_t,   \
                                    std::size_t, std::size_t, const T*, T*,                \
                                    std::uint32_t*);                                       \
  template void resample_backward<T>(ResampleMode, std::size_t, std::size_t, std::size_t,  \
                                     std::size_t, std::size_t, const T*,                   \
                                     const std::uint32_t*, T*);                            \
  template void attention_forward<T>(const AttentionShape&, const AttentionMask&, T, T,    \
                                     const T*, const T*, const T*, T*, T*);                \
  template void attention_backward<T>(const AttentionShape&, const AttentionMask&, T,      \
                                      const T*, const T*, const T*, const T*, const T*,    \
                                      T*, T*, T*);
OSVI_INSTANTIATE_KERNELS(float)
OSVI_INSTANTIATE_KERNELS(double)
#undef OSVI_INSTANTIATE_KERNELS

}  // namespace osvi::kernels
