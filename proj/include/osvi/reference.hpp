#pragma once

// Serial, definition-literal versions of the kernels in kernels.hpp. Slow on
// purpose: these are the yardstick for tests and the benchmark baseline.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "osvi/kernels.hpp"

namespace osvi::reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, const T* b, T beta, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        const T bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = alpha * acc + (beta == T{0} ? T{0} : beta * c[i * n + j]);
    }
  }
}

template <typename T>
void conv_forward(const kernels::ConvGeometry& g, const T* x, const T* w, const T* bias,
                  T* out) {
  const std::size_t od = g.out_depth(), oh = g.out_height(), ow = g.out_width();
  for (std::size_t co = 0; co < g.out_channels; ++co)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          T acc = bias != nullptr ? bias[co] : T{0};
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t kd = 0; kd < g.kernel_d; ++kd)
              for (std::size_t ky = 0; ky < g.kernel; ++ky)
                for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                  const auto iz = static_cast<std::ptrdiff_t>(z * g.stride_d + kd) -
                                  static_cast<std::ptrdiff_t>(g.pad_d);
                  const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) -
                                  static_cast<std::ptrdiff_t>(g.pad);
                  const auto ix = static_cast<std::ptrdiff_t>(xo * g.stride + kx) -
                                  static_cast<std::ptrdiff_t>(g.pad);
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= static_cast<std::ptrdiff_t>(g.depth) ||
                      iy >= static_cast<std::ptrdiff_t>(g.height) ||
                      ix >= static_cast<std::ptrdiff_t>(g.width))
                    continue;
                  const T wv = w[(((co * g.in_channels + ci) * g.kernel_d + kd) * g.kernel + ky) *
                                     g.kernel + kx];
                  const T xv = x[((ci * g.depth + static_cast<std::size_t>(iz)) * g.height +
                                  static_cast<std::size_t>(iy)) * g.width +
                                 static_cast<std::size_t>(ix)];
                  acc += wv * xv;
                }
          out[((co * od + z) * oh + y) * ow + xo] = acc;
        }
}

template <typename T>
void softmax_rows(T* data, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = data + r * cols;
    const T mx = *std::max_element(row, row + cols);
    T sum{0};
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) row[j] /= sum;
  }
}

/// Attention spelled out as scores → masked fill → softmax → weighted sum,
/// one (group, head) at a time.
template <typename T>
void attention_forward(const kernels::AttentionShape& s, const kernels::AttentionMask& mask,
                       T scale, T sentinel, const T* q, const T* k, const T* v, T* out) {
  const std::size_t n = s.group_tokens(), d = s.head_dim(), c = s.channels;
  std::vector<T> scores(n);
  for (std::size_t g = 0; g < s.groups; ++g)
    for (std::size_t h = 0; h < s.heads; ++h)
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t qi = g * n + i;
        bool any_kept = false;
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t kj = g * n + j;
          T dot{0};
          for (std::size_t e = 0; e < d; ++e) dot += q[qi * c + h * d + e] * k[kj * c + h * d + e];
          const bool masked = mask.masked(qi, kj);
          scores[j] = masked ? sentinel : scale * dot;
          any_kept = any_kept || !masked;
        }
        for (std::size_t e = 0; e < d; ++e) {
          out[qi * c + h * d + e] = T{0};
        }
        if (!any_kept) continue;
        softmax_rows(scores.data(), 1, n);
        for (std::size_t j = 0; j < n; ++j) {
          if (mask.masked(qi, g * n + j)) continue;
          for (std::size_t e = 0; e < d; ++e)
            out[qi * c + h * d + e] += scores[j] * v[(g * n + j) * c + h * d + e];
        }
      }
}

}  // namespace osvi::reference
