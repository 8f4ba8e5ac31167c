#pragma once

// Hot numeric kernels on raw row-major buffers. Every routine here has a
// serial, definition-literal twin in reference.hpp; the unit tests and the
// benchmark target compare the two. Parallel loops only ever split the
// output so each element is produced by one thread with a fixed summation
// order, keeping results independent of the thread count.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace osvi::kernels {

/// C[m×n] = alpha·op(A)·op(B) + beta·C with explicit leading dimensions.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          T alpha, const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta,
          T* c, std::size_t ldc);

template <typename T>
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                 std::size_t k, T alpha, const T* a, const T* b, T beta, T* c) {
  gemm(trans_a, trans_b, m, n, k, alpha, a, trans_a ? m : k, b, trans_b ? k : n,
       beta, c, n);
}

struct ConvGeometry {
  std::size_t in_channels = 0, out_channels = 0;
  std::size_t depth = 1, height = 0, width = 0;  // depth = 1 for 2-D
  std::size_t kernel_d = 1, kernel = 1;
  std::size_t stride_d = 1, stride = 1;
  std::size_t pad_d = 0, pad = 0;
  bool strict = true;  // require input extents divisible by their strides

  std::size_t out_depth() const { return (depth + 2 * pad_d - kernel_d) / stride_d + 1; }
  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t patch() const { return in_channels * kernel_d * kernel * kernel; }
  std::size_t out_pixels() const { return out_depth() * out_height() * out_width(); }
  /// Throws GeometryError for even kernels, a padded input smaller than the
  /// kernel, or (strict) an extent not divisible by its stride.
  void validate() const;
};

/// Cross-correlation via im2col + gemm. x: Cin×D×H×W, w: Cout×Cin×kd×k×k.
template <typename T>
void conv_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* out);

/// Accumulates (+=) into dx, dw, db; any of them may be null.
template <typename T>
void conv_backward(const ConvGeometry& g, const T* x, const T* w, const T* dout,
                   T* dx, T* dw, T* db);

/// In-place numerically stable softmax over each contiguous row.
template <typename T>
void softmax_rows(T* data, std::size_t rows, std::size_t cols);

enum class ResampleMode { kAdaptiveAvgPool, kMaxPool, kBilinearUp, kNearestUp };

/// x: C×H×W → out: C×H2×W2. For kMaxPool, argmax (flat H×W index per output)
/// is written when non-null.
template <typename T>
void resample_forward(ResampleMode mode, std::size_t channels, std::size_t h,
                      std::size_t w, std::size_t h2, std::size_t w2, const T* x, T* out,
                      std::uint32_t* argmax);

template <typename T>
void resample_backward(ResampleMode mode, std::size_t channels, std::size_t h,
                       std::size_t w, std::size_t h2, std::size_t w2, const T* dout,
                       const std::uint32_t* argmax, T* dx);

/// Adaptive pooling cell bounds [begin, end) for output index i.
inline std::size_t pool_begin(std::size_t i, std::size_t in, std::size_t out) {
  return (i * in) / out;
}
inline std::size_t pool_end(std::size_t i, std::size_t in, std::size_t out) {
  return ((i + 1) * in + out - 1) / out;
}

/// Which (query, key) pairs are excluded from attention.
struct AttentionMask {
  enum class Kind { kNone, kKey, kPair } kind = Kind::kNone;
  std::vector<std::uint8_t> key;   // per key token (global index), 1 = masked
  std::vector<std::uint8_t> pair;  // N×N over global indices, 1 = masked
  std::size_t tokens = 0;

  bool masked(std::size_t q, std::size_t k) const {
    switch (kind) {
      case Kind::kKey: return key[k] != 0;
      case Kind::kPair: return pair[q * tokens + k] != 0;
      default: return false;
    }
  }
  bool any() const;
};

struct AttentionShape {
  std::size_t tokens = 0;    // N, total over all groups
  std::size_t channels = 0;  // C = heads·head_dim
  std::size_t heads = 1;
  std::size_t groups = 1;    // attention runs independently inside each contiguous group
  std::size_t head_dim() const { return channels / heads; }
  std::size_t group_tokens() const { return tokens / groups; }
};

/// Fused multi-head attention. q, k, v, out: N×C. probs receives, per
/// (group, head), the n×n post-softmax weights (layout [g][h][i][j]).
/// Masked scores take the value `sentinel` before the softmax and their
/// weight is forced to exactly zero; queries with every key masked get an
/// all-zero weight row and therefore a zero output.
template <typename T>
void attention_forward(const AttentionShape& s, const AttentionMask& mask, T scale,
                       T sentinel, const T* q, const T* k, const T* v, T* out, T* probs);

/// Accumulates (+=) into dq, dk, dv.
template <typename T>
void attention_backward(const AttentionShape& s, const AttentionMask& mask, T scale,
                        const T* q, const T* k, const T* v, const T* probs,
                        const T* dout, T* dq, T* dk, T* dv);

/// Worker count used by the parallel kernels (1 when built without OpenMP).
int max_threads();

}  // namespace osvi::kernels
