#pragma once

// Differentiable operations on tape variables. Every op computes its value
// eagerly and records a backward rule; see autodiff.hpp.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "osvi/autodiff.hpp"
#include "osvi/kernels.hpp"

namespace osvi {

inline constexpr double kMaskSentinel = -1e9;

// --- linear algebra -------------------------------------------------------
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> transpose(Var<T> a);
/// x: N×Cin, w: Cout×Cin, optional b: Cout → N×Cout.
template <typename T> Var<T> linear(Var<T> x, Var<T> w, const Var<T>* b);

// --- elementwise (numpy broadcasting for binary kinds) --------------------
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> add_scalar(Var<T> a, T s);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> abs(Var<T> a);
template <typename T> Var<T> log(Var<T> a);
/// Gradient is zero wherever the input lies outside [lo, hi].
template <typename T> Var<T> clamp(Var<T> a, T lo, T hi);

// --- shape ------------------------------------------------------------------
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <typename T> Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t end);
/// Swaps the two leading axes (A×B×rest → B×A×rest).
template <typename T> Var<T> swap_leading(Var<T> a);
/// Constant copy: gradients stop here.
template <typename T> Var<T> detach(Var<T> a);

// --- reductions -------------------------------------------------------------
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
/// Reductions over one axis; the axis is kept with extent 1.
template <typename T> Var<T> sum_axis(Var<T> a, std::size_t axis);
template <typename T> Var<T> mean_axis(Var<T> a, std::size_t axis);
template <typename T> Var<T> max_axis(Var<T> a, std::size_t axis);

// --- neural-network primitives ----------------------------------------------
template <typename T> Var<T> softmax(Var<T> a, std::size_t axis);
template <typename T> Var<T> log_softmax(Var<T> a, std::size_t axis);
/// Normalizes over the last axis with population variance.
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
/// x: Cin×H×W, w: Cout×Cin×k×k, optional bias: Cout.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, const Var<T>* bias, std::size_t stride, std::size_t pad);
/// x: Cin×D×H×W, w: Cout×Cin×k×k×k, optional bias: Cout.
template <typename T>
Var<T> conv3d(Var<T> x, Var<T> w, const Var<T>* bias, std::size_t stride_d, std::size_t stride,
              std::size_t pad);
/// x: C×H×W (or H×W) → C×H2×W2. Pool modes only shrink, up modes only grow.
template <typename T>
Var<T> resample(Var<T> x, std::size_t h2, std::size_t w2, kernels::ResampleMode mode);
/// out[i] = sentinel where mask[i] != 0, else s[i]; masked entries pass no gradient.
template <typename T>
Var<T> masked_fill(Var<T> s, const Tensor<std::uint8_t>& mask, T sentinel = T(kMaskSentinel));
/// Fused multi-head attention over N×C q/k/v; see kernels::attention_forward.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const kernels::AttentionShape& shape,
                 const kernels::AttentionMask& mask, T scale);

/// While installed on the current thread, every attention() call appends a
/// copy of its post-softmax weights (layout [group][head][i][j]) here.
template <typename T>
struct AttentionRecorder {
  struct Entry {
    kernels::AttentionShape shape;
    std::vector<T> weights;
  };
  std::vector<Entry> calls;
};
/// Installs `rec` (or clears with nullptr); returns the previous recorder.
template <typename T> AttentionRecorder<T>* set_attention_recorder(AttentionRecorder<T>* rec);

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

/// Numpy-style broadcast result shape; throws DimensionError naming both shapes.
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace osvi
