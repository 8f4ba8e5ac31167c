#include "osvi/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>

namespace osvi {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcast-compatible");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace {

template <typename T>
void add_into(T* dst, const T* src, std::size_t n) {
  if (dst == nullptr) return;
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> st(r, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t d = in.size() - 1 - k;
    const std::size_t od = r - 1 - k;
    st[od] = in[d] == 1 ? 0 : stride;
    stride *= in[d];
  }
  return st;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  const std::size_t r = out.size();
  const std::size_t inner = out.back();
  const std::size_t outer = shape_numel(out) / inner;
  std::vector<std::size_t> idx(r, 0);
  std::size_t o = 0;
  for (std::size_t blk = 0; blk < outer; ++blk) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t d = 0; d + 1 < r; ++d) {
      ia += idx[d] * sa[d];
      ib += idx[d] * sb[d];
    }
    for (std::size_t j = 0; j < inner; ++j, ++o) f(o, ia + j * sa[r - 1], ib + j * sb[r - 1]);
    for (std::size_t d = r - 1; d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
}

enum class BinKind { kAdd, kSub, kMul };

template <typename T>
Var<T> binary(Var<T> a, Var<T> b, BinKind kind) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Shape out_shape = broadcast_shape(av.shape(), bv.shape());
  Tensor<T> out(out_shape);
  auto apply = [kind](T x, T y) {
    switch (kind) {
      case BinKind::kAdd: return x + y;
      case BinKind::kSub: return x - y;
      default: return x * y;
    }
  };
  const bool same = av.shape() == bv.shape();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(av[i], bv[i]);
  } else {
    for_each_broadcast(out_shape, av.shape(), bv.shape(),
                       [&](std::size_t o, std::size_t i, std::size_t j) {
                         out[o] = apply(av[i], bv[j]);
                       });
  }
  const std::size_t ia = a.id(), ib = b.id();
  const Shape sa = av.shape(), sb = bv.shape();
  return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_target(ia);
    T* gb = t.grad_target(ib);
    const Tensor<T>& x = t.value(ia);
    const Tensor<T>& y = t.value(ib);
    auto body = [&](std::size_t o, std::size_t i, std::size_t j) {
      const T gv = g[o];
      switch (kind) {
        case BinKind::kAdd:
          if (ga) ga[i] += gv;
          if (gb) gb[j] += gv;
          break;
        case BinKind::kSub:
          if (ga) ga[i] += gv;
          if (gb) gb[j] -= gv;
          break;
        case BinKind::kMul:
          if (ga) ga[i] += gv * y[j];
          if (gb) gb[j] += gv * x[i];
          break;
      }
    };
    if (same) {
      for (std::size_t o = 0; o < g.size(); ++o) body(o, o, o);
    } else {
      for_each_broadcast(g.shape(), sa, sb, body);
    }
  });
}

// Unary elementwise op from a value function and a derivative expressed in
// terms of (input, output).
template <typename T, typename F, typename D>
Var<T> unary(Var<T> a, F f, D df) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const std::size_t ia = a.id();
  const std::size_t io = a.tape().size();  // id the output will receive
  return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_target(ia);
    if (!ga) return;
    const Tensor<T>& x = t.value(ia);
    const Tensor<T>& y = t.value(io);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

template <typename T>
thread_local AttentionRecorder<T>* g_recorder = nullptr;

}  // namespace

// --- linear algebra ---------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw DimensionError("matmul shape mismatch: " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor<T> out({m, n});
  kernels::gemm(false, false, m, n, k, T{1}, a.value().ptr(), b.value().ptr(), T{0}, out.ptr());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (T* ga = t.grad_target(ia))
      kernels::gemm(false, true, m, k, n, T{1}, g.ptr(), t.value(ib).ptr(), T{1}, ga);
    if (T* gb = t.grad_target(ib))
      kernels::gemm(true, false, k, n, m, T{1}, t.value(ia).ptr(), g.ptr(), T{1}, gb);
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const Shape& s = a.shape();
  if (s.size() != 2) throw DimensionError("transpose needs rank 2, got " + shape_str(s));
  const std::size_t r = s[0], c = s[1];
  Tensor<T> out({c, r});
  const T* x = a.value().ptr();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_target(ia);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, const Var<T>* b) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1]) {
    throw DimensionError("linear shape mismatch: input " + shape_str(sx) + " weight " +
                         shape_str(sw));
  }
  const std::size_t n = sx[0], cin = sx[1], cout = sw[0];
  if (b != nullptr && b->shape() != Shape{cout}) {
    throw DimensionError("linear bias " + shape_str(b->shape()) + " for " + std::to_string(cout) +
                         " outputs");
  }
  Tensor<T> out({n, cout});
  kernels::gemm(false, true, n, cout, cin, T{1}, x.value().ptr(), w.value().ptr(), T{0},
                out.ptr());
  std::vector<Var<T>> inputs{x, w};
  if (b != nullptr) {
    const T* bv = b->value().ptr();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < cout; ++j) out[i * cout + j] += bv[j];
    inputs.push_back(*b);
  }
  const std::size_t ix = x.id(), iw = w.id();
  const std::size_t ib = b != nullptr ? b->id() : 0;
  const bool has_b = b != nullptr;
  return x.tape().record(std::move(out), inputs, [=](Tape<T>& t, const Tensor<T>& g) {
    if (T* gx = t.grad_target(ix))
      kernels::gemm(false, false, n, cin, cout, T{1}, g.ptr(), t.value(iw).ptr(), T{1}, gx);
    if (T* gw = t.grad_target(iw))
      kernels::gemm(true, false, cout, cin, n, T{1}, g.ptr(), t.value(ix).ptr(), T{1}, gw);
    if (has_b) {
      if (T* gb = t.grad_target(ib)) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < cout; ++j) gb[j] += g[i * cout + j];
      }
    }
  });
}

// --- elementwise --------------------------------------------------------------

template <typename T> Var<T> add(Var<T> a, Var<T> b) { return binary(a, b, BinKind::kAdd); }
template <typename T> Var<T> sub(Var<T> a, Var<T> b) { return binary(a, b, BinKind::kSub); }
template <typename T> Var<T> mul(Var<T> a, Var<T> b) { return binary(a, b, BinKind::kMul); }

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  return unary(a, [s](T x) { return x + s; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary(a, [](T x) { return x > T{0} ? x : T{0}; },
               [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return unary(
      a, [](T x) { return T(0.5) * x * (T{1} + std::erf(x * kInvSqrt2)); },
      [](T x, T) {
        return T(0.5) * (T{1} + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-T(0.5) * x * x);
      });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary(
      a,
      [](T x) {
        if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
        const T e = std::exp(x);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> abs(Var<T> a) {
  return unary(a, [](T x) { return std::abs(x); },
               [](T x, T) { return x > T{0} ? T{1} : (x < T{0} ? T{-1} : T{0}); });
}

template <typename T>
Var<T> log(Var<T> a) {
  for (T v : a.value().data()) {
    if (!(v > T{0})) throw EvaluationError("log of non-positive value");
  }
  return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  return unary(a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
               [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T{1} : T{0}; });
}

// --- shape ----------------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, const Tensor<T>& g) {
    add_into(t.grad_target(ia), g.ptr(), g.size());
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat axis out of range for " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) {
      throw DimensionError("concat shape mismatch: " + shape_str(s0) + " vs " + shape_str(s) +
                           " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  const AxisView ov = axis_view(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> ids, lens;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis];
    const T* src = p.value().ptr();
    for (std::size_t o = 0; o < ov.outer; ++o)
      std::copy(src + o * len * ov.inner, src + (o + 1) * len * ov.inner,
                out.ptr() + (o * ov.len + off) * ov.inner);
    ids.push_back(p.id());
    lens.push_back(len);
    off += len;
  }
  return parts[0].tape().record(std::move(out), parts, [=](Tape<T>& t, const Tensor<T>& g) {
    std::size_t start = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (T* gp = t.grad_target(ids[k])) {
        for (std::size_t o = 0; o < ov.outer; ++o) {
          const T* src = g.ptr() + (o * ov.len + start) * ov.inner;
          add_into(gp + o * lens[k] * ov.inner, src, lens[k] * ov.inner);
        }
      }
      start += lens[k];
    }
  });
}

template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  const AxisView v = axis_view(s, axis);
  if (begin >= end || end > v.len) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(s));
  }
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const std::size_t len = end - begin;
  Tensor<T> out(out_shape);
  const T* src = a.value().ptr();
  for (std::size_t o = 0; o < v.outer; ++o)
    std::copy(src + (o * v.len + begin) * v.inner, src + (o * v.len + end) * v.inner,
              out.ptr() + o * len * v.inner);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_target(ia);
    if (!ga) return;
    for (std::size_t o = 0; o < v.outer; ++o)
      add_into(ga + (o * v.len + begin) * v.inner, g.ptr() + o * len * v.inner, len * v.inner);
  });
}

template <typename T>
Var<T> swap_leading(Var<T> a) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw DimensionError("swap_leading needs rank >= 2, got " + shape_str(s));
  const std::size_t d0 = s[0], d1 = s[1];
  const std::size_t inner = shape_numel(s) / (d0 * d1);
  Shape out_shape = s;
  std::swap(out_shape[0], out_shape[1]);
  Tensor<T> out(out_shape);
  const T* x = a.value().ptr();
  for (std::size_t i = 0; i < d0; ++i)
    for (std::size_t j = 0; j < d1; ++j)
      std::copy(x + (i * d1 + j) * inner, x + (i * d1 + j + 1) * inner,
                out.ptr() + (j * d0 + i) * inner);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_target(ia);
    if (!ga) return;
    for (std::size_t i = 0; i < d0; ++i)
      for (std::size_t j = 0; j < d1; ++j)
        add_into(ga + (i * d1 + j) * inner, g.ptr() + (j * d0 + i) * inner, inner);
  });
}

template <typename T>
Var<T> detach(Var<T> a) {
  return a.tape().constant(a.value());
}

// --- reductions -------------------------------------------------------------------

template <typename T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (T v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor<T>::scalar(s), {a}, [=](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_target(ia);
    if (!ga) return;
    const std::size_t n = t.value(ia).size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

namespace {

enum class ReduceKind { kSum, kMean, kMax };

template <typename T>
Var<T> reduce_axis(Var<T> a, std::size_t axis, ReduceKind kind) {
  const AxisView v = axis_view(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = 1;
  Tensor<T> out(out_shape);
  std::vector<std::uint32_t> arg;
  if (kind == ReduceKind::kMax) arg.resize(v.outer * v.inner);
  const T* x = a.value().ptr();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const T* base = x + o * v.len * v.inner + i;
      T acc = base[0];
      std::uint32_t best = 0;
      for (std::size_t l = 1; l < v.len; ++l) {
        const T val = base[l * v.inner];
        if (kind == ReduceKind::kMax) {
          if (val > acc) {
            acc = val;
            best = static_cast<std::uint32_t>(l);
          }
        } else {
          acc += val;
        }
      }
      if (kind == ReduceKind::kMean) acc /= static_cast<T>(v.len);
      if (kind == ReduceKind::kMax) arg[o * v.inner + i] = best;
      out[o * v.inner + i] = acc;
    }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [=, arg = std::move(arg)](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_target(ia);
    if (!ga) return;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const T gv = g[o * v.inner + i];
        T* base = ga + o * v.len * v.inner + i;
        if (kind == ReduceKind::kMax) {
          base[arg[o * v.inner + i] * v.inner] += gv;
        } else {
          const T share = kind == ReduceKind::kMean ? gv / static_cast<T>(v.len) : gv;
          for (std::size_t l = 0; l < v.len; ++l) base[l * v.inner] += share;
        }
      }
  });
}

}  // namespace

template <typename T> Var<T> sum_axis(Var<T> a, std::size_t axis) { return reduce_axis(a, axis, ReduceKind::kSum); }
template <typename T> Var<T> mean_axis(Var<T> a, std::size_t axis) { return reduce_axis(a, axis, ReduceKind::kMean); }
template <typename T> Var<T> max_axis(Var<T> a, std::size_t axis) { return reduce_axis(a, axis, ReduceKind::kMax); }

// --- softmax family -------------------------------------------------------------------

template <typename T>
Var<T> softmax(Var<T> a, std::size_t axis) {
  const AxisView v = axis_view(a.shape(), axis);
  Tensor<T> out = a.value();
  if (v.inner == 1) {
    kernels::softmax_rows(out.ptr(), v.outer, v.len);
  } else {
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        T* base = out.ptr() + o * v.len * v.inner + i;
        T mx = base[0];
        for (std::size_t l = 1; l < v.len; ++l) mx = std::max(mx, base[l * v.inner]);
        T s{0};
        for (std::size_t l = 0; l < v.len; ++l) {
          base[l * v.inner] = std::exp(base[l * v.inner] - mx);
          s += base[l * v.inner];
        }
        for (std::size_t l = 0; l < v.len; ++l) base[l * v.inner] /= s;
      }
  }
  const std::size_t ia = a.id();
  const std::size_t io = a.tape().size();
  return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_target(ia);
    if (!ga) return;
    const Tensor<T>& y = t.value(io);
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t b = o * v.len * v.inner + i;
        T dot{0};
        for (std::size_t l = 0; l < v.len; ++l) dot += y[b + l * v.inner] * g[b + l * v.inner];
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t k = b + l * v.inner;
          ga[k] += y[k] * (g[k] - dot);
        }
      }
  });
}

template <typename T>
Var<T> log_softmax(Var<T> a, std::size_t axis) {
  const AxisView v = axis_view(a.shape(), axis);
  Tensor<T> out = a.value();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      T* base = out.ptr() + o * v.len * v.inner + i;
      T mx = base[0];
      for (std::size_t l = 1; l < v.len; ++l) mx = std::max(mx, base[l * v.inner]);
      T s{0};
      for (std::size_t l = 0; l < v.len; ++l) s += std::exp(base[l * v.inner] - mx);
      const T lse = mx + std::log(s);
      for (std::size_t l = 0; l < v.len; ++l) base[l * v.inner] -= lse;
    }
  const std::size_t ia = a.id();
  const std::size_t io = a.tape().size();
  return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_target(ia);
    if (!ga) return;
    const Tensor<T>& y = t.value(io);
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t b = o * v.len * v.inner + i;
        T gs{0};
        for (std::size_t l = 0; l < v.len; ++l) gs += g[b + l * v.inner];
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t k = b + l * v.inner;
          ga[k] += g[k] - std::exp(y[k]) * gs;
        }
      }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const Shape& s = x.shape();
  const std::size_t c = s.back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("layer_norm affine " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " for input " + shape_str(s));
  }
  const std::size_t n = x.size() / c;
  Tensor<T> out(s);
  std::vector<T> rstd(n);
  Tensor<T> xhat(s);
  const T* xv = x.value().ptr();
  const T* gv = gamma.value().ptr();
  const T* bv = beta.value().ptr();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv + i * c;
    T mu{0};
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var{0};
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    rstd[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (row[j] - mu) * rstd[i];
      xhat[i * c + j] = h;
      out[i * c + j] = gv[j] * h + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [=, rstd = std::move(rstd), xhat = std::move(xhat)](Tape<T>& t, const Tensor<T>& g) {
        T* gx = t.grad_target(ix);
        T* gg = t.grad_target(ig);
        T* gb = t.grad_target(ib);
        const T* gam = t.value(ig).ptr();
        std::vector<T> dh(c);
        for (std::size_t i = 0; i < n; ++i) {
          const T* grow = g.ptr() + i * c;
          const T* h = xhat.ptr() + i * c;
          T m1{0}, m2{0};
          for (std::size_t j = 0; j < c; ++j) {
            if (gg) gg[j] += grow[j] * h[j];
            if (gb) gb[j] += grow[j];
            dh[j] = grow[j] * gam[j];
            m1 += dh[j];
            m2 += dh[j] * h[j];
          }
          if (!gx) continue;
          m1 /= static_cast<T>(c);
          m2 /= static_cast<T>(c);
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += rstd[i] * (dh[j] - m1 - h[j] * m2);
        }
      });
}

// --- convolution / resampling ------------------------------------------------------------

namespace {

template <typename T>
Var<T> conv_generic(Var<T> x, Var<T> w, const Var<T>* bias, kernels::ConvGeometry geo,
                    Shape out_shape) {
  geo.validate();
  Tensor<T> out(out_shape);
  kernels::conv_forward(geo, x.value().ptr(), w.value().ptr(),
                        bias != nullptr ? bias->value().ptr() : nullptr, out.ptr());
  std::vector<Var<T>> inputs{x, w};
  if (bias != nullptr) inputs.push_back(*bias);
  const std::size_t ix = x.id(), iw = w.id();
  const std::size_t ib = bias != nullptr ? bias->id() : 0;
  const bool has_b = bias != nullptr;
  return x.tape().record(std::move(out), inputs, [=](Tape<T>& t, const Tensor<T>& g) {
    kernels::conv_backward(geo, t.value(ix).ptr(), t.value(iw).ptr(), g.ptr(),
                           t.grad_target(ix), t.grad_target(iw),
                           has_b ? t.grad_target(ib) : nullptr);
  });
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, const Var<T>* bias, std::size_t stride, std::size_t pad) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 3 || sw.size() != 4 || sw[1] != sx[0] || sw[2] != sw[3]) {
    throw DimensionError("conv2d shape mismatch: input " + shape_str(sx) + " weight " +
                         shape_str(sw));
  }
  if (bias != nullptr && bias->shape() != Shape{sw[0]}) {
    throw DimensionError("conv2d bias " + shape_str(bias->shape()) + " for weight " +
                         shape_str(sw));
  }
  kernels::ConvGeometry geo;
  geo.in_channels = sx[0];
  geo.out_channels = sw[0];
  geo.height = sx[1];
  geo.width = sx[2];
  geo.kernel = sw[2];
  geo.stride = stride;
  geo.pad = pad;
  geo.validate();
  return conv_generic(x, w, bias, geo, Shape{geo.out_channels, geo.out_height(), geo.out_width()});
}

template <typename T>
Var<T> conv3d(Var<T> x, Var<T> w, const Var<T>* bias, std::size_t stride_d, std::size_t stride,
              std::size_t pad) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 5 || sw[1] != sx[0] || sw[2] != sw[3] || sw[3] != sw[4]) {
    throw DimensionError("conv3d shape mismatch: input " + shape_str(sx) + " weight " +
                         shape_str(sw));
  }
  if (bias != nullptr && bias->shape() != Shape{sw[0]}) {
    throw DimensionError("conv3d bias " + shape_str(bias->shape()) + " for weight " +
                         shape_str(sw));
  }
  kernels::ConvGeometry geo;
  geo.in_channels = sx[0];
  geo.out_channels = sw[0];
  geo.depth = sx[1];
  geo.height = sx[2];
  geo.width = sx[3];
  geo.kernel = geo.kernel_d = sw[2];
  geo.stride = stride;
  geo.stride_d = stride_d;
  geo.pad = geo.pad_d = pad;
  geo.strict = false;
  geo.validate();
  return conv_generic(
      x, w, bias, geo,
      Shape{geo.out_channels, geo.out_depth(), geo.out_height(), geo.out_width()});
}

template <typename T>
Var<T> resample(Var<T> x, std::size_t h2, std::size_t w2, kernels::ResampleMode mode) {
  using kernels::ResampleMode;
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 3) {
    throw DimensionError("resample needs H×W or C×H×W, got " + shape_str(s));
  }
  const std::size_t c = s.size() == 3 ? s[0] : 1;
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  if (h2 == 0 || w2 == 0) throw DimensionError("resample target must be positive");
  const bool pool = mode == ResampleMode::kAdaptiveAvgPool || mode == ResampleMode::kMaxPool;
  if (pool && (h2 > h || w2 > w)) {
    throw ModeError("pooling cannot upscale " + std::to_string(h) + "x" + std::to_string(w) +
                    " to " + std::to_string(h2) + "x" + std::to_string(w2));
  }
  if (!pool && (h2 < h || w2 < w)) {
    throw ModeError("upsampling cannot downscale " + std::to_string(h) + "x" +
                    std::to_string(w) + " to " + std::to_string(h2) + "x" + std::to_string(w2));
  }
  Shape out_shape = s.size() == 3 ? Shape{c, h2, w2} : Shape{h2, w2};
  Tensor<T> out(out_shape);
  std::vector<std::uint32_t> arg;
  if (mode == ResampleMode::kMaxPool) arg.resize(c * h2 * w2);
  kernels::resample_forward(mode, c, h, w, h2, w2, x.value().ptr(), out.ptr(),
                            arg.empty() ? nullptr : arg.data());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x},
                         [=, arg = std::move(arg)](Tape<T>& t, const Tensor<T>& g) {
                           T* gx = t.grad_target(ix);
                           if (!gx) return;
                           kernels::resample_backward(mode, c, h, w, h2, w2, g.ptr(),
                                                      arg.empty() ? nullptr : arg.data(), gx);
                         });
}

template <typename T>
Var<T> masked_fill(Var<T> s, const Tensor<std::uint8_t>& mask, T sentinel) {
  if (mask.shape() != s.shape()) {
    throw DimensionError("masked_fill mask " + shape_str(mask.shape()) + " vs scores " +
                         shape_str(s.shape()));
  }
  Tensor<T> out = s.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = sentinel;
  const std::size_t is = s.id();
  return s.tape().record(std::move(out), {s}, [=](Tape<T>& t, const Tensor<T>& g) {
    T* gs = t.grad_target(is);
    if (!gs) return;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!mask[i]) gs[i] += g[i];
  });
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const kernels::AttentionShape& shape,
                 const kernels::AttentionMask& mask, T scale) {
  const Shape expect{shape.tokens, shape.channels};
  if (q.shape() != expect || k.shape() != expect || v.shape() != expect) {
    throw DimensionError("attention expects q/k/v of " + shape_str(expect) + ", got " +
                         shape_str(q.shape()) + "/" + shape_str(k.shape()) + "/" +
                         shape_str(v.shape()));
  }
  if (shape.heads == 0 || shape.channels % shape.heads != 0 || shape.groups == 0 ||
      shape.tokens % shape.groups != 0) {
    throw DimensionError("attention: channels must divide into heads and tokens into groups");
  }
  if (mask.kind == kernels::AttentionMask::Kind::kKey && mask.key.size() != shape.tokens) {
    throw DimensionError("attention key mask has " + std::to_string(mask.key.size()) +
                         " entries for " + std::to_string(shape.tokens) + " tokens");
  }
  if (mask.kind == kernels::AttentionMask::Kind::kPair &&
      (mask.tokens != shape.tokens || mask.pair.size() != shape.tokens * shape.tokens)) {
    throw DimensionError("attention pair mask does not match token count");
  }
  const std::size_t n = shape.group_tokens();
  const std::size_t np = shape.groups * shape.heads * n * n;
  std::shared_ptr<T[]> probs(new T[np]);
  Tensor<T> out(expect);
  kernels::attention_forward(shape, mask, scale, T(kMaskSentinel), q.value().ptr(),
                             k.value().ptr(), v.value().ptr(), out.ptr(), probs.get());
  if (g_recorder<T> != nullptr) {
    g_recorder<T>->calls.push_back({shape, std::vector<T>(probs.get(), probs.get() + np)});
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  const auto mask_copy = std::make_shared<kernels::AttentionMask>(mask);
  return q.tape().record(std::move(out), {q, k, v}, [=](Tape<T>& t, const Tensor<T>& g) {
    const std::size_t total = shape.tokens * shape.channels;
    std::vector<T> dq(total, T{0}), dk(total, T{0}), dv(total, T{0});
    kernels::attention_backward(shape, *mask_copy, scale, t.value(iq).ptr(), t.value(ik).ptr(),
                                t.value(iv).ptr(), probs.get(), g.ptr(), dq.data(),
                                dk.data(), dv.data());
    add_into(t.grad_target(iq), dq.data(), total);
    add_into(t.grad_target(ik), dk.data(), total);
    add_into(t.grad_target(iv), dv.data(), total);
  });
}

template <typename T>
AttentionRecorder<T>* set_attention_recorder(AttentionRecorder<T>* rec) {
  AttentionRecorder<T>* prev = g_recorder<T>;
  g_recorder<T> = rec;
  return prev;
}

#define OSVI_INSTANTIATE_OPS(T)                                                              \
  template Var<T> matmul(Var<T>, Var<T>);                                                    \
  template Var<T> transpose(Var<T>);                                                         \
  template Var<T> linear(Var<T>, Var<T>, const Var<T>*);                                     \
  template Var<T> add(Var<T>, Var<T>);                                                       \
  template Var<T> sub(Var<T>, Var<T>);                                                       \
  template Var<T> mul(Var<T>, Var<T>);                                                       \
  template Var<T> add_scalar(Var<T>, T);                                                     \
  template Var<T> scale(Var<T>, T);                                                          \
  template Var<T> relu(Var<T>);                                                              \
  template Var<T> gelu(Var<T>);                                                              \
  template Var<T> sigmoid(Var<T>);                                                           \
  template Var<T> abs(Var<T>);                                                               \
  template Var<T> log(Var<T>);                                                               \
  template Var<T> clamp(Var<T>, T, T);                                                       \
  template Var<T> reshape(Var<T>, Shape);                                                    \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                           \
  template Var<T> slice(Var<T>, std::size_t, std::size_t, std::size_t);                      \
  template Var<T> swap_leading(Var<T>);                                                      \
  template Var<T> detach(Var<T>);                                                            \
  template Var<T> sum(Var<T>);                                                               \
  template Var<T> mean(Var<T>);                                                              \
  template Var<T> sum_axis(Var<T>, std::size_t);                                             \
  template Var<T> mean_axis(Var<T>, std::size_t);                                            \
  template Var<T> max_axis(Var<T>, std::size_t);                                             \
  template Var<T> softmax(Var<T>, std::size_t);                                              \
  template Var<T> log_softmax(Var<T>, std::size_t);                                          \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                     \
  template Var<T> conv2d(Var<T>, Var<T>, const Var<T>*, std::size_t, std::size_t);           \
  template Var<T> conv3d(Var<T>, Var<T>, const Var<T>*, std::size_t, std::size_t,            \
                         std::size_t);                                                       \
  template Var<T> resample(Var<T>, std::size_t, std::size_t, kernels::ResampleMode);         \
  template Var<T> masked_fill(Var<T>, const Tensor<std::uint8_t>&, T);                       \
  template Var<T> attention(Var<T>, Var<T>, Var<T>, const kernels::AttentionShape&,          \
                            const kernels::AttentionMask&, T);                               \
  template AttentionRecorder<T>* set_attention_recorder(AttentionRecorder<T>*);
OSVI_INSTANTIATE_OPS(float)
OSVI_INSTANTIATE_OPS(double)
#undef OSVI_INSTANTIATE_OPS

}  // namespace osvi
