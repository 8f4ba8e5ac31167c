#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "osvi/autodiff.hpp"

namespace osvi {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter moments, aligned by position with the parameter list the
/// state was created for.
template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<Tensor<T>> m, v;
  std::uint64_t step = 0;
};

template <typename T>
AdamState<T> make_adam_state(const std::vector<Parameter<T>*>& params, AdamConfig cfg = {}) {
  AdamState<T> st;
  st.config = cfg;
  for (const auto* p : params) {
    st.m.push_back(Tensor<T>::zeros(p->value.shape()));
    st.v.push_back(Tensor<T>::zeros(p->value.shape()));
  }
  return st;
}

/// One bias-corrected Adam update from each parameter's accumulated grad.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& st) {
  if (st.m.size() != params.size()) {
    throw DimensionError("adam state holds " + std::to_string(st.m.size()) + " moments for " +
                         std::to_string(params.size()) + " parameters");
  }
  ++st.step;
  const AdamConfig& c = st.config;
  const double t = static_cast<double>(st.step);
  const T bc1 = static_cast<T>(1.0 - std::pow(c.beta1, t));
  const T bc2 = static_cast<T>(1.0 - std::pow(c.beta2, t));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T lr = static_cast<T>(c.lr), eps = static_cast<T>(c.eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<T>& p = *params[k];
    if (p.grad.shape() != p.value.shape() || st.m[k].shape() != p.value.shape()) {
      throw DimensionError("adam: parameter " + p.name + " " + shape_str(p.value.shape()) +
                           " vs grad " + shape_str(p.grad.shape()));
    }
    T* m = st.m[k].ptr();
    T* v = st.v[k].ptr();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = p.grad[i];
      m[i] = b1 * m[i] + (T{1} - b1) * g;
      v[i] = b2 * v[i] + (T{1} - b2) * g * g;
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace osvi
