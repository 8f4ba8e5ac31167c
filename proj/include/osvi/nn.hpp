#pragma once

// Parameter storage and the small layer vocabulary the networks are built
// from. Layers hold pointers into a ParamStore; they are cheap to copy and
// carry no tape state.

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "osvi/autodiff.hpp"
#include "osvi/ops.hpp"
#include "osvi/rng.hpp"

namespace osvi {

template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Parameter<T>& add(const std::string& name, Shape shape) {
    if (index_.count(name) != 0) throw ContractError("duplicate parameter name " + name);
    params_.push_back(Parameter<T>{name, Tensor<T>::zeros(shape), Tensor<T>::zeros(shape)});
    index_[name] = params_.size() - 1;
    return params_.back();
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  std::vector<Parameter<T>*> all() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  /// Parameters whose name starts with `prefix`.
  std::vector<Parameter<T>*> with_prefix(const std::string& prefix) {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_)
      if (p.name.compare(0, prefix.size(), prefix) == 0) out.push_back(&p);
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::deque<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
void init_uniform(Parameter<T>& p, double bound, Rng& rng) {
  for (auto& v : p.value.data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
struct Conv2d {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  std::size_t stride = 1;

  Conv2d() = default;
  /// He-uniform weights, zero bias.
  Conv2d(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
         std::size_t k, std::size_t stride_, Rng& rng)
      : weight(&store.add(name + ".w", {cout, cin, k, k})),
        bias(&store.add(name + ".b", {cout})),
        stride(stride_) {
    init_uniform(*weight, std::sqrt(6.0 / static_cast<double>(cin * k * k)), rng);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    Var<T> b = tape.parameter(*bias);
    return conv2d(x, tape.parameter(*weight), &b, stride, weight->value.dim(2) / 2);
  }
};

template <typename T>
struct Conv3d {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  std::size_t stride_t = 1, stride_s = 1;

  Conv3d() = default;
  Conv3d(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
         std::size_t stride_t_, std::size_t stride_s_, Rng& rng)
      : weight(&store.add(name + ".w", {cout, cin, 3, 3, 3})),
        bias(&store.add(name + ".b", {cout})),
        stride_t(stride_t_),
        stride_s(stride_s_) {
    init_uniform(*weight, std::sqrt(6.0 / static_cast<double>(cin * 27)), rng);
  }

  /// `frozen` uses the weights as constants (no gradient reaches them).
  Var<T> operator()(Tape<T>& tape, Var<T> x, bool frozen = false) const {
    Var<T> w = frozen ? tape.constant(weight->value) : tape.parameter(*weight);
    Var<T> b = frozen ? tape.constant(bias->value) : tape.parameter(*bias);
    return conv3d(x, w, &b, stride_t, stride_s, 1);
  }
};

template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
         Rng& rng, double gain = 1.0)
      : weight(&store.add(name + ".w", {cout, cin})), bias(&store.add(name + ".b", {cout})) {
    init_uniform(*weight, gain * std::sqrt(3.0 / static_cast<double>(cin)), rng);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x, bool frozen = false) const {
    Var<T> w = frozen ? tape.constant(weight->value) : tape.parameter(*weight);
    Var<T> b = frozen ? tape.constant(bias->value) : tape.parameter(*bias);
    return linear(x, w, &b);
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t c)
      : gamma(&store.add(name + ".gamma", {c})), beta(&store.add(name + ".beta", {c})) {
    gamma->value.fill(T{1});
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    return layer_norm(x, tape.parameter(*gamma), tape.parameter(*beta));
  }
};

/// Convolutional block attention: a channel gate from a shared MLP over
/// average- and max-pooled channel descriptors, then a spatial gate from a
/// 7×7 conv over the channelwise mean/max maps.
template <typename T>
struct Cbam {
  Linear<T> fc1, fc2;
  Conv2d<T> spatial;

  Cbam() = default;
  Cbam(ParamStore<T>& store, const std::string& name, std::size_t channels, Rng& rng,
       std::size_t reduction = 4)
      : fc1(store, name + ".fc1", channels, std::max<std::size_t>(1, channels / reduction), rng),
        fc2(store, name + ".fc2", std::max<std::size_t>(1, channels / reduction), channels, rng),
        spatial(store, name + ".spatial", 2, 1, 7, 1, rng) {}

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Var<T> flat = reshape(x, {c, h * w});
    Var<T> avg = reshape(mean_axis(flat, 1), {1, c});
    Var<T> mx = reshape(max_axis(flat, 1), {1, c});
    auto mlp = [&](Var<T> v) { return fc2(tape, relu(fc1(tape, v))); };
    Var<T> channel_gate = reshape(sigmoid(add(mlp(avg), mlp(mx))), {c, 1, 1});
    Var<T> y = mul(x, channel_gate);
    Var<T> maps = concat(std::vector<Var<T>>{mean_axis(y, 0), max_axis(y, 0)}, 0);
    Var<T> spatial_gate = sigmoid(spatial(tape, maps));
    return mul(y, spatial_gate);
  }
};

}  // namespace osvi
