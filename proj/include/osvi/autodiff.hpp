#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every value produced during a forward pass, in creation
// order, together with the rule that maps the output gradient back onto its
// inputs. Because inputs always exist before the op that consumes them,
// creation order is a topological order and backward() is a single reverse
// sweep. A Var is a cheap handle (tape pointer + node id).

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "osvi/tensor.hpp"

namespace osvi {

/// A trainable tensor that outlives any single tape.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad() {
    if (grad.shape() != value.shape()) {
      grad = Tensor<T>::zeros(value.shape());
    } else {
      grad.fill(T{0});
    }
  }
};

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  /// dRoot/dThis after backward(); zeros when unreachable.
  const Tensor<T>& grad() const { return tape_->grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}, nullptr); }
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true, {}, nullptr); }
  Var<T> parameter(Parameter<T>& p) { return push(p.value, true, {}, &p); }

  /// Records an op output. The backward rule is kept only when at least one
  /// input requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
  }
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward fn) {
    bool rg = false;
    for (const auto& in : inputs) {
      if (&in.tape() != this) throw ContractError("op mixes variables from different tapes");
      rg = rg || requires_grad(in.id());
    }
    return push(std::move(value), rg, rg ? std::move(fn) : Backward{}, nullptr);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Accumulation buffer for node `id`, or null when it needs no gradient.
  T* grad_target(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return nullptr;
    ensure_grad(n);
    return n.grad.ptr();
  }

  const Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    ensure_grad(n);
    return n.grad;
  }

  /// Propagates d(root)/d(node) to every node; root must be a scalar.
  /// Parameter leaves add their gradient into Parameter::grad. A tape can be
  /// swept once.
  void backward(Var<T> root, T seed = T{1}) {
    if (&root.tape() != this) throw ContractError("backward root belongs to another tape");
    if (root.value().size() != 1) {
      throw ContractError("backward() needs a scalar root, got shape " +
                          shape_str(root.value().shape()));
    }
    if (swept_) throw ContractError("backward() called twice on the same tape");
    swept_ = true;
    Node& r = nodes_[root.id()];
    if (!r.requires_grad) return;
    ensure_grad(r);
    r.grad[0] += seed;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.grad_alloc) continue;
      if (n.backward) {
        n.backward(*this, n.grad);
        n.backward = nullptr;
      }
      if (n.param != nullptr) {
        Tensor<T>& pg = n.param->grad;
        if (pg.shape() != n.value.shape()) pg = Tensor<T>::zeros(n.value.shape());
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    Backward backward;
    Parameter<T>* param = nullptr;
  };

  void ensure_grad(Node& n) {
    if (!n.grad_alloc) {
      n.grad = Tensor<T>::zeros(n.value.shape());
      n.grad_alloc = true;
    }
  }

  Var<T> push(Tensor<T> value, bool rg, Backward fn, Parameter<T>* p) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, rg, false, std::move(fn), p});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;  // deque: references stay valid as the tape grows
  bool swept_ = false;
};

}  // namespace osvi
