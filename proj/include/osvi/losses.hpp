#pragma once

#include <string>
#include <vector>

#include "osvi/nn.hpp"

namespace osvi {

/// Mean over frames of per-pixel two-class cross-entropy.
/// logits: 2×H×W each; targets: matching H×W binary masks.
/// Returns a constant 0 when there are no frames.
template <typename T>
Var<T> mask_loss(Tape<T>& tape, const std::vector<Var<T>>& logits,
                 const std::vector<Tensor<T>>& targets);

template <typename T>
struct RegionLosses {
  Var<T> object;  // L1 over M, normalized by 3·ΣM
  Var<T> valid;   // L1 over 1−M, normalized by 3·Σ(1−M)
};

/// pred: T×3×H×W, target likewise, mask: T×H×W binary. An empty region
/// gives a constant 0 for its term.
template <typename T>
RegionLosses<T> region_losses(Tape<T>& tape, Var<T> pred, const Tensor<T>& target,
                              const Tensor<T>& mask);

inline constexpr double kProbClamp = 1e-6;

/// Video discriminator: three 3×3×3 convs (8, 16, 32 channels; spatial
/// strides 1, 2, 2; temporal strides 1, 1, 2), global average, linear,
/// sigmoid.
template <typename T>
class Discriminator {
 public:
  explicit Discriminator(std::uint64_t seed);
  Discriminator(const Discriminator&) = delete;
  Discriminator& operator=(const Discriminator&) = delete;

  /// video: T×3×H×W. Returns a shape-{1} probability of "real".
  /// `frozen` treats all weights as constants.
  Var<T> operator()(Tape<T>& tape, Var<T> video, bool frozen = false) const;

  ParamStore<T>& params() { return store_; }

 private:
  ParamStore<T> store_;
  Conv3d<T> c1_, c2_, c3_;
  Linear<T> fc_;
};

/// log D(real) + log(1 − D(fake)), probabilities clamped to
/// [1e-6, 1 − 1e-6]. The discriminator maximizes this.
template <typename T>
Var<T> discriminator_objective(Var<T> d_real, Var<T> d_fake);

/// Non-saturating generator loss −log D(fake), clamped the same way.
template <typename T>
Var<T> adversarial_loss(Var<T> d_fake);

}  // namespace osvi
