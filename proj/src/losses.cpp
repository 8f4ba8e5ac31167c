#include "osvi/losses.hpp"

namespace osvi {

template <typename T>
Var<T> mask_loss(Tape<T>& tape, const std::vector<Var<T>>& logits,
                 const std::vector<Tensor<T>>& targets) {
  if (logits.size() != targets.size()) {
    throw DimensionError("mask_loss: " + std::to_string(logits.size()) + " predictions, " +
                         std::to_string(targets.size()) + " targets");
  }
  if (logits.empty()) return tape.constant(Tensor<T>::scalar(T{0}));
  Var<T> total;
  std::size_t pixels = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const Tensor<T>& gt = targets[i];
    const Shape& ls = logits[i].shape();
    if (ls.size() != 3 || ls[0] != 2 || gt.shape() != Shape{ls[1], ls[2]}) {
      throw DimensionError("mask_loss: logits " + shape_str(ls) + " vs target " +
                           shape_str(gt.shape()));
    }
    const std::size_t n = gt.size();
    Tensor<T> onehot({2, ls[1], ls[2]});
    for (std::size_t p = 0; p < n; ++p) {
      const T v = gt[p];
      if (v != T{0} && v != T{1}) throw ContractError("mask_loss target must be binary");
      onehot[p] = T{1} - v;
      onehot[n + p] = v;
    }
    Var<T> term = sum(mul(log_softmax(logits[i], 0), tape.constant(std::move(onehot))));
    total = i == 0 ? term : add(total, term);
    pixels = n;
  }
  return scale(total, static_cast<T>(-1.0 / static_cast<double>(pixels * logits.size())));
}

template <typename T>
RegionLosses<T> region_losses(Tape<T>& tape, Var<T> pred, const Tensor<T>& target,
                              const Tensor<T>& mask) {
  const Shape& s = pred.shape();
  if (s.size() != 4 || s[1] != 3 || target.shape() != s ||
      mask.shape() != Shape{s[0], s[2], s[3]}) {
    throw DimensionError("region_losses: pred " + shape_str(s) + ", target " +
                         shape_str(target.shape()) + ", mask " + shape_str(mask.shape()));
  }
  double inside = 0.0;
  for (T v : mask.data()) {
    if (v != T{0} && v != T{1}) throw ContractError("region mask must be binary");
    inside += static_cast<double>(v);
  }
  const double outside = static_cast<double>(mask.size()) - inside;
  Tensor<T> m = mask.reshaped({s[0], 1, s[2], s[3]});
  Tensor<T> keep = m;
  for (auto& v : keep.data()) v = T{1} - v;
  Var<T> diff = abs(sub(pred, tape.constant(target)));
  RegionLosses<T> out;
  auto term = [&](Tensor<T> weights, double count) {
    if (count == 0.0) return tape.constant(Tensor<T>::scalar(T{0}));
    return scale(sum(mul(diff, tape.constant(std::move(weights)))),
                 static_cast<T>(1.0 / (3.0 * count)));
  };
  out.object = term(std::move(m), inside);
  out.valid = term(std::move(keep), outside);
  return out;
}

template <typename T>
Discriminator<T>::Discriminator(std::uint64_t seed) {
  Rng rng(seed);
  c1_ = Conv3d<T>(store_, "disc.c1", 3, 8, 1, 1, rng);
  c2_ = Conv3d<T>(store_, "disc.c2", 8, 16, 1, 2, rng);
  c3_ = Conv3d<T>(store_, "disc.c3", 16, 32, 2, 2, rng);
  fc_ = Linear<T>(store_, "disc.fc", 32, 1, rng);
}

template <typename T>
Var<T> Discriminator<T>::operator()(Tape<T>& tape, Var<T> video, bool frozen) const {
  const Shape& s = video.shape();
  if (s.size() != 4 || s[1] != 3) {
    throw DimensionError("discriminator input must be T×3×H×W, got " + shape_str(s));
  }
  Var<T> x = swap_leading(video);  // 3×T×H×W
  x = relu(c1_(tape, x, frozen));
  x = relu(c2_(tape, x, frozen));
  x = relu(c3_(tape, x, frozen));
  const std::size_t c = x.dim(0);
  Var<T> pooled = reshape(mean_axis(reshape(x, {c, x.size() / c}), 1), {1, c});
  return reshape(sigmoid(fc_(tape, pooled, frozen)), {1});
}

template <typename T>
static Var<T> clamped_log(Var<T> p) {
  return log(clamp(p, static_cast<T>(kProbClamp), static_cast<T>(1.0 - kProbClamp)));
}

template <typename T>
Var<T> discriminator_objective(Var<T> d_real, Var<T> d_fake) {
  Var<T> fake_term = clamped_log(add_scalar(scale(d_fake, T{-1}), T{1}));
  return add(mean(clamped_log(d_real)), mean(fake_term));
}

template <typename T>
Var<T> adversarial_loss(Var<T> d_fake) {
  return scale(mean(clamped_log(d_fake)), T{-1});
}

#define OSVI_INSTANTIATE_LOSSES(T)                                                      \
  template Var<T> mask_loss(Tape<T>&, const std::vector<Var<T>>&,                      \
                            const std::vector<Tensor<T>>&);                            \
  template struct RegionLosses<T>;                                                      \
  template RegionLosses<T> region_losses(Tape<T>&, Var<T>, const Tensor<T>&,           \
                                         const Tensor<T>&);                             \
  template class Discriminator<T>;                                                      \
  template Var<T> discriminator_objective(Var<T>, Var<T>);                              \
  template Var<T> adversarial_loss(Var<T>);
OSVI_INSTANTIATE_LOSSES(float)
OSVI_INSTANTIATE_LOSSES(double)
#undef OSVI_INSTANTIATE_LOSSES

}  // namespace osvi
