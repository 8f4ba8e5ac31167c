#include "osvi/encoder.hpp"

namespace osvi {

template <typename T>
SharedEncoder<T>::SharedEncoder(ParamStore<T>& store, const std::string& prefix,
                                const EncoderConfig& cfg, Rng& rng)
    : cfg_(cfg),
      stage1_(store, prefix + ".stage1", 3, cfg.skip1_channels, 3, 1, rng),
      stage2_(store, prefix + ".stage2", cfg.skip1_channels, cfg.skip2_channels, 3, 2, rng),
      stage3_(store, prefix + ".stage3", cfg.skip2_channels, cfg.base_channels, 3, 2, rng) {}

template <typename T>
EncoderOutput<T> SharedEncoder<T>::encode(Tape<T>& tape, Var<T> frame) const {
  const Shape& s = frame.shape();
  if (s.size() != 3 || s[0] != 3) {
    throw GeometryError("encoder expects a 3×H×W frame, got " + shape_str(s));
  }
  if (s[1] % 4 != 0 || s[2] % 4 != 0) {
    throw GeometryError("frame size " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                        " is not divisible by 4");
  }
  EncoderOutput<T> out;
  out.skip1 = relu(stage1_(tape, frame));
  out.skip2 = relu(stage2_(tape, out.skip1));
  out.base = relu(stage3_(tape, out.skip2));
  return out;
}

template <typename T>
KeyValueProjector<T>::KeyValueProjector(ParamStore<T>& store, const std::string& prefix,
                                        const EncoderConfig& cfg, Rng& rng)
    : key_(store, prefix + ".key", cfg.base_channels, cfg.key_channels, 3, 1, rng),
      value_(store, prefix + ".value", cfg.base_channels + 1, cfg.value_channels, 3, 1, rng) {}

template <typename T>
Var<T> KeyValueProjector<T>::project_key(Tape<T>& tape, const EncoderOutput<T>& x) const {
  Var<T> k = key_(tape, x.base);
  return reshape(k, {k.dim(0), x.tokens()});
}

template <typename T>
Var<T> KeyValueProjector<T>::project_value(Tape<T>& tape, const EncoderOutput<T>& x,
                                           Var<T> mask) const {
  const Shape& ms = mask.shape();
  if (ms != Shape{x.height(), x.width()}) {
    throw GeometryError("mask " + shape_str(ms) + " does not match frame " +
                        std::to_string(x.height()) + "x" + std::to_string(x.width()));
  }
  Var<T> pooled = resample(reshape(mask, {1, ms[0], ms[1]}), x.token_h(), x.token_w(),
                           kernels::ResampleMode::kAdaptiveAvgPool);
  Var<T> v = value_(tape, concat(std::vector<Var<T>>{x.base, pooled}, 0));
  return reshape(v, {v.dim(0), x.tokens()});
}

template <typename T>
Var<T> downsample_mask_guidance(Var<T> mask, std::size_t token_h, std::size_t token_w) {
  if (mask.shape().size() != 2) {
    throw GeometryError("guidance mask must be H×W, got " + shape_str(mask.shape()));
  }
  Var<T> pooled = resample(mask, token_h, token_w, kernels::ResampleMode::kMaxPool);
  return reshape(pooled, {token_h * token_w});
}

template class SharedEncoder<float>;
template class SharedEncoder<double>;
template class KeyValueProjector<float>;
template class KeyValueProjector<double>;
template Var<float> downsample_mask_guidance(Var<float>, std::size_t, std::size_t);
template Var<double> downsample_mask_guidance(Var<double>, std::size_t, std::size_t);

}  // namespace osvi
