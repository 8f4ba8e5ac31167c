#pragma once

#include <string>

#include "osvi/nn.hpp"

namespace osvi {

struct EncoderConfig {
  std::size_t skip1_channels = 16;  // stride 1
  std::size_t skip2_channels = 24;  // stride 2
  std::size_t base_channels = 32;   // stride 4
  std::size_t key_channels = 16;
  std::size_t value_channels = 32;
};

/// Features of one frame, all produced in a single encoder pass.
template <typename T>
struct EncoderOutput {
  Var<T> base;   // C_B×H/4×W/4
  Var<T> skip1;  // 16×H×W
  Var<T> skip2;  // 24×H/2×W/2

  std::size_t height() const { return skip1.dim(1); }
  std::size_t width() const { return skip1.dim(2); }
  std::size_t token_h() const { return base.dim(1); }
  std::size_t token_w() const { return base.dim(2); }
  std::size_t tokens() const { return token_h() * token_w(); }
};

/// Three 3×3 conv + relu stages (stride 1, 2, 2).
template <typename T>
class SharedEncoder {
 public:
  SharedEncoder(ParamStore<T>& store, const std::string& prefix, const EncoderConfig& cfg,
                Rng& rng);

  /// frame: 3×H×W with H, W divisible by 4.
  EncoderOutput<T> encode(Tape<T>& tape, Var<T> frame) const;

  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  Conv2d<T> stage1_, stage2_, stage3_;
};

/// Key and value heads over encoder base features.
template <typename T>
class KeyValueProjector {
 public:
  KeyValueProjector(ParamStore<T>& store, const std::string& prefix, const EncoderConfig& cfg,
                    Rng& rng);

  /// 3×3 conv then flatten: C_K×H'W'.
  Var<T> project_key(Tape<T>& tape, const EncoderOutput<T>& x) const;
  /// Mask (H×W) average-pooled to H'×W', appended as one channel, 3×3 conv,
  /// flatten: C_V×H'W'.
  Var<T> project_value(Tape<T>& tape, const EncoderOutput<T>& x, Var<T> mask) const;

 private:
  Conv2d<T> key_, value_;
};

/// Max-pools a soft mask (H×W) to the token grid and flattens it: a token
/// counts as object as soon as any covered pixel does.
template <typename T>
Var<T> downsample_mask_guidance(Var<T> mask, std::size_t token_h, std::size_t token_w);

}  // namespace osvi
