#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "osvi/encoder.hpp"
#include "osvi/mask_prediction.hpp"

namespace osvi {

/// How the guidance matrix turns into excluded (query, key) pairs.
///  - kKeySide: every key whose token is object is excluded for every query.
///  - kPaperLiteral: G = 1 − (1−m̂)(1−m̂)ᵀ and pairs with G < 0.5 are
///    excluded, exactly as the masking rule is printed.
enum class MaskingMode { kKeySide, kPaperLiteral };

struct AttentionConfig {
  std::size_t channels = 32;
  std::size_t heads = 4;
  std::size_t blocks = 4;
  std::size_t mlp_hidden = 64;

  std::size_t head_dim() const { return channels / heads; }
  void validate() const;
};

inline constexpr double kGuidanceThreshold = 0.5;

struct GuidanceMask {
  std::vector<std::uint8_t> token_object;  // m̂ ≥ 0.5
  MaskingMode mode = MaskingMode::kKeySide;
  std::vector<double> g;  // N×N, paper-literal mode only

  std::size_t tokens() const { return token_object.size(); }
  bool any_object() const;
  bool pair_masked(std::size_t query, std::size_t key) const;
  kernels::AttentionMask attention_mask() const;
};

/// m̂ in [0,1] per token (frame-major). Values outside → ContractError.
GuidanceMask build_guidance(const std::vector<double>& m_hat, MaskingMode mode);

/// Replaces guided-out scores (N×N) with the sentinel.
template <typename T>
Var<T> mask_scores(Var<T> scores, const GuidanceMask& g);

/// Frame-major token layout: row t·H'W' + y·W' + x holds frame t, cell (y, x).
template <typename T>
struct TokenSequence {
  Var<T> tokens;  // T·H'W' × C_T
  std::size_t frames = 0, token_h = 0, token_w = 0;
  std::size_t per_frame() const { return token_h * token_w; }
};

/// Fixed sinusoidal code: channels [0, C/2) encode the row, [C/2, C) the
/// column, and a full-width temporal code for the frame index is added.
template <typename T>
Tensor<T> position_encoding(std::size_t frames, std::size_t token_h, std::size_t token_w,
                            std::size_t channels);

template <typename T>
class Tokenizer {
 public:
  Tokenizer(ParamStore<T>& store, const std::string& prefix, std::size_t base_channels,
            std::size_t token_channels, Rng& rng);

  /// Projects each frame's base features to C_T tokens, adds the position
  /// code, and builds guidance from the soft masks.
  std::pair<TokenSequence<T>, GuidanceMask> tokenize(Tape<T>& tape,
                                                     const std::vector<EncoderOutput<T>>& bank,
                                                     const std::vector<Var<T>>& soft_masks,
                                                     MaskingMode mode) const;

 private:
  Linear<T> proj_;
  std::size_t channels_;
};

template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention(ParamStore<T>& store, const std::string& prefix, const AttentionConfig& cfg,
                     Rng& rng);
  /// x: N×C; attention runs inside `groups` contiguous token groups.
  Var<T> operator()(Tape<T>& tape, Var<T> x, std::size_t groups,
                    const kernels::AttentionMask& mask) const;
  const Linear<T>& out_projection() const { return out_; }

 private:
  AttentionConfig cfg_;
  Linear<T> q_, k_, v_, out_;
};

/// Masked multi-head attention across all frames.
template <typename T>
Var<T> mmha(Tape<T>& tape, const TokenSequence<T>& f, const GuidanceMask& g,
            const MultiHeadAttention<T>& params);
/// Plain multi-head attention inside each frame.
template <typename T>
Var<T> smha(Tape<T>& tape, const TokenSequence<T>& f, const MultiHeadAttention<T>& params);

struct BlockOptions {
  bool use_guidance = true;  // false: temporal attention is unmasked
  bool spatial_masked = false;  // stage 3 uses MMHA instead of SMHA
};

/// Pre-norm residual block: temporal stage (MMHA + MLP), then spatial
/// stage (SMHA + MLP).
template <typename T>
class TransformerBlock {
 public:
  TransformerBlock(ParamStore<T>& store, const std::string& prefix, const AttentionConfig& cfg,
                   Rng& rng);
  TokenSequence<T> operator()(Tape<T>& tape, const TokenSequence<T>& f, const GuidanceMask& g,
                              const BlockOptions& opt) const;

 private:
  Var<T> mlp(Tape<T>& tape, const Linear<T>& a, const Linear<T>& b, Var<T> x) const;

  LayerNorm<T> ln1_, ln2_, ln3_, ln4_;
  MultiHeadAttention<T> temporal_, spatial_;
  Linear<T> mlp1a_, mlp1b_, mlp2a_, mlp2b_;
};

/// Per-frame decoder from tokens back to RGB. Skip features are gated by
/// (1 − soft mask) so object pixels must be synthesized from the tokens.
template <typename T>
class CompletionDecoder {
 public:
  CompletionDecoder(ParamStore<T>& store, const std::string& prefix, const EncoderConfig& enc,
                    std::size_t token_channels, Rng& rng);

  /// Returns T×3×H×W in [0,1].
  Var<T> complete_video(Tape<T>& tape, const TokenSequence<T>& f,
                        const std::vector<EncoderOutput<T>>& bank,
                        const std::vector<Var<T>>& soft_masks) const;

 private:
  Conv2d<T> fuse_, up2_, up1_, head_;
};

/// Network output where M̂ ≥ 0.5, input elsewhere. video/input: T×3×H×W,
/// masks H×W each.
template <typename T>
Var<T> composite(Var<T> video, Var<T> input, const std::vector<Var<T>>& soft_masks);

}  // namespace osvi
