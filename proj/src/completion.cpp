#include "osvi/completion.hpp"

#include <cmath>

namespace osvi {

void AttentionConfig::validate() const {
  if (heads == 0 || channels % heads != 0) {
    throw DimensionError("token channels " + std::to_string(channels) +
                         " not divisible by heads " + std::to_string(heads));
  }
  if (channels % 4 != 0) {
    throw DimensionError("token channels must be a multiple of 4 for the position code");
  }
}

bool GuidanceMask::any_object() const {
  for (auto b : token_object)
    if (b) return true;
  return false;
}

bool GuidanceMask::pair_masked(std::size_t query, std::size_t key) const {
  if (mode == MaskingMode::kKeySide) return token_object[key] != 0;
  return g[query * tokens() + key] < kGuidanceThreshold;
}

kernels::AttentionMask GuidanceMask::attention_mask() const {
  kernels::AttentionMask m;
  m.tokens = tokens();
  if (mode == MaskingMode::kKeySide) {
    m.kind = kernels::AttentionMask::Kind::kKey;
    m.key = token_object;
  } else {
    m.kind = kernels::AttentionMask::Kind::kPair;
    m.pair.resize(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) m.pair[i] = g[i] < kGuidanceThreshold ? 1 : 0;
  }
  return m;
}

GuidanceMask build_guidance(const std::vector<double>& m_hat, MaskingMode mode) {
  GuidanceMask out;
  out.mode = mode;
  out.token_object.resize(m_hat.size());
  for (std::size_t i = 0; i < m_hat.size(); ++i) {
    if (!(m_hat[i] >= 0.0 && m_hat[i] <= 1.0)) {
      throw ContractError("guidance value " + std::to_string(m_hat[i]) + " outside [0,1]");
    }
    out.token_object[i] = m_hat[i] >= kGuidanceThreshold ? 1 : 0;
  }
  if (mode == MaskingMode::kPaperLiteral) {
    const std::size_t n = m_hat.size();
    out.g.resize(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out.g[i * n + j] = 1.0 - (1.0 - m_hat[i]) * (1.0 - m_hat[j]);
  }
  return out;
}

template <typename T>
Var<T> mask_scores(Var<T> scores, const GuidanceMask& g) {
  const std::size_t n = g.tokens();
  if (scores.shape() != Shape{n, n}) {
    throw DimensionError("score matrix " + shape_str(scores.shape()) + " for " +
                         std::to_string(n) + " tokens");
  }
  Tensor<std::uint8_t> mask({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) mask[i * n + j] = g.pair_masked(i, j) ? 1 : 0;
  return masked_fill(scores, mask);
}

template <typename T>
Tensor<T> position_encoding(std::size_t frames, std::size_t token_h, std::size_t token_w,
                            std::size_t channels) {
  auto code = [](double pos, std::size_t i, std::size_t dims) {
    const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dims));
    return i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq);
  };
  const std::size_t half = channels / 2;
  Tensor<T> pe({frames * token_h * token_w, channels});
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t y = 0; y < token_h; ++y)
      for (std::size_t x = 0; x < token_w; ++x) {
        T* row = pe.ptr() + ((t * token_h + y) * token_w + x) * channels;
        for (std::size_t c = 0; c < channels; ++c) {
          const double spatial = c < half ? code(static_cast<double>(y), c, half)
                                          : code(static_cast<double>(x), c - half, half);
          row[c] = static_cast<T>(spatial + code(static_cast<double>(t), c, channels));
        }
      }
  return pe;
}

template <typename T>
Tokenizer<T>::Tokenizer(ParamStore<T>& store, const std::string& prefix,
                        std::size_t base_channels, std::size_t token_channels, Rng& rng)
    : proj_(store, prefix + ".proj", base_channels, token_channels, rng),
      channels_(token_channels) {}

template <typename T>
std::pair<TokenSequence<T>, GuidanceMask> Tokenizer<T>::tokenize(
    Tape<T>& tape, const std::vector<EncoderOutput<T>>& bank,
    const std::vector<Var<T>>& soft_masks, MaskingMode mode) const {
  if (bank.empty() || bank.size() != soft_masks.size()) {
    throw ContractError("tokenize: " + std::to_string(bank.size()) + " frames but " +
                        std::to_string(soft_masks.size()) + " masks");
  }
  TokenSequence<T> seq;
  seq.frames = bank.size();
  seq.token_h = bank[0].token_h();
  seq.token_w = bank[0].token_w();
  std::vector<Var<T>> rows;
  std::vector<double> m_hat;
  for (std::size_t t = 0; t < bank.size(); ++t) {
    const auto& enc = bank[t];
    if (enc.token_h() != seq.token_h || enc.token_w() != seq.token_w) {
      throw GeometryError("tokenize: frames of mismatched geometry");
    }
    Var<T> base = reshape(enc.base, {enc.base.dim(0), enc.tokens()});
    rows.push_back(transpose(base));
    Var<T> guide = downsample_mask_guidance(soft_masks[t], seq.token_h, seq.token_w);
    for (T v : guide.value().data()) m_hat.push_back(static_cast<double>(v));
  }
  Var<T> x = rows.size() == 1 ? rows[0] : concat(rows, 0);
  Var<T> pe = tape.constant(position_encoding<T>(seq.frames, seq.token_h, seq.token_w, channels_));
  seq.tokens = add(proj_(tape, x), pe);
  return {seq, build_guidance(m_hat, mode)};
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(ParamStore<T>& store, const std::string& prefix,
                                          const AttentionConfig& cfg, Rng& rng)
    : cfg_(cfg),
      q_(store, prefix + ".q", cfg.channels, cfg.channels, rng),
      k_(store, prefix + ".k", cfg.channels, cfg.channels, rng),
      v_(store, prefix + ".v", cfg.channels, cfg.channels, rng),
      out_(store, prefix + ".out", cfg.channels, cfg.channels, rng) {}

template <typename T>
Var<T> MultiHeadAttention<T>::operator()(Tape<T>& tape, Var<T> x, std::size_t groups,
                                         const kernels::AttentionMask& mask) const {
  kernels::AttentionShape shape;
  shape.tokens = x.dim(0);
  shape.channels = cfg_.channels;
  shape.heads = cfg_.heads;
  shape.groups = groups;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg_.head_dim())));
  Var<T> a = attention(q_(tape, x), k_(tape, x), v_(tape, x), shape, mask, scale);
  return out_(tape, a);
}

template <typename T>
Var<T> mmha(Tape<T>& tape, const TokenSequence<T>& f, const GuidanceMask& g,
            const MultiHeadAttention<T>& params) {
  if (g.tokens() != f.tokens.dim(0)) {
    throw DimensionError("guidance covers " + std::to_string(g.tokens()) + " tokens, sequence has " +
                         std::to_string(f.tokens.dim(0)));
  }
  return params(tape, f.tokens, 1, g.attention_mask());
}

template <typename T>
Var<T> smha(Tape<T>& tape, const TokenSequence<T>& f, const MultiHeadAttention<T>& params) {
  return params(tape, f.tokens, f.frames, kernels::AttentionMask{});
}

template <typename T>
TransformerBlock<T>::TransformerBlock(ParamStore<T>& store, const std::string& prefix,
                                      const AttentionConfig& cfg, Rng& rng)
    : ln1_(store, prefix + ".ln1", cfg.channels),
      ln2_(store, prefix + ".ln2", cfg.channels),
      ln3_(store, prefix + ".ln3", cfg.channels),
      ln4_(store, prefix + ".ln4", cfg.channels),
      temporal_(store, prefix + ".ttb_attn", cfg, rng),
      spatial_(store, prefix + ".stb_attn", cfg, rng),
      mlp1a_(store, prefix + ".ttb_mlp1", cfg.channels, cfg.mlp_hidden, rng),
      mlp1b_(store, prefix + ".ttb_mlp2", cfg.mlp_hidden, cfg.channels, rng),
      mlp2a_(store, prefix + ".stb_mlp1", cfg.channels, cfg.mlp_hidden, rng),
      mlp2b_(store, prefix + ".stb_mlp2", cfg.mlp_hidden, cfg.channels, rng) {}

template <typename T>
Var<T> TransformerBlock<T>::mlp(Tape<T>& tape, const Linear<T>& a, const Linear<T>& b,
                                Var<T> x) const {
  return b(tape, gelu(a(tape, x)));
}

template <typename T>
TokenSequence<T> TransformerBlock<T>::operator()(Tape<T>& tape, const TokenSequence<T>& f,
                                                 const GuidanceMask& g,
                                                 const BlockOptions& opt) const {
  auto with = [&f](Var<T> v) {
    TokenSequence<T> s = f;
    s.tokens = v;
    return s;
  };
  auto temporal_attention = [&](Var<T> x) {
    if (!opt.use_guidance) return temporal_(tape, x, 1, kernels::AttentionMask{});
    return mmha(tape, with(x), g, temporal_);
  };
  Var<T> f1 = add(temporal_attention(ln1_(tape, f.tokens)), f.tokens);
  Var<T> f2 = add(mlp(tape, mlp1a_, mlp1b_, ln2_(tape, f1)), f1);
  Var<T> n3 = ln3_(tape, f2);
  Var<T> s3;
  if (opt.spatial_masked) {
    s3 = opt.use_guidance ? mmha(tape, with(n3), g, spatial_)
                          : spatial_(tape, n3, 1, kernels::AttentionMask{});
  } else {
    s3 = smha(tape, with(n3), spatial_);
  }
  Var<T> f3 = add(s3, f2);
  Var<T> f4 = add(mlp(tape, mlp2a_, mlp2b_, ln4_(tape, f3)), f3);
  return with(f4);
}

template <typename T>
CompletionDecoder<T>::CompletionDecoder(ParamStore<T>& store, const std::string& prefix,
                                        const EncoderConfig& enc, std::size_t token_channels,
                                        Rng& rng)
    : fuse_(store, prefix + ".fuse", token_channels, enc.base_channels, 3, 1, rng),
      up2_(store, prefix + ".up2", enc.base_channels + enc.skip2_channels, enc.skip2_channels, 3, 1, rng),
      up1_(store, prefix + ".up1", enc.skip2_channels + enc.skip1_channels, enc.skip1_channels, 3, 1, rng),
      head_(store, prefix + ".head", enc.skip1_channels, 3, 3, 1, rng) {}

template <typename T>
Var<T> CompletionDecoder<T>::complete_video(Tape<T>& tape, const TokenSequence<T>& f,
                                            const std::vector<EncoderOutput<T>>& bank,
                                            const std::vector<Var<T>>& soft_masks) const {
  if (bank.size() != f.frames || soft_masks.size() != f.frames) {
    throw ContractError("complete_video: frame count mismatch");
  }
  const std::size_t per = f.per_frame();
  const std::size_t c = f.tokens.dim(1);
  std::vector<Var<T>> frames;
  for (std::size_t t = 0; t < f.frames; ++t) {
    const auto& enc = bank[t];
    const std::size_t h = enc.height(), w = enc.width();
    Var<T> tok = transpose(slice(f.tokens, 0, t * per, (t + 1) * per));
    Var<T> x = relu(fuse_(tape, reshape(tok, {c, f.token_h, f.token_w})));
    Var<T> m1 = reshape(soft_masks[t], {1, h, w});
    Var<T> m2 = resample(m1, enc.skip2.dim(1), enc.skip2.dim(2), kernels::ResampleMode::kMaxPool);
    Var<T> skip2 = mul(enc.skip2, add_scalar(scale(m2, T{-1}), T{1}));
    Var<T> skip1 = mul(enc.skip1, add_scalar(scale(m1, T{-1}), T{1}));
    x = resample(x, enc.skip2.dim(1), enc.skip2.dim(2), kernels::ResampleMode::kBilinearUp);
    x = relu(up2_(tape, concat(std::vector<Var<T>>{x, skip2}, 0)));
    x = resample(x, h, w, kernels::ResampleMode::kBilinearUp);
    x = relu(up1_(tape, concat(std::vector<Var<T>>{x, skip1}, 0)));
    Var<T> rgb = sigmoid(head_(tape, x));
    frames.push_back(reshape(rgb, {1, 3, h, w}));
  }
  return frames.size() == 1 ? frames[0] : concat(frames, 0);
}

template <typename T>
Var<T> composite(Var<T> video, Var<T> input, const std::vector<Var<T>>& soft_masks) {
  if (video.shape() != input.shape() || video.dim(0) != soft_masks.size()) {
    throw DimensionError("composite: video " + shape_str(video.shape()) + " vs input " +
                         shape_str(input.shape()));
  }
  const std::size_t h = video.dim(2), w = video.dim(3), plane = h * w;
  Tensor<T> take({video.dim(0), 1, h, w});
  for (std::size_t t = 0; t < soft_masks.size(); ++t) {
    const auto& m = soft_masks[t].value();
    if (m.shape() != Shape{h, w}) throw DimensionError("composite: mask " + shape_str(m.shape()));
    for (std::size_t p = 0; p < plane; ++p)
      take[t * plane + p] = m[p] >= static_cast<T>(kGuidanceThreshold) ? T{1} : T{0};
  }
  Tensor<T> keep = take;
  for (auto& v : keep.data()) v = T{1} - v;
  Tape<T>& tape = video.tape();
  return add(mul(video, tape.constant(std::move(take))), mul(input, tape.constant(std::move(keep))));
}

#define OSVI_INSTANTIATE_COMPLETION(T)                                                     \
  template Var<T> mask_scores(Var<T>, const GuidanceMask&);                                \
  template Tensor<T> position_encoding<T>(std::size_t, std::size_t, std::size_t, std::size_t); \
  template class Tokenizer<T>;                                                             \
  template class MultiHeadAttention<T>;                                                    \
  template Var<T> mmha(Tape<T>&, const TokenSequence<T>&, const GuidanceMask&,             \
                       const MultiHeadAttention<T>&);                                      \
  template Var<T> smha(Tape<T>&, const TokenSequence<T>&, const MultiHeadAttention<T>&);   \
  template class TransformerBlock<T>;                                                      \
  template class CompletionDecoder<T>;                                                     \
  template Var<T> composite(Var<T>, Var<T>, const std::vector<Var<T>>&);
OSVI_INSTANTIATE_COMPLETION(float)
OSVI_INSTANTIATE_COMPLETION(double)
#undef OSVI_INSTANTIATE_COMPLETION

}  // namespace osvi
