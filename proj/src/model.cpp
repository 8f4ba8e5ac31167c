#include "osvi/model.hpp"

namespace osvi {

void ModelConfig::validate() const {
  if (height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0) {
    throw GeometryError("frame size " + std::to_string(height) + "x" + std::to_string(width) +
                        " must be a positive multiple of 4");
  }
  attention.validate();
}

template <typename T>
OsviModel<T>::OsviModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  encoder_ = std::make_unique<SharedEncoder<T>>(store_, "encoder", cfg_.encoder, rng);
  mask_ = std::make_unique<MaskPredictor<T>>(store_, "mask", cfg_.encoder, rng);
  if (cfg_.flags.separate_encoders) {
    completion_encoder_ =
        std::make_unique<SharedEncoder<T>>(store_, "completion_encoder", cfg_.encoder, rng);
  }
  tokenizer_ = std::make_unique<Tokenizer<T>>(store_, "completion.tokenizer",
                                              cfg_.encoder.base_channels,
                                              cfg_.attention.channels, rng);
  for (std::size_t l = 0; l < cfg_.attention.blocks; ++l) {
    blocks_.emplace_back(store_, "completion.block" + std::to_string(l), cfg_.attention, rng);
  }
  decoder_ = std::make_unique<CompletionDecoder<T>>(store_, "completion.decoder", cfg_.encoder,
                                                    cfg_.attention.channels, rng);
}

template <typename T>
ModelOutput<T> OsviModel<T>::forward(Tape<T>& tape, const Tensor<T>& video,
                                     const Tensor<T>& mask0, const ForwardOptions& opt) const {
  const Shape& s = video.shape();
  if (s.size() != 4 || s[1] != 3) throw DimensionError("video must be T×3×H×W, got " + shape_str(s));
  if (s[2] != cfg_.height || s[3] != cfg_.width) {
    throw GeometryError("video " + shape_str(s) + " does not match model size " +
                        std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width));
  }
  if (mask0.shape() != Shape{s[2], s[3]}) {
    throw DimensionError("initial mask " + shape_str(mask0.shape()) + " for video " + shape_str(s));
  }
  const std::size_t frames = s[0];
  std::vector<Var<T>> inputs;
  for (std::size_t t = 0; t < frames; ++t) inputs.push_back(tape.constant(frame_of(video, t)));

  ModelOutput<T> out;
  out.sequence = mask_->predict_sequence(tape, *encoder_, inputs, tape.constant(mask0), cfg_.memory);

  std::vector<EncoderOutput<T>> bank = out.sequence.bank;
  if (completion_encoder_) {
    for (std::size_t t = 0; t < frames; ++t) bank[t] = completion_encoder_->encode(tape, inputs[t]);
  } else if (cfg_.flags.detach_masks) {
    for (auto& enc : bank) {
      enc.base = detach(enc.base);
      enc.skip1 = detach(enc.skip1);
      enc.skip2 = detach(enc.skip2);
    }
  }
  const bool detach_masks = cfg_.flags.detach_masks || cfg_.flags.separate_encoders;
  for (const auto& m : out.sequence.masks) {
    out.completion_masks.push_back(detach_masks ? detach(m.soft) : m.soft);
  }

  auto [tokens, guidance] = tokenizer_->tokenize(tape, bank, out.completion_masks, cfg_.flags.masking);
  if (opt.fixed_guidance != nullptr) {
    if (opt.fixed_guidance->tokens() != guidance.tokens()) {
      throw DimensionError("fixed guidance covers " + std::to_string(opt.fixed_guidance->tokens()) +
                           " tokens, sequence has " + std::to_string(guidance.tokens()));
    }
    guidance = *opt.fixed_guidance;
  }
  BlockOptions bo;
  bo.use_guidance = cfg_.flags.use_guidance;
  bo.spatial_masked = cfg_.flags.spatial_masked;
  for (const auto& block : blocks_) tokens = block(tape, tokens, guidance, bo);

  out.video = decoder_->complete_video(tape, tokens, bank, out.completion_masks);
  if (opt.composite) out.video = composite(out.video, tape.constant(video), out.completion_masks);
  out.guidance = std::move(guidance);
  out.tokens = tokens;
  return out;
}

template class OsviModel<float>;
template class OsviModel<double>;

}  // namespace osvi
