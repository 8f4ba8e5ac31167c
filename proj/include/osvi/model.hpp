#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "osvi/completion.hpp"
#include "osvi/encoder.hpp"
#include "osvi/mask_prediction.hpp"

namespace osvi {

struct ModelFlags {
  bool use_guidance = true;       // false: --no-mask-guidance
  bool spatial_masked = false;    // --stb-masked
  bool detach_masks = false;      // completion sees masks and features as constants
  bool separate_encoders = false; // completion gets its own encoder
  MaskingMode masking = MaskingMode::kKeySide;
};

struct ModelConfig {
  std::size_t height = 48, width = 80;
  EncoderConfig encoder;
  AttentionConfig attention;
  MemoryPolicy memory;
  ModelFlags flags;
  std::uint64_t seed = 1;

  void validate() const;
};

struct ForwardOptions {
  /// Replaces the thresholded guidance (gradient checks hold it fixed).
  const GuidanceMask* fixed_guidance = nullptr;
  /// Blend the output with the input outside the predicted mask.
  bool composite = false;
};

template <typename T>
struct ModelOutput {
  SequencePrediction<T> sequence;
  std::vector<Var<T>> completion_masks;  // masks as the completion path sees them
  GuidanceMask guidance;
  TokenSequence<T> tokens;               // after the last block
  Var<T> video;                          // T×3×H×W
};

template <typename T>
class OsviModel {
 public:
  explicit OsviModel(const ModelConfig& cfg);
  OsviModel(const OsviModel&) = delete;
  OsviModel& operator=(const OsviModel&) = delete;

  /// video: T×3×H×W in [0,1]; mask0: H×W binary.
  ModelOutput<T> forward(Tape<T>& tape, const Tensor<T>& video, const Tensor<T>& mask0,
                         const ForwardOptions& opt = {}) const;

  ParamStore<T>& params() { return store_; }
  const ModelConfig& config() const { return cfg_; }

  // Parameter name prefixes.
  static constexpr const char* kEncoder = "encoder.";
  static constexpr const char* kCompletionEncoder = "completion_encoder.";
  static constexpr const char* kMask = "mask.";
  static constexpr const char* kCompletion = "completion.";

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  std::unique_ptr<SharedEncoder<T>> encoder_, completion_encoder_;
  std::unique_ptr<MaskPredictor<T>> mask_;
  std::unique_ptr<Tokenizer<T>> tokenizer_;
  std::vector<TransformerBlock<T>> blocks_;
  std::unique_ptr<CompletionDecoder<T>> decoder_;
};

}  // namespace osvi
