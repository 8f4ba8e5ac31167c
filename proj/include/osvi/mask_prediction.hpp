#pragma once

#include <string>
#include <vector>

#include "osvi/encoder.hpp"

namespace osvi {

/// Key/value features of the frames committed to memory, oldest first.
template <typename T>
struct KeyValueMemory {
  std::vector<Var<T>> keys;    // each C_K×H'W'
  std::vector<Var<T>> values;  // each C_V×H'W'
  std::vector<std::size_t> frame_indices;

  std::size_t frames() const { return frame_indices.size(); }
  std::size_t tokens() const {
    std::size_t n = 0;
    for (const auto& k : keys) n += k.dim(1);
    return n;
  }
  bool empty() const { return frame_indices.empty(); }
};

/// Adds one frame's key/value. Frame indices must be new and increasing.
template <typename T>
void memory_append(KeyValueMemory<T>& mem, Var<T> key, Var<T> value, std::size_t frame_index);

template <typename T>
struct MemoryReadout {
  Var<T> value;  // V_Q: C_V×H'W'
  Var<T> sim;    // N·H'W'×H'W', each column sums to one
};

/// sim = softmax over memory tokens of K_Mᵀ·K_Q (no temperature);
/// V_Q = V_M·sim.
template <typename T>
MemoryReadout<T> memory_read(const KeyValueMemory<T>& mem, Var<T> query_key);

template <typename T>
struct MaskPrediction {
  Var<T> logits;  // 2×H×W (background, foreground); invalid for frame 0
  Var<T> soft;    // H×W foreground probability
};

struct MemoryPolicy {
  std::size_t every = 5;  // frames t with t % every == 0 are stored
  bool stores(std::size_t t) const { return every != 0 && t % every == 0; }
};

template <typename T>
struct SequencePrediction {
  std::vector<MaskPrediction<T>> masks;
  std::vector<EncoderOutput<T>> bank;
  KeyValueMemory<T> memory;
};

/// Upsampling decoder with skip fusion and a CBAM layer after every skip
/// connection, ending in two-class logits.
template <typename T>
class MaskDecoder {
 public:
  MaskDecoder(ParamStore<T>& store, const std::string& prefix, const EncoderConfig& cfg,
              Rng& rng);
  MaskPrediction<T> decode(Tape<T>& tape, Var<T> value_readout, const EncoderOutput<T>& enc) const;

 private:
  Conv2d<T> fuse_, up2_, up1_, head_;
  Cbam<T> cbam2_, cbam1_;
};

template <typename T>
class MaskPredictor {
 public:
  MaskPredictor(ParamStore<T>& store, const std::string& prefix, const EncoderConfig& cfg,
                Rng& rng);

  void append(Tape<T>& tape, KeyValueMemory<T>& mem, const EncoderOutput<T>& enc, Var<T> mask,
              std::size_t frame_index) const;

  /// Frame 0 returns m0 itself; later frames are decoded from memory reads.
  /// Memory grows at frames selected by `policy`, encoded with the
  /// predicted soft mask (ground truth only at frame 0).
  SequencePrediction<T> predict_sequence(Tape<T>& tape, const SharedEncoder<T>& encoder,
                                         const std::vector<Var<T>>& frames, Var<T> m0,
                                         const MemoryPolicy& policy) const;

  const KeyValueProjector<T>& projector() const { return projector_; }
  const MaskDecoder<T>& decoder() const { return decoder_; }

 private:
  KeyValueProjector<T> projector_;
  MaskDecoder<T> decoder_;
};

}  // namespace osvi
