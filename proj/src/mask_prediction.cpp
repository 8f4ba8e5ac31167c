#include "osvi/mask_prediction.hpp"

namespace osvi {

template <typename T>
void memory_append(KeyValueMemory<T>& mem, Var<T> key, Var<T> value, std::size_t frame_index) {
  for (std::size_t f : mem.frame_indices) {
    if (f == frame_index) {
      throw ContractError("frame " + std::to_string(frame_index) + " is already in memory");
    }
  }
  if (!mem.frame_indices.empty() && frame_index < mem.frame_indices.back()) {
    throw ContractError("memory frames must be appended in increasing order");
  }
  if (key.shape().size() != 2 || value.shape().size() != 2 || key.dim(1) != value.dim(1)) {
    throw DimensionError("memory key " + shape_str(key.shape()) + " and value " +
                         shape_str(value.shape()) + " disagree on token count");
  }
  mem.keys.push_back(key);
  mem.values.push_back(value);
  mem.frame_indices.push_back(frame_index);
}

template <typename T>
MemoryReadout<T> memory_read(const KeyValueMemory<T>& mem, Var<T> query_key) {
  if (mem.empty()) throw ContractError("memory_read on empty memory");
  Var<T> km = mem.keys.size() == 1 ? mem.keys[0] : concat(mem.keys, 1);
  Var<T> vm = mem.values.size() == 1 ? mem.values[0] : concat(mem.values, 1);
  if (km.dim(0) != query_key.dim(0)) {
    throw DimensionError("memory key channels " + shape_str(km.shape()) + " vs query " +
                         shape_str(query_key.shape()));
  }
  MemoryReadout<T> r;
  r.sim = softmax(matmul(transpose(km), query_key), 0);
  r.value = matmul(vm, r.sim);
  return r;
}

template <typename T>
MaskDecoder<T>::MaskDecoder(ParamStore<T>& store, const std::string& prefix,
                            const EncoderConfig& cfg, Rng& rng)
    : fuse_(store, prefix + ".fuse", cfg.value_channels + cfg.base_channels, cfg.base_channels, 3, 1, rng),
      up2_(store, prefix + ".up2", cfg.base_channels + cfg.skip2_channels, cfg.skip2_channels, 3, 1, rng),
      up1_(store, prefix + ".up1", cfg.skip2_channels + cfg.skip1_channels, cfg.skip1_channels, 3, 1, rng),
      head_(store, prefix + ".head", cfg.skip1_channels, 2, 3, 1, rng),
      cbam2_(store, prefix + ".cbam2", cfg.skip2_channels, rng),
      cbam1_(store, prefix + ".cbam1", cfg.skip1_channels, rng) {}

template <typename T>
MaskPrediction<T> MaskDecoder<T>::decode(Tape<T>& tape, Var<T> value_readout,
                                         const EncoderOutput<T>& enc) const {
  const std::size_t th = enc.token_h(), tw = enc.token_w();
  if (value_readout.shape().size() != 2 || value_readout.dim(1) != th * tw) {
    throw GeometryError("readout " + shape_str(value_readout.shape()) + " does not match a " +
                        std::to_string(th) + "x" + std::to_string(tw) + " token grid");
  }
  Var<T> vq = reshape(value_readout, {value_readout.dim(0), th, tw});
  Var<T> x = relu(fuse_(tape, concat(std::vector<Var<T>>{vq, enc.base}, 0)));
  x = resample(x, enc.skip2.dim(1), enc.skip2.dim(2), kernels::ResampleMode::kBilinearUp);
  x = cbam2_(tape, relu(up2_(tape, concat(std::vector<Var<T>>{x, enc.skip2}, 0))));
  x = resample(x, enc.height(), enc.width(), kernels::ResampleMode::kBilinearUp);
  x = cbam1_(tape, relu(up1_(tape, concat(std::vector<Var<T>>{x, enc.skip1}, 0))));
  MaskPrediction<T> out;
  out.logits = head_(tape, x);
  out.soft = reshape(slice(softmax(out.logits, 0), 0, 1, 2), {enc.height(), enc.width()});
  return out;
}

template <typename T>
MaskPredictor<T>::MaskPredictor(ParamStore<T>& store, const std::string& prefix,
                                const EncoderConfig& cfg, Rng& rng)
    : projector_(store, prefix + ".kv", cfg, rng), decoder_(store, prefix + ".decoder", cfg, rng) {}

template <typename T>
void MaskPredictor<T>::append(Tape<T>& tape, KeyValueMemory<T>& mem, const EncoderOutput<T>& enc,
                              Var<T> mask, std::size_t frame_index) const {
  memory_append(mem, projector_.project_key(tape, enc), projector_.project_value(tape, enc, mask),
                frame_index);
}

template <typename T>
SequencePrediction<T> MaskPredictor<T>::predict_sequence(Tape<T>& tape,
                                                         const SharedEncoder<T>& encoder,
                                                         const std::vector<Var<T>>& frames,
                                                         Var<T> m0,
                                                         const MemoryPolicy& policy) const {
  if (frames.empty()) throw ContractError("predict_sequence needs at least one frame");
  for (T v : m0.value().data()) {
    if (v != T{0} && v != T{1}) throw ContractError("initial mask must be binary");
  }
  SequencePrediction<T> seq;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    EncoderOutput<T> enc = encoder.encode(tape, frames[t]);
    MaskPrediction<T> pred;
    if (t == 0) {
      pred.soft = m0;
      append(tape, seq.memory, enc, m0, 0);
    } else {
      MemoryReadout<T> read = memory_read(seq.memory, projector_.project_key(tape, enc));
      pred = decoder_.decode(tape, read.value, enc);
      if (policy.stores(t)) append(tape, seq.memory, enc, pred.soft, t);
    }
    seq.masks.push_back(pred);
    seq.bank.push_back(enc);
  }
  return seq;
}

#define OSVI_INSTANTIATE_MASK(T)                                                     \
  template void memory_append(KeyValueMemory<T>&, Var<T>, Var<T>, std::size_t);      \
  template MemoryReadout<T> memory_read(const KeyValueMemory<T>&, Var<T>);           \
  template class MaskDecoder<T>;                                                     \
  template class MaskPredictor<T>;
OSVI_INSTANTIATE_MASK(float)
OSVI_INSTANTIATE_MASK(double)
#undef OSVI_INSTANTIATE_MASK

}  // namespace osvi
