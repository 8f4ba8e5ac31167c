#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "osvi/losses.hpp"
#include "osvi/model.hpp"
#include "osvi/optim.hpp"
#include "osvi/synth.hpp"

namespace osvi {

/// Raised when a loss turns non-finite; the message names the tensor.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t batch = 4;
  std::size_t snippet_len = 7;
  std::size_t height = 48, width = 80;
  std::size_t iterations = 2000;
  std::size_t checkpoint_every = 100;
  double lr = 1e-4;
  std::uint64_t seed = 1;
  bool no_mask_loss = false;
  bool no_gan = false;
  ModelFlags flags;
  AttentionConfig attention;
  std::size_t memory_every = 5;

  void validate() const;
  ModelConfig model_config() const;
};

struct LossBundle {
  float l_mask = 0, l_object = 0, l_valid = 0, l_adv = 0, l_dis = 0, l_total = 0;
  bool mask_in_total = true;
};

/// `step l_mask l_object l_valid l_adv l_dis l_total`, tab separated.
std::string format_log_line(std::size_t step, const LossBundle& b);

/// A snippet as tensors of the working precision.
template <typename T>
struct Sample {
  Tensor<T> input, masks, clean;
};

template <typename T>
Sample<T> to_sample(const Snippet& s) {
  return {s.input.cast<T>(), s.masks.cast<T>(), s.clean.cast<T>()};
}

template <typename T>
struct GeneratorLosses {
  ModelOutput<T> out;
  Var<T> l_mask, l_object, l_valid, l_adv;
};

/// Forward pass plus every generator-side loss for one sample. l_adv uses
/// the discriminator with frozen weights; it is a constant 0 when `disc`
/// is null.
template <typename T>
GeneratorLosses<T> generator_losses(Tape<T>& tape, const OsviModel<T>& model,
                                    const Discriminator<T>* disc, const Sample<T>& sample,
                                    const ForwardOptions& opt = {});

/// ((l_mask + l_object) + l_valid) + l_adv, all weights one; l_mask is left
/// out for the no-mask-loss ablation.
template <typename T>
Var<T> total_loss(Var<T> l_mask, Var<T> l_object, Var<T> l_valid, Var<T> l_adv,
                  bool include_mask);

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::vector<Snippet> data);

  /// Discriminator step on detached fakes, then one generator step on
  /// l_total. Throws NumericError on a non-finite loss.
  LossBundle step();

  std::vector<std::size_t> batch_indices(std::size_t step) const;

  /// Largest |gradient| that the completion losses alone (object, valid,
  /// adversarial) put on mask-module parameters for snippet `index`.
  /// Leaves all gradients zeroed.
  float completion_grad_on_mask(std::size_t index);

  const TrainConfig& config() const { return cfg_; }
  std::size_t steps_done() const { return step_; }
  void set_steps_done(std::size_t s) { step_ = s; }
  OsviModel<float>& model() { return *model_; }
  Discriminator<float>& discriminator() { return *disc_; }
  AdamState<float>& generator_adam() { return gen_adam_; }
  AdamState<float>& discriminator_adam() { return disc_adam_; }
  const std::vector<Snippet>& data() const { return data_; }

 private:
  TrainConfig cfg_;
  std::vector<Snippet> data_;
  std::vector<Sample<float>> samples_;
  std::unique_ptr<OsviModel<float>> model_;
  std::unique_ptr<Discriminator<float>> disc_;
  AdamState<float> gen_adam_, disc_adam_;
  std::size_t step_ = 0;
};

}  // namespace osvi
