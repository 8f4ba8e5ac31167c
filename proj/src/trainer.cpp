#include "osvi/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace osvi {

void TrainConfig::validate() const {
  if (batch == 0) throw ContractError("batch must be at least 1");
  if (snippet_len < 2) throw ContractError("snippet_len must be at least 2");
  if (!(lr > 0.0)) throw ContractError("lr must be positive");
  model_config().validate();
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig m;
  m.height = height;
  m.width = width;
  m.attention = attention;
  m.memory.every = memory_every;
  m.flags = flags;
  m.seed = mix_seed(seed, 100);
  return m;
}

std::string format_log_line(std::size_t step, const LossBundle& b) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g", step,
                static_cast<double>(b.l_mask), static_cast<double>(b.l_object),
                static_cast<double>(b.l_valid), static_cast<double>(b.l_adv),
                static_cast<double>(b.l_dis), static_cast<double>(b.l_total));
  return buf;
}

template <typename T>
GeneratorLosses<T> generator_losses(Tape<T>& tape, const OsviModel<T>& model,
                                    const Discriminator<T>* disc, const Sample<T>& sample,
                                    const ForwardOptions& opt) {
  GeneratorLosses<T> g;
  g.out = model.forward(tape, sample.input, frame_of(sample.masks, 0), opt);
  std::vector<Var<T>> logits;
  std::vector<Tensor<T>> targets;
  for (std::size_t t = 1; t < sample.masks.dim(0); ++t) {
    logits.push_back(g.out.sequence.masks[t].logits);
    targets.push_back(frame_of(sample.masks, t));
  }
  g.l_mask = mask_loss(tape, logits, targets);
  RegionLosses<T> r = region_losses(tape, g.out.video, sample.clean, sample.masks);
  g.l_object = r.object;
  g.l_valid = r.valid;
  g.l_adv = disc != nullptr ? adversarial_loss((*disc)(tape, g.out.video, true))
                            : tape.constant(Tensor<T>::scalar(T{0}));
  return g;
}

template <typename T>
Var<T> total_loss(Var<T> l_mask, Var<T> l_object, Var<T> l_valid, Var<T> l_adv,
                  bool include_mask) {
  Var<T> sum = include_mask ? add(l_mask, l_object) : l_object;
  return add(add(sum, l_valid), l_adv);
}

template Var<float> total_loss(Var<float>, Var<float>, Var<float>, Var<float>, bool);
template Var<double> total_loss(Var<double>, Var<double>, Var<double>, Var<double>, bool);

namespace {

void check_finite(float v, const char* name, const std::string& id, std::size_t step) {
  if (!std::isfinite(v)) {
    throw NumericError("non-finite " + std::string(name) + " = " + std::to_string(v) +
                       " on snippet " + id + " at step " + std::to_string(step));
  }
}

}  // namespace

Trainer::Trainer(const TrainConfig& cfg, std::vector<Snippet> data)
    : cfg_(cfg), data_(std::move(data)) {
  cfg_.validate();
  if (data_.empty()) throw ContractError("training needs at least one snippet");
  for (const auto& s : data_) {
    if (s.input.dim(2) != cfg_.height || s.input.dim(3) != cfg_.width) {
      throw GeometryError("snippet " + s.id + " is " + shape_str(s.input.shape()) +
                          ", config expects " + std::to_string(cfg_.height) + "x" +
                          std::to_string(cfg_.width));
    }
    if (s.frames() < 2) throw ContractError("snippet " + s.id + " has fewer than 2 frames");
    samples_.push_back(to_sample<float>(s));
  }
  model_ = std::make_unique<OsviModel<float>>(cfg_.model_config());
  disc_ = std::make_unique<Discriminator<float>>(mix_seed(cfg_.seed, 200));
  AdamConfig ac;
  ac.lr = cfg_.lr;
  gen_adam_ = make_adam_state(model_->params().all(), ac);
  disc_adam_ = make_adam_state(disc_->params().all(), ac);
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
  const std::size_t n = data_.size();
  const std::size_t start = static_cast<std::size_t>(mix_seed(cfg_.seed, 1000 + step) % n);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < cfg_.batch; ++i) idx.push_back((start + i) % n);
  return idx;
}

float Trainer::completion_grad_on_mask(std::size_t index) {
  const Sample<float>& s = samples_.at(index);
  model_->params().zero_grad();
  float worst = 0.0f;
  {
    Tape<float> tape;
    GeneratorLosses<float> g =
        generator_losses(tape, *model_, cfg_.no_gan ? nullptr : disc_.get(), s);
    tape.backward(add(add(g.l_object, g.l_valid), g.l_adv));
    for (auto* p : model_->params().with_prefix(OsviModel<float>::kMask)) {
      for (float v : p->grad.data()) worst = std::max(worst, std::abs(v));
    }
  }
  model_->params().zero_grad();
  disc_->params().zero_grad();
  return worst;
}

LossBundle Trainer::step() {
  const std::vector<std::size_t> idx = batch_indices(step_);
  const std::size_t nb = idx.size();
  const float inv = 1.0f / static_cast<float>(nb);

  // Generator forward for the whole batch; tapes stay alive until the
  // generator update.
  std::vector<std::unique_ptr<Tape<float>>> tapes;
  std::vector<ModelOutput<float>> outs;
  for (std::size_t b = 0; b < nb; ++b) {
    tapes.push_back(std::make_unique<Tape<float>>());
    outs.push_back(model_->forward(*tapes.back(), samples_[idx[b]].input,
                                   frame_of(samples_[idx[b]].masks, 0)));
  }

  LossBundle bundle;
  bundle.mask_in_total = !cfg_.no_mask_loss;
  if (!cfg_.no_gan) {
    disc_->params().zero_grad();
    for (std::size_t b = 0; b < nb; ++b) {
      Tape<float> dt;
      Var<float> real = (*disc_)(dt, dt.constant(samples_[idx[b]].clean));
      Var<float> fake = (*disc_)(dt, dt.constant(outs[b].video.value()));
      Var<float> obj = discriminator_objective(real, fake);
      const float v = obj.value().item();
      check_finite(v, "l_dis", data_[idx[b]].id, step_);
      bundle.l_dis += v * inv;
      dt.backward(scale(obj, -1.0f), inv);
    }
    adam_step(disc_->params().all(), disc_adam_);
  }

  model_->params().zero_grad();
  for (std::size_t b = 0; b < nb; ++b) {
    Tape<float>& tape = *tapes[b];
    const Sample<float>& s = samples_[idx[b]];
    const ModelOutput<float>& out = outs[b];
    std::vector<Var<float>> logits;
    std::vector<Tensor<float>> targets;
    for (std::size_t t = 1; t < s.masks.dim(0); ++t) {
      logits.push_back(out.sequence.masks[t].logits);
      targets.push_back(frame_of(s.masks, t));
    }
    Var<float> l_mask = mask_loss(tape, logits, targets);
    RegionLosses<float> r = region_losses(tape, out.video, s.clean, s.masks);
    Var<float> l_adv = cfg_.no_gan ? tape.constant(Tensor<float>::scalar(0.0f))
                                   : adversarial_loss((*disc_)(tape, out.video, true));
    const std::string& id = data_[idx[b]].id;
    check_finite(l_mask.value().item(), "l_mask", id, step_);
    check_finite(r.object.value().item(), "l_object", id, step_);
    check_finite(r.valid.value().item(), "l_valid", id, step_);
    check_finite(l_adv.value().item(), "l_adv", id, step_);
    bundle.l_mask += l_mask.value().item() * inv;
    bundle.l_object += r.object.value().item() * inv;
    bundle.l_valid += r.valid.value().item() * inv;
    bundle.l_adv += l_adv.value().item() * inv;
    tape.backward(total_loss(l_mask, r.object, r.valid, l_adv, !cfg_.no_mask_loss), inv);
    tapes[b].reset();
  }
  for (auto* p : model_->params().all()) {
    for (float g : p->grad.data()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in " + p->name + " at step " + std::to_string(step_));
      }
    }
  }
  adam_step(model_->params().all(), gen_adam_);
  bundle.l_total = (bundle.mask_in_total ? bundle.l_mask : 0.0f) + bundle.l_object +
                   bundle.l_valid + bundle.l_adv;
  ++step_;
  return bundle;
}

template GeneratorLosses<float> generator_losses(Tape<float>&, const OsviModel<float>&,
                                                 const Discriminator<float>*,
                                                 const Sample<float>&, const ForwardOptions&);
template GeneratorLosses<double> generator_losses(Tape<double>&, const OsviModel<double>&,
                                                  const Discriminator<double>*,
                                                  const Sample<double>&, const ForwardOptions&);

}  // namespace osvi
