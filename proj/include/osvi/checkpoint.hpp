#pragma once

// Checkpoint file: "OSVC", u64 version (1), u64 step, u64 config length,
// config text, u64 tensor count, then per tensor a u64-length name and an
// OSVT blob. Generator and discriminator parameters and both optimizer
// states are stored, so resuming reproduces training bit for bit.

#include <filesystem>
#include <map>
#include <string>

#include "osvi/trainer.hpp"

namespace osvi {

struct Checkpoint {
  std::uint64_t step = 0;
  std::string config_text;
  std::map<std::string, Tensor<float>> tensors;
};

Checkpoint snapshot(Trainer& trainer);
/// Copies parameters and optimizer state into a trainer built from the
/// checkpoint's config; missing or mis-shaped tensors → IoError.
void restore(Trainer& trainer, const Checkpoint& ck);
/// Loads just the generator weights into a model.
void restore_model(OsviModel<float>& model, const Checkpoint& ck);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace osvi
