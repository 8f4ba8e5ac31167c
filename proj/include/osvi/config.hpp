#pragma once

// TrainConfig <-> `key = value` text. Keys are the command-line long option
// names, so a snapshot is also a valid --config file.

#include <string>

#include "osvi/trainer.hpp"

namespace osvi {

std::string masking_name(MaskingMode m);
/// "key-side" / "paper-literal"; anything else → ContractError.
MaskingMode parse_masking(const std::string& name);

std::string config_to_text(const TrainConfig& cfg);
/// Unknown keys and malformed values → ContractError naming the line.
TrainConfig config_from_text(const std::string& text);
void apply_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);

}  // namespace osvi
