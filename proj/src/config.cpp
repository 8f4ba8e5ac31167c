#include "osvi/config.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

namespace osvi {

std::string masking_name(MaskingMode m) {
  return m == MaskingMode::kKeySide ? "key-side" : "paper-literal";
}

MaskingMode parse_masking(const std::string& name) {
  if (name == "key-side") return MaskingMode::kKeySide;
  if (name == "paper-literal") return MaskingMode::kPaperLiteral;
  throw ContractError("unknown masking mode '" + name + "' (expected key-side or paper-literal)");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename U>
U parse_number(const std::string& key, const std::string& v) {
  U out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ContractError("bad value '" + v + "' for " + key);
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ContractError("bad boolean '" + v + "' for " + key);
}

const char* b(bool v) { return v ? "true" : "false"; }

}  // namespace

std::string config_to_text(const TrainConfig& c) {
  std::ostringstream o;
  char lr[64];
  std::snprintf(lr, sizeof lr, "%.17g", c.lr);
  o << "batch = " << c.batch << "\n"
    << "frames = " << c.snippet_len << "\n"
    << "height = " << c.height << "\n"
    << "width = " << c.width << "\n"
    << "iterations = " << c.iterations << "\n"
    << "checkpoint-every = " << c.checkpoint_every << "\n"
    << "lr = " << lr << "\n"
    << "seed = " << c.seed << "\n"
    << "no-mask-loss = " << b(c.no_mask_loss) << "\n"
    << "no-gan = " << b(c.no_gan) << "\n"
    << "no-mask-guidance = " << b(!c.flags.use_guidance) << "\n"
    << "stb-masked = " << b(c.flags.spatial_masked) << "\n"
    << "detach-masks = " << b(c.flags.detach_masks) << "\n"
    << "separate-encoders = " << b(c.flags.separate_encoders) << "\n"
    << "masking = " << masking_name(c.flags.masking) << "\n"
    << "token-channels = " << c.attention.channels << "\n"
    << "heads = " << c.attention.heads << "\n"
    << "blocks = " << c.attention.blocks << "\n"
    << "mlp-hidden = " << c.attention.mlp_hidden << "\n"
    << "memory-every = " << c.memory_every << "\n";
  return o.str();
}

void apply_config_value(TrainConfig& c, const std::string& key, const std::string& v) {
  using Size = std::size_t;
  if (key == "batch") c.batch = parse_number<Size>(key, v);
  else if (key == "frames") c.snippet_len = parse_number<Size>(key, v);
  else if (key == "height") c.height = parse_number<Size>(key, v);
  else if (key == "width") c.width = parse_number<Size>(key, v);
  else if (key == "iterations") c.iterations = parse_number<Size>(key, v);
  else if (key == "checkpoint-every") c.checkpoint_every = parse_number<Size>(key, v);
  else if (key == "lr") c.lr = parse_number<double>(key, v);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "no-mask-loss") c.no_mask_loss = parse_bool(key, v);
  else if (key == "no-gan") c.no_gan = parse_bool(key, v);
  else if (key == "no-mask-guidance") c.flags.use_guidance = !parse_bool(key, v);
  else if (key == "stb-masked") c.flags.spatial_masked = parse_bool(key, v);
  else if (key == "detach-masks") c.flags.detach_masks = parse_bool(key, v);
  else if (key == "separate-encoders") c.flags.separate_encoders = parse_bool(key, v);
  else if (key == "masking") c.flags.masking = parse_masking(v);
  else if (key == "token-channels") c.attention.channels = parse_number<Size>(key, v);
  else if (key == "heads") c.attention.heads = parse_number<Size>(key, v);
  else if (key == "blocks") c.attention.blocks = parse_number<Size>(key, v);
  else if (key == "mlp-hidden") c.attention.mlp_hidden = parse_number<Size>(key, v);
  else if (key == "memory-every") c.memory_every = parse_number<Size>(key, v);
  else throw ContractError("unknown config key '" + key + "'");
}

TrainConfig config_from_text(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = trim(line.substr(0, line.find('#')));
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw ContractError("config line " + std::to_string(lineno) + " has no '=': " + line);
    }
    apply_config_value(c, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  return c;
}

}  // namespace osvi
