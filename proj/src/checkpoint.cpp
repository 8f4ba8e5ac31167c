#include "osvi/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "osvi/config.hpp"
#include "osvi/tensor_io.hpp"

namespace osvi {

namespace {

constexpr char kMagic[4] = {'O', 'S', 'V', 'C'};
constexpr std::uint64_t kVersion = 1;

void put_group(Checkpoint& ck, const std::string& prefix, ParamStore<float>& store,
               const AdamState<float>& adam) {
  const auto params = store.all();
  for (std::size_t k = 0; k < params.size(); ++k) {
    ck.tensors[prefix + "/" + params[k]->name] = params[k]->value;
    ck.tensors[prefix + ".m/" + params[k]->name] = adam.m[k];
    ck.tensors[prefix + ".v/" + params[k]->name] = adam.v[k];
  }
  // The step counter is exact in a float only up to 2^24; store it split.
  Tensor<float> step({2});
  step[0] = static_cast<float>(adam.step >> 24);
  step[1] = static_cast<float>(adam.step & 0xFFFFFF);
  ck.tensors["adam/" + prefix + "_step"] = step;
}

const Tensor<float>& need(const Checkpoint& ck, const std::string& name, const Shape& shape) {
  auto it = ck.tensors.find(name);
  if (it == ck.tensors.end()) throw IoError("checkpoint lacks tensor " + name);
  if (it->second.shape() != shape) {
    throw IoError("checkpoint tensor " + name + " is " + shape_str(it->second.shape()) +
                  ", model expects " + shape_str(shape));
  }
  return it->second;
}

void get_params(const Checkpoint& ck, const std::string& prefix, ParamStore<float>& store) {
  for (auto* p : store.all()) p->value = need(ck, prefix + "/" + p->name, p->value.shape());
}

void get_group(const Checkpoint& ck, const std::string& prefix, ParamStore<float>& store,
               AdamState<float>& adam) {
  get_params(ck, prefix, store);
  const auto params = store.all();
  for (std::size_t k = 0; k < params.size(); ++k) {
    adam.m[k] = need(ck, prefix + ".m/" + params[k]->name, params[k]->value.shape());
    adam.v[k] = need(ck, prefix + ".v/" + params[k]->name, params[k]->value.shape());
  }
  const Tensor<float>& step = need(ck, "adam/" + prefix + "_step", {2});
  adam.step = (static_cast<std::uint64_t>(step[0]) << 24) | static_cast<std::uint64_t>(step[1]);
}

}  // namespace

Checkpoint snapshot(Trainer& trainer) {
  Checkpoint ck;
  ck.step = trainer.steps_done();
  ck.config_text = config_to_text(trainer.config());
  put_group(ck, "gen", trainer.model().params(), trainer.generator_adam());
  put_group(ck, "disc", trainer.discriminator().params(), trainer.discriminator_adam());
  return ck;
}

void restore(Trainer& trainer, const Checkpoint& ck) {
  get_group(ck, "gen", trainer.model().params(), trainer.generator_adam());
  get_group(ck, "disc", trainer.discriminator().params(), trainer.discriminator_adam());
  trainer.set_steps_done(ck.step);
}

void restore_model(OsviModel<float>& model, const Checkpoint& ck) {
  get_params(ck, "gen", model.params());
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  // Write to a side file and rename, so a crash never leaves half a checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(kMagic, 4);
    write_u64(out, kVersion);
    write_u64(out, ck.step);
    write_u64(out, ck.config_text.size());
    out.write(ck.config_text.data(), static_cast<std::streamsize>(ck.config_text.size()));
    write_u64(out, ck.tensors.size());
    for (const auto& [name, t] : ck.tensors) {
      write_u64(out, name.size());
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_osvt(out, t);
    }
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  try {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) throw IoError("not a checkpoint");
    if (read_u64(in) != kVersion) throw IoError("unsupported checkpoint version");
    Checkpoint ck;
    ck.step = read_u64(in);
    auto read_string = [&in]() {
      const std::uint64_t n = read_u64(in);
      if (n > (1u << 20)) throw IoError("implausible string length");
      std::string s(n, '\0');
      in.read(s.data(), static_cast<std::streamsize>(n));
      if (!in) throw IoError("truncated string");
      return s;
    };
    ck.config_text = read_string();
    const std::uint64_t count = read_u64(in);
    for (std::uint64_t i = 0; i < count; ++i) {
      std::string name = read_string();
      ck.tensors[name] = as_float(read_osvt(in), name);
    }
    return ck;
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace osvi
