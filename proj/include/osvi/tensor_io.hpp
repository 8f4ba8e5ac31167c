#pragma once

// OSVT container: "OSVT", u8 version (1), u8 dtype (0 = f32, 1 = f64),
// u8 rank, rank × u64 dims, then the row-major payload. All little endian.

#include <filesystem>
#include <iosfwd>
#include <variant>

#include "osvi/tensor.hpp"

namespace osvi {

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

void write_osvt(std::ostream& out, const Tensor<float>& t);
void write_osvt(std::ostream& out, const Tensor<double>& t);
AnyTensor read_osvt(std::istream& in);

void save_osvt(const std::filesystem::path& path, const AnyTensor& t);
AnyTensor load_osvt(const std::filesystem::path& path);

/// The float payload of `t`; IoError when it holds doubles.
Tensor<float> as_float(AnyTensor t, const std::string& what);

// Little-endian scalar helpers shared with the checkpoint format.
void write_u64(std::ostream& out, std::uint64_t v);
std::uint64_t read_u64(std::istream& in);

}  // namespace osvi
