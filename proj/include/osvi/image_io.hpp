#pragma once

#include <cstdint>
#include <filesystem>

#include "osvi/tensor.hpp"

namespace osvi {

/// The one 8-bit quantizer used everywhere, so files and memory agree.
inline std::uint8_t unit_to_byte(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(v * 255.0 + 0.5);
}
inline float byte_to_unit(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }
inline float quantize(double v) { return byte_to_unit(unit_to_byte(v)); }

/// Binary P6. rgb: 3×H×W in [0,1].
void write_ppm(const std::filesystem::path& path, const Tensor<float>& rgb);
Tensor<float> read_ppm(const std::filesystem::path& path);

/// Binary P5. gray: H×W in [0,1].
void write_pgm(const std::filesystem::path& path, const Tensor<float>& gray);
Tensor<float> read_pgm(const std::filesystem::path& path);

}  // namespace osvi
