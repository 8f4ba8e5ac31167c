#include "osvi/image_io.hpp"

#include <cctype>
#include <fstream>
#include <string>
#include <vector>

namespace osvi {

namespace {

void write_netpbm(const std::filesystem::path& path, const char* magic, std::size_t h,
                  std::size_t w, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << magic << "\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

// Reads one header token, skipping whitespace and '#' comments.
std::string header_token(std::istream& in, const std::filesystem::path& path) {
  std::string tok;
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  if (tok.empty()) throw IoError("truncated header in " + path.string());
  return tok;
}

std::vector<std::uint8_t> read_netpbm(const std::filesystem::path& path, const char* magic,
                                      std::size_t channels, std::size_t& h, std::size_t& w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  if (header_token(in, path) != magic) {
    throw IoError(path.string() + " is not a " + magic + " file");
  }
  try {
    w = std::stoul(header_token(in, path));
    h = std::stoul(header_token(in, path));
    if (std::stoul(header_token(in, path)) != 255) throw IoError("only 8-bit images: " + path.string());
  } catch (const std::logic_error&) {
    throw IoError("bad header in " + path.string());
  }
  if (h == 0 || w == 0) throw IoError("empty image " + path.string());
  std::vector<std::uint8_t> bytes(h * w * channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw IoError("truncated pixel data in " + path.string());
  }
  return bytes;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor<float>& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) {
    throw DimensionError("write_ppm expects 3×H×W, got " + shape_str(rgb.shape()));
  }
  const std::size_t h = rgb.dim(1), w = rgb.dim(2), plane = h * w;
  std::vector<std::uint8_t> bytes(3 * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) bytes[p * 3 + c] = unit_to_byte(rgb[c * plane + p]);
  write_netpbm(path, "P6", h, w, bytes);
}

Tensor<float> read_ppm(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  auto bytes = read_netpbm(path, "P6", 3, h, w);
  Tensor<float> out({3, h, w});
  const std::size_t plane = h * w;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + p] = byte_to_unit(bytes[p * 3 + c]);
  return out;
}

void write_pgm(const std::filesystem::path& path, const Tensor<float>& gray) {
  if (gray.rank() != 2) throw DimensionError("write_pgm expects H×W, got " + shape_str(gray.shape()));
  std::vector<std::uint8_t> bytes(gray.size());
  for (std::size_t i = 0; i < gray.size(); ++i) bytes[i] = unit_to_byte(gray[i]);
  write_netpbm(path, "P5", gray.dim(0), gray.dim(1), bytes);
}

Tensor<float> read_pgm(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  auto bytes = read_netpbm(path, "P5", 1, h, w);
  Tensor<float> out({h, w});
  for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = byte_to_unit(bytes[i]);
  return out;
}

}  // namespace osvi
