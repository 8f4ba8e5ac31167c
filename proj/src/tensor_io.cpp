#include "osvi/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace osvi {

namespace {

constexpr char kMagic[4] = {'O', 'S', 'V', 'T'};
constexpr std::uint8_t kVersion = 1;
constexpr std::size_t kMaxRank = 16;

template <typename U>
void put_le(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
  unsigned char b[sizeof(U)];
  in.read(reinterpret_cast<char*>(b), sizeof(U));
  if (!in) throw IoError("truncated tensor stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

template <typename T, typename Bits>
void write_impl(std::ostream& out, const Tensor<T>& t, std::uint8_t dtype) {
  if (t.rank() > kMaxRank) throw IoError("tensor rank too large to serialize");
  out.write(kMagic, 4);
  put_le<std::uint8_t>(out, kVersion);
  put_le<std::uint8_t>(out, dtype);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) put_le<std::uint64_t>(out, d);
  for (T v : t.data()) put_le<Bits>(out, std::bit_cast<Bits>(v));
  if (!out) throw IoError("tensor write failed");
}

template <typename T, typename Bits>
Tensor<T> read_payload(std::istream& in, Shape shape) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = std::bit_cast<T>(get_le<Bits>(in));
  return t;
}

}  // namespace

void write_u64(std::ostream& out, std::uint64_t v) { put_le<std::uint64_t>(out, v); }
std::uint64_t read_u64(std::istream& in) { return get_le<std::uint64_t>(in); }

void write_osvt(std::ostream& out, const Tensor<float>& t) {
  write_impl<float, std::uint32_t>(out, t, 0);
}
void write_osvt(std::ostream& out, const Tensor<double>& t) {
  write_impl<double, std::uint64_t>(out, t, 1);
}

AnyTensor read_osvt(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw IoError("not an OSVT tensor");
  const auto version = get_le<std::uint8_t>(in);
  if (version != kVersion) throw IoError("unsupported OSVT version " + std::to_string(version));
  const auto dtype = get_le<std::uint8_t>(in);
  const auto rank = get_le<std::uint8_t>(in);
  if (rank == 0 || rank > kMaxRank) throw IoError("bad OSVT rank " + std::to_string(rank));
  Shape shape;
  std::uint64_t total = 1;
  for (std::uint8_t i = 0; i < rank; ++i) {
    const std::uint64_t d = get_le<std::uint64_t>(in);
    if (d == 0 || total > (std::uint64_t{1} << 40) / d) throw IoError("bad OSVT dims");
    total *= d;
    shape.push_back(static_cast<std::size_t>(d));
  }
  switch (dtype) {
    case 0: return read_payload<float, std::uint32_t>(in, std::move(shape));
    case 1: return read_payload<double, std::uint64_t>(in, std::move(shape));
    default: throw IoError("unknown OSVT dtype " + std::to_string(dtype));
  }
}

void save_osvt(const std::filesystem::path& path, const AnyTensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  std::visit([&](const auto& x) { write_osvt(out, x); }, t);
}

AnyTensor load_osvt(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return read_osvt(in);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

Tensor<float> as_float(AnyTensor t, const std::string& what) {
  if (auto* f = std::get_if<Tensor<float>>(&t)) return std::move(*f);
  throw IoError(what + " is stored as f64, expected f32");
}

}  // namespace osvi
