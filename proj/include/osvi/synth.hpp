#pragma once

// Procedural training data: a background clip seen through a drifting
// camera, with a foreign sprite composited on top.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "osvi/tensor.hpp"

namespace osvi {

enum class Profile { kToyA, kToyB };

std::string profile_name(Profile p);
/// "toy-A" / "toy-B"; anything else → ContractError.
Profile parse_profile(const std::string& name);

struct SynthConfig {
  std::size_t frames = 7, height = 48, width = 80;
  Profile profile = Profile::kToyA;
};

struct Snippet {
  std::string id;
  std::uint64_t seed = 0;
  Tensor<float> input;         // I: T×3×H×W
  Tensor<float> masks;         // M: T×H×W, {0,1}
  Tensor<float> clean;         // O: T×3×H×W
  Tensor<float> object_layer;  // sprite colours, T×3×H×W

  std::size_t frames() const { return input.dim(0); }
};

/// Camera path over the background plane. Frame t samples a window centred
/// at (x0 + vx·t, y0 + vy·t) with scale 1 + (zoom_end − 1)·t/(T − 1).
struct CameraPath {
  double x0 = 0.0, y0 = 0.0, vx = 0.0, vy = 0.0, zoom_end = 1.0;
};

struct Wave {
  double fx = 0.0, fy = 0.0, phase = 0.0;
  std::array<double, 3> amplitude{};
};

/// Continuous colour field: base + Σ amplitude·sin(2π(fx·x + fy·y) + phase).
struct BackgroundField {
  std::array<double, 3> base{0.5, 0.5, 0.5};
  std::vector<Wave> waves;
  std::array<double, 3> sample(double x, double y) const;
};

BackgroundField random_background_field(std::uint64_t seed, Profile profile);
CameraPath random_camera_path(std::uint64_t seed, std::size_t height, std::size_t width);
Tensor<float> render_background(const BackgroundField& field, const CameraPath& path,
                                 std::size_t frames, std::size_t height, std::size_t width);
/// Quantized T×3×H×W clip.
Tensor<float> gen_background(std::uint64_t seed, std::size_t frames, std::size_t height,
                             std::size_t width, Profile profile = Profile::kToyA);

struct SpriteShape {
  enum class Kind { kEllipse, kPolygon } kind = Kind::kEllipse;
  double a = 1.0, b = 1.0;              // ellipse semi-axes
  std::vector<double> radii;            // polygon vertex radii at equal angles
  std::vector<double> angle_offsets;    // per-vertex angular jitter (rad)
};

/// Rigid pose per frame: centre moves linearly, angle grows by omega.
struct SpriteMotion {
  double x0 = 0.0, y0 = 0.0, vx = 0.0, vy = 0.0, angle0 = 0.0, omega = 0.0;
  double deform = 0.0;  // vertex radius jitter amplitude (toy-B)
};

/// Pixel (i, j) is inside when its centre (j + 0.5, i + 0.5) lies in the
/// shape posed at (cx, cy, angle). `radius_scale` multiplies polygon radii.
Tensor<float> rasterize(const SpriteShape& shape, double cx, double cy, double angle,
                        std::size_t height, std::size_t width,
                        const std::vector<double>& radius_scale = {});

struct ObjectClip {
  Tensor<float> sprite;  // T×3×H×W texture, meaningful under the mask
  Tensor<float> mask;    // T×H×W
  SpriteShape shape;
  SpriteMotion motion;
};

ObjectClip render_object(const SpriteShape& shape, const SpriteMotion& motion,
                         std::uint64_t texture_seed, std::size_t frames, std::size_t height,
                         std::size_t width);
/// Retries motion until every frame's mask covers 2%–20% of the frame;
/// gives up with ContractError after a bounded number of attempts.
ObjectClip gen_object(std::uint64_t seed, std::size_t frames, std::size_t height,
                      std::size_t width, Profile profile = Profile::kToyA);

Snippet synthesize_snippet(std::uint64_t seed, const SynthConfig& cfg);
std::string snippet_id(Profile profile, std::uint64_t seed);

struct ManifestEntry {
  std::string id;
  std::uint64_t seed = 0;
  std::string dir;
};

struct DatasetManifest {
  int version = 1;
  std::size_t height = 0, width = 0, frames = 0;
  std::vector<ManifestEntry> entries;
};

inline constexpr const char* kManifestName = "manifest.txt";

/// Seeds are base_seed·100000 + i.
DatasetManifest write_dataset(std::size_t n, const std::filesystem::path& out_dir,
                              const SynthConfig& cfg, std::uint64_t base_seed);
void write_snippet(const std::filesystem::path& dir, const Snippet& s);
DatasetManifest read_manifest(const std::filesystem::path& data_dir);
Snippet load_snippet(const std::filesystem::path& data_dir, const ManifestEntry& entry,
                     const DatasetManifest& manifest);
std::vector<Snippet> load_dataset(const std::filesystem::path& data_dir);

std::string frame_name(const char* prefix, std::size_t t, const char* ext);

}  // namespace osvi
