#include "osvi/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "osvi/image_io.hpp"
#include "osvi/rng.hpp"

namespace osvi {

namespace fs = std::filesystem;
using std::numbers::pi;

std::string profile_name(Profile p) { return p == Profile::kToyA ? "toy-A" : "toy-B"; }

Profile parse_profile(const std::string& name) {
  if (name == "toy-A") return Profile::kToyA;
  if (name == "toy-B") return Profile::kToyB;
  throw ContractError("unknown profile '" + name + "' (expected toy-A or toy-B)");
}

std::array<double, 3> BackgroundField::sample(double x, double y) const {
  std::array<double, 3> c = base;
  for (const auto& w : waves) {
    const double s = std::sin(2.0 * pi * (w.fx * x + w.fy * y) + w.phase);
    for (int k = 0; k < 3; ++k) c[k] += w.amplitude[k] * s;
  }
  return c;
}

namespace {

Wave random_wave(Rng& rng, double min_period, double max_period, double amp) {
  Wave w;
  const double period = rng.uniform(min_period, max_period);
  const double dir = rng.uniform(0.0, 2.0 * pi);
  w.fx = std::cos(dir) / period;
  w.fy = std::sin(dir) / period;
  w.phase = rng.uniform(0.0, 2.0 * pi);
  for (auto& a : w.amplitude) a = rng.uniform(-amp, amp);
  return w;
}

}  // namespace

BackgroundField random_background_field(std::uint64_t seed, Profile profile) {
  Rng rng(seed);
  BackgroundField f;
  for (auto& b : f.base) b = rng.uniform(0.3, 0.7);
  for (int i = 0; i < 3; ++i) f.waves.push_back(random_wave(rng, 50.0, 140.0, 0.12));
  if (profile == Profile::kToyA) {
    for (int i = 0; i < 3; ++i) f.waves.push_back(random_wave(rng, 8.0, 16.0, 0.03));
  } else {
    for (int i = 0; i < 6; ++i) f.waves.push_back(random_wave(rng, 4.0, 10.0, 0.08));
  }
  return f;
}

CameraPath random_camera_path(std::uint64_t seed, std::size_t height, std::size_t width) {
  Rng rng(seed);
  CameraPath p;
  p.x0 = rng.uniform(-200.0, 200.0) + static_cast<double>(width) / 2.0;
  p.y0 = rng.uniform(-200.0, 200.0) + static_cast<double>(height) / 2.0;
  const double speed = rng.uniform(0.3, 1.8);
  const double dir = rng.uniform(0.0, 2.0 * pi);
  p.vx = speed * std::cos(dir);
  p.vy = speed * std::sin(dir);
  p.zoom_end = rng.uniform(0.95, 1.05);
  return p;
}

Tensor<float> render_background(const BackgroundField& field, const CameraPath& path,
                                std::size_t frames, std::size_t height, std::size_t width) {
  Tensor<float> out({frames, 3, height, width});
  const std::size_t plane = height * width;
  for (std::size_t t = 0; t < frames; ++t) {
    const double u = frames > 1 ? static_cast<double>(t) / static_cast<double>(frames - 1) : 0.0;
    const double zoom = 1.0 + (path.zoom_end - 1.0) * u;
    const double cx = path.x0 + path.vx * static_cast<double>(t);
    const double cy = path.y0 + path.vy * static_cast<double>(t);
    float* f = out.ptr() + t * 3 * plane;
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j) {
        const double x = cx + (static_cast<double>(j) + 0.5 - static_cast<double>(width) / 2.0) * zoom;
        const double y = cy + (static_cast<double>(i) + 0.5 - static_cast<double>(height) / 2.0) * zoom;
        const auto c = field.sample(x, y);
        for (std::size_t k = 0; k < 3; ++k) f[k * plane + i * width + j] = quantize(c[k]);
      }
  }
  return out;
}

Tensor<float> gen_background(std::uint64_t seed, std::size_t frames, std::size_t height,
                             std::size_t width, Profile profile) {
  return render_background(random_background_field(mix_seed(seed, 0), profile),
                           random_camera_path(mix_seed(seed, 1), height, width), frames, height,
                           width);
}

namespace {

bool inside_polygon(const std::vector<std::array<double, 2>>& poly, double x, double y) {
  bool in = false;
  for (std::size_t a = 0, b = poly.size() - 1; a < poly.size(); b = a++) {
    const auto& p = poly[a];
    const auto& q = poly[b];
    if ((p[1] > y) != (q[1] > y) && x < (q[0] - p[0]) * (y - p[1]) / (q[1] - p[1]) + p[0]) {
      in = !in;
    }
  }
  return in;
}

std::vector<double> deform_scale(const SpriteShape& shape, const SpriteMotion& m, std::size_t t) {
  std::vector<double> scale(shape.radii.size(), 1.0);
  if (m.deform == 0.0) return scale;
  for (std::size_t k = 0; k < scale.size(); ++k) {
    scale[k] = 1.0 + m.deform * std::sin(0.9 * static_cast<double>(t) + 2.4 * static_cast<double>(k));
  }
  return scale;
}

double polygon_area(const SpriteShape& s) {
  const std::size_t n = s.radii.size();
  double area = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t k2 = (k + 1) % n;
    const double a1 = 2.0 * pi * static_cast<double>(k) / static_cast<double>(n) + s.angle_offsets[k];
    const double a2 = 2.0 * pi * static_cast<double>(k2) / static_cast<double>(n) + s.angle_offsets[k2] +
                      (k2 == 0 ? 2.0 * pi : 0.0);
    area += 0.5 * s.radii[k] * s.radii[k2] * std::sin(a2 - a1);
  }
  return area;
}

}  // namespace

Tensor<float> rasterize(const SpriteShape& shape, double cx, double cy, double angle,
                        std::size_t height, std::size_t width,
                        const std::vector<double>& radius_scale) {
  Tensor<float> mask({height, width});
  const double ca = std::cos(angle), sa = std::sin(angle);
  std::vector<std::array<double, 2>> poly;
  if (shape.kind == SpriteShape::Kind::kPolygon) {
    const std::size_t n = shape.radii.size();
    for (std::size_t k = 0; k < n; ++k) {
      const double r = shape.radii[k] * (radius_scale.empty() ? 1.0 : radius_scale[k]);
      const double th = 2.0 * pi * static_cast<double>(k) / static_cast<double>(n) +
                        shape.angle_offsets[k] + angle;
      poly.push_back({cx + r * std::cos(th), cy + r * std::sin(th)});
    }
  }
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j) {
      const double x = static_cast<double>(j) + 0.5, y = static_cast<double>(i) + 0.5;
      bool in = false;
      if (shape.kind == SpriteShape::Kind::kEllipse) {
        const double dx = x - cx, dy = y - cy;
        const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
        in = (u * u) / (shape.a * shape.a) + (v * v) / (shape.b * shape.b) <= 1.0;
      } else {
        in = inside_polygon(poly, x, y);
      }
      mask[i * width + j] = in ? 1.0f : 0.0f;
    }
  return mask;
}

ObjectClip render_object(const SpriteShape& shape, const SpriteMotion& motion,
                         std::uint64_t texture_seed, std::size_t frames, std::size_t height,
                         std::size_t width) {
  Rng rng(texture_seed);
  std::array<double, 3> color;
  do {
    for (auto& c : color) c = rng.uniform(0.05, 0.95);
  } while (*std::max_element(color.begin(), color.end()) -
               *std::min_element(color.begin(), color.end()) < 0.5);
  const double period = rng.uniform(4.0, 9.0);
  const double phase = rng.uniform(0.0, 2.0 * pi);

  ObjectClip clip;
  clip.shape = shape;
  clip.motion = motion;
  clip.sprite = Tensor<float>({frames, 3, height, width});
  clip.mask = Tensor<float>({frames, height, width});
  const std::size_t plane = height * width;
  for (std::size_t t = 0; t < frames; ++t) {
    const double td = static_cast<double>(t);
    const double cx = motion.x0 + motion.vx * td, cy = motion.y0 + motion.vy * td;
    const double ang = motion.angle0 + motion.omega * td;
    Tensor<float> m = rasterize(shape, cx, cy, ang, height, width, deform_scale(shape, motion, t));
    std::copy(m.ptr(), m.ptr() + plane, clip.mask.ptr() + t * plane);
    const double ca = std::cos(ang), sa = std::sin(ang);
    float* f = clip.sprite.ptr() + t * 3 * plane;
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j) {
        const double dx = static_cast<double>(j) + 0.5 - cx, dy = static_cast<double>(i) + 0.5 - cy;
        const double u = ca * dx + sa * dy;
        const double shade = 0.65 + 0.35 * std::sin(2.0 * pi * u / period + phase);
        for (std::size_t k = 0; k < 3; ++k) f[k * plane + i * width + j] = quantize(color[k] * shade);
      }
  }
  return clip;
}

ObjectClip gen_object(std::uint64_t seed, std::size_t frames, std::size_t height,
                      std::size_t width, Profile profile) {
  constexpr int kMaxAttempts = 64;
  Rng rng(seed);
  const double hw = static_cast<double>(height * width);
  const double target = rng.uniform(0.05, 0.10) * hw;
  SpriteShape shape;
  const bool polygon = profile == Profile::kToyB || rng.uniform() < 0.5;
  double extent = 0.0;
  if (!polygon) {
    const double aspect = rng.uniform(0.6, 1.0);
    shape.kind = SpriteShape::Kind::kEllipse;
    shape.a = std::sqrt(target / (pi * aspect));
    shape.b = shape.a * aspect;
    extent = shape.a;
  } else {
    shape.kind = SpriteShape::Kind::kPolygon;
    const std::size_t n = profile == Profile::kToyA ? 5 + rng.index(4) : 6 + rng.index(4);
    const double rmin = profile == Profile::kToyA ? 0.75 : 0.6;
    for (std::size_t k = 0; k < n; ++k) {
      shape.radii.push_back(rng.uniform(rmin, 1.0));
      shape.angle_offsets.push_back(rng.uniform(-0.25, 0.25) * pi / static_cast<double>(n));
    }
    const double s = std::sqrt(target / polygon_area(shape));
    for (auto& r : shape.radii) r *= s;
    extent = *std::max_element(shape.radii.begin(), shape.radii.end());
  }
  const std::uint64_t texture_seed = rng.bits();
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  const double span = static_cast<double>(frames > 0 ? frames - 1 : 0);
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    SpriteMotion m;
    const double speed = rng.uniform(0.5, 3.0);
    const double dir = rng.uniform(0.0, 2.0 * pi);
    m.vx = speed * std::cos(dir);
    m.vy = speed * std::sin(dir);
    m.omega = rng.uniform(-4.0, 4.0) * pi / 180.0;
    m.angle0 = rng.uniform(0.0, 2.0 * pi);
    m.deform = profile == Profile::kToyB ? 0.1 : 0.0;
    const double margin = 0.5 * extent;
    m.x0 = rng.uniform(margin, w - margin);
    m.y0 = rng.uniform(margin, h - margin);
    const double x1 = m.x0 + m.vx * span, y1 = m.y0 + m.vy * span;
    if (x1 < margin || x1 > w - margin || y1 < margin || y1 > h - margin) continue;
    ObjectClip clip = render_object(shape, m, texture_seed, frames, height, width);
    bool ok = true;
    const std::size_t plane = height * width;
    for (std::size_t t = 0; t < frames && ok; ++t) {
      double area = 0.0;
      for (std::size_t p = 0; p < plane; ++p) area += clip.mask[t * plane + p];
      ok = area >= 0.02 * hw && area <= 0.20 * hw;
    }
    if (ok) return clip;
  }
  throw ContractError("gen_object: object left the frame in " + std::to_string(kMaxAttempts) +
                      " motion draws (seed " + std::to_string(seed) + ")");
}

std::string snippet_id(Profile profile, std::uint64_t seed) {
  return profile_name(profile) + "-s" + std::to_string(seed);
}

Snippet synthesize_snippet(std::uint64_t seed, const SynthConfig& cfg) {
  Snippet s;
  s.id = snippet_id(cfg.profile, seed);
  s.seed = seed;
  s.clean = gen_background(mix_seed(seed, 10), cfg.frames, cfg.height, cfg.width, cfg.profile);
  ObjectClip obj = gen_object(mix_seed(seed, 20), cfg.frames, cfg.height, cfg.width, cfg.profile);
  s.masks = obj.mask;
  s.object_layer = obj.sprite;
  s.input = s.clean;
  const std::size_t plane = cfg.height * cfg.width;
  for (std::size_t t = 0; t < cfg.frames; ++t)
    for (std::size_t p = 0; p < plane; ++p) {
      if (s.masks[t * plane + p] == 0.0f) continue;
      for (std::size_t k = 0; k < 3; ++k) {
        const std::size_t idx = (t * 3 + k) * plane + p;
        s.input[idx] = s.object_layer[idx];
      }
    }
  return s;
}

std::string frame_name(const char* prefix, std::size_t t, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04zu.%s", prefix, t, ext);
  return buf;
}

void write_snippet(const fs::path& dir, const Snippet& s) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (std::size_t t = 0; t < s.frames(); ++t) {
    write_ppm(dir / frame_name("input", t, "ppm"), frame_of(s.input, t));
    write_ppm(dir / frame_name("clean", t, "ppm"), frame_of(s.clean, t));
    write_pgm(dir / frame_name("mask", t, "pgm"), frame_of(s.masks, t));
  }
}

DatasetManifest write_dataset(std::size_t n, const fs::path& out_dir, const SynthConfig& cfg,
                              std::uint64_t base_seed) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  DatasetManifest m;
  m.height = cfg.height;
  m.width = cfg.width;
  m.frames = cfg.frames;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t seed = base_seed * 100000 + i;
    Snippet s = synthesize_snippet(seed, cfg);
    char dir[32];
    std::snprintf(dir, sizeof dir, "snippet_%04zu", i);
    write_snippet(out_dir / dir, s);
    m.entries.push_back({s.id, seed, dir});
  }
  std::ofstream out(out_dir / kManifestName);
  if (!out) throw IoError("cannot write " + (out_dir / kManifestName).string());
  out << "osvi-dataset v" << m.version << " " << m.height << " " << m.width << " " << m.frames
      << "\n";
  for (const auto& e : m.entries) out << "snippet " << e.id << " " << e.seed << " " << e.dir << "\n";
  if (!out) throw IoError("write failed: " + (out_dir / kManifestName).string());
  return m;
}

DatasetManifest read_manifest(const fs::path& data_dir) {
  const fs::path path = data_dir / kManifestName;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  DatasetManifest m;
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty manifest " + path.string());
  {
    std::istringstream hs(line);
    std::string magic, version;
    if (!(hs >> magic >> version >> m.height >> m.width >> m.frames) || magic != "osvi-dataset" ||
        version != "v1") {
      throw IoError("bad manifest header in " + path.string() + ": '" + line + "'");
    }
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ManifestEntry e;
    if (!(ls >> tag >> e.id >> e.seed >> e.dir) || tag != "snippet") {
      throw IoError("bad manifest line in " + path.string() + ": '" + line + "'");
    }
    m.entries.push_back(e);
  }
  return m;
}

Snippet load_snippet(const fs::path& data_dir, const ManifestEntry& entry,
                     const DatasetManifest& manifest) {
  const fs::path dir = data_dir / entry.dir;
  const std::size_t frames = manifest.frames, h = manifest.height, w = manifest.width;
  Snippet s;
  s.id = entry.id;
  s.seed = entry.seed;
  s.input = Tensor<float>({frames, 3, h, w});
  s.clean = Tensor<float>({frames, 3, h, w});
  s.masks = Tensor<float>({frames, h, w});
  const std::size_t plane = h * w;
  auto put = [&](Tensor<float>& dst, const Tensor<float>& src, std::size_t t, const fs::path& p) {
    if (src.size() * frames != dst.size()) {
      throw IoError(p.string() + " is " + shape_str(src.shape()) + ", manifest says " +
                    std::to_string(h) + "x" + std::to_string(w));
    }
    std::copy(src.ptr(), src.ptr() + src.size(), dst.ptr() + t * src.size());
  };
  for (std::size_t t = 0; t < frames; ++t) {
    const fs::path pi_ = dir / frame_name("input", t, "ppm");
    const fs::path pc = dir / frame_name("clean", t, "ppm");
    const fs::path pm = dir / frame_name("mask", t, "pgm");
    put(s.input, read_ppm(pi_), t, pi_);
    put(s.clean, read_ppm(pc), t, pc);
    put(s.masks, read_pgm(pm), t, pm);
  }
  for (std::size_t i = 0; i < frames * plane; ++i) {
    if (s.masks[i] != 0.0f && s.masks[i] != 1.0f) throw IoError("non-binary mask in " + dir.string());
  }
  // Only the composite is stored; under the mask it equals the sprite.
  s.object_layer = s.input;
  return s;
}

std::vector<Snippet> load_dataset(const fs::path& data_dir) {
  DatasetManifest m = read_manifest(data_dir);
  std::vector<Snippet> out;
  for (const auto& e : m.entries) out.push_back(load_snippet(data_dir, e, m));
  return out;
}

}  // namespace osvi
