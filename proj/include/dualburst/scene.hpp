#pragma once

// Procedural moving-shape scenes and on-disk burst datasets.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dualburst/burst.hpp"
#include "dualburst/errors.hpp"
#include "dualburst/parallel.hpp"
#include "dualburst/rng.hpp"
#include "dualburst/sensor.hpp"
#include "dualburst/tensor.hpp"

namespace dualburst {

enum class ShapeClass : int { disk = 0, square, triangle, cross, ring, bar };

inline constexpr std::array<const char*, 6> kShapeNames = {"disk", "square", "triangle", "cross", "ring", "bar"};

struct SceneSpec {
  std::size_t image_size = 32;
  int num_classes = 4;
  std::size_t frames = 8;
  double frame_dt = 0.01;  // seconds per frame
  double flux_fg = 500.0;  // photons/s
  double flux_bg = 50.0;
  double speed_min = 0.5;  // pixels per frame
  double speed_max = 2.5;
  double radius_min = 5.0;  // shape half-size, pixels
  double radius_max = 8.0;
  double rotation_max = 0.25;  // shape orientation drawn from [-rotation_max, rotation_max], radians
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2 || num_classes > static_cast<int>(kShapeNames.size())) {
      throw ConfigError("num_classes must be in [2, " + std::to_string(kShapeNames.size()) + "]");
    }
    if (!(flux_fg > flux_bg) || !(flux_bg >= 0.0)) throw ConfigError("need flux_fg > flux_bg >= 0");
    if (image_size < 8) throw ConfigError("image_size must be >= 8");
    if (frames < 1) throw ConfigError("frames must be >= 1");
    if (!(frame_dt > 0.0)) throw ConfigError("frame_dt must be > 0");
    if (!(speed_min >= 0.0 && speed_max >= speed_min)) throw ConfigError("bad speed range");
    if (!(radius_min > 0.0 && radius_max >= radius_min)) throw ConfigError("bad radius range");
    if (!(rotation_max >= 0.0)) throw ConfigError("rotation_max must be >= 0");
  }
};

namespace detail {

// Point (u, v) in shape-local coordinates, shape half-size r.
inline bool inside_shape(ShapeClass cls, double u, double v, double r) {
  switch (cls) {
    case ShapeClass::disk:
      return u * u + v * v <= r * r;
    case ShapeClass::square:
      return std::abs(u) <= 0.85 * r && std::abs(v) <= 0.85 * r;
    case ShapeClass::triangle: {
      // Equilateral, circumradius r, apex up.
      const double s3 = std::sqrt(3.0);
      return v <= 0.5 * r && s3 * u - v <= r && -s3 * u - v <= r;
    }
    case ShapeClass::cross: {
      const double t = r / 3.0;
      return (std::abs(u) <= r && std::abs(v) <= t) || (std::abs(v) <= r && std::abs(u) <= t);
    }
    case ShapeClass::ring: {
      const double d2 = u * u + v * v;
      return d2 <= r * r && d2 >= 0.36 * r * r;
    }
    case ShapeClass::bar:
      return std::abs(u) <= r && std::abs(v) <= 0.35 * r;
  }
  return false;
}

}  // namespace detail

struct SceneSample {
  FluxFrames flux;
  int label = 0;
};

/// Renders one shape translating across a flat background. Noise-free flux,
/// 4x4 supersampled coverage. Deterministic in (spec.seed, sample_index).
inline SceneSample generate_scene(const SceneSpec& spec, std::uint64_t sample_index) {
  spec.validate();
  auto rng = derive_stream(RngStream::root(spec.seed), "scene", sample_index);
  SceneSample out;
  out.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_classes)));
  const auto cls = static_cast<ShapeClass>(out.label);
  const double size = static_cast<double>(spec.image_size);
  const double r = rng.uniform(spec.radius_min, spec.radius_max);
  const double rot = rng.uniform(-spec.rotation_max, spec.rotation_max);
  const double speed = rng.uniform(spec.speed_min, spec.speed_max);
  const double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double cx0 = size / 2.0 + rng.uniform(-size / 8.0, size / 8.0);
  const double cy0 = size / 2.0 + rng.uniform(-size / 8.0, size / 8.0);
  const double vx = speed * std::cos(heading);
  const double vy = speed * std::sin(heading);
  const double cr = std::cos(rot);
  const double sr = std::sin(rot);
  const double mid = static_cast<double>(spec.frames / 2);

  constexpr int kSuper = 4;
  out.flux.frame_dt = spec.frame_dt;
  for (std::size_t f = 0; f < spec.frames; ++f) {
    const double cx = cx0 + vx * (static_cast<double>(f) - mid);
    const double cy = cy0 + vy * (static_cast<double>(f) - mid);
    TensorF frame({spec.image_size, spec.image_size});
    for (std::size_t y = 0; y < spec.image_size; ++y) {
      for (std::size_t x = 0; x < spec.image_size; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            const double px = static_cast<double>(x) + (sx + 0.5) / kSuper - cx;
            const double py = static_cast<double>(y) + (sy + 0.5) / kSuper - cy;
            const double u = cr * px + sr * py;
            const double v = -sr * px + cr * py;
            hits += detail::inside_shape(cls, u, v, r) ? 1 : 0;
          }
        }
        const double coverage = static_cast<double>(hits) / (kSuper * kSuper);
        frame(y, x) = static_cast<float>(spec.flux_bg + (spec.flux_fg - spec.flux_bg) * coverage);
      }
    }
    out.flux.frames.push_back(std::move(frame));
  }
  return out;
}

/// Test samples draw scene indices from this offset upward; train samples from 0.
inline constexpr std::uint64_t kTestIndexOffset = 1'000'000'000ULL;

struct ManifestEntry {
  std::string path;  // relative to the dataset root
  int label = 0;
  std::uint64_t seed = 0;  // scene index fed to generate_scene
  std::string split() const { return path.substr(0, path.find('/')); }
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> split(const std::string& name) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
      if (e.split() == name) out.push_back(e);
    }
    return out;
  }
};

inline constexpr const char* kManifestName = "manifest.tsv";

inline void write_manifest(const DatasetManifest& m) {
  const auto path = m.root / kManifestName;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write manifest: " + path.string());
  for (const auto& e : m.entries) os << e.path << '\t' << e.label << '\t' << e.seed << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

inline DatasetManifest read_manifest(const std::filesystem::path& root) {
  const auto path = root / kManifestName;
  std::ifstream is(path);
  if (!is) throw IoError("cannot read manifest: " + path.string());
  DatasetManifest m;
  m.root = root;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string label, seed;
    if (!std::getline(ls, e.path, '\t') || !std::getline(ls, label, '\t') || !std::getline(ls, seed)) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected path<TAB>label<TAB>seed");
    }
    try {
      e.label = std::stoi(label);
      e.seed = std::stoull(seed);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad label or seed");
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

struct SplitCounts {
  std::size_t train = 0;
  std::size_t test = 0;
};

/// Linear [0,1] single image for severity-mode datasets: the middle flux frame over flux_fg.
inline TensorF scene_still(const SceneSpec& spec, const SceneSample& s) {
  return clamp01(scale(s.flux.frames[s.flux.count() / 2], static_cast<float>(1.0 / spec.flux_fg)));
}

/// Simulates and writes one burst per sample under out_dir/{train,test}/ plus the manifest.
inline DatasetManifest build_dataset(const SceneSpec& spec, const ExposurePlan& plan, const SensorConfig& sensor,
                                     SplitCounts counts, const std::filesystem::path& out_dir,
                                     CaptureOptions options = {}) {
  spec.validate();
  plan.validate();
  sensor.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* sub : {"train", "test"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw IoError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }

  DatasetManifest m;
  m.root = out_dir;
  const std::size_t total = counts.train + counts.test;
  m.entries.resize(total);
  const auto root = RngStream::root(spec.seed);
  parallel_for(total, [&](std::size_t k) {
    const bool is_train = k < counts.train;
    const std::size_t local = is_train ? k : k - counts.train;
    const std::uint64_t index = is_train ? local : kTestIndexOffset + local;
    SceneSample s = generate_scene(spec, index);
    const auto noise = derive_stream(root, "burst", index);
    Burst b = plan.mode == ExposurePlan::Mode::frame_window
                  ? make_burst(s.flux, plan, sensor, noise, options)
                  : make_burst(scene_still(spec, s), plan, sensor, noise, options);
    b.label = s.label;
    char name[32];
    std::snprintf(name, sizeof(name), "%s/%06zu.dbt", is_train ? "train" : "test", local);
    save_burst(out_dir / name, b);
    m.entries[k] = ManifestEntry{name, s.label, index};
  });
  write_manifest(m);
  return m;
}

}  // namespace dualburst
