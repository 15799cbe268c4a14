#pragma once

// Multi-exposure burst simulation over the noise/blur trade-off.
//
// Two protocols:
//  * frame_window: average a growing window of high-rate frames around a
//    center frame; short windows are noisy, long windows smear moving content.
//  * severity: blur a single image with a motion kernel and add shot noise at
//    paired severity levels (more blur, less noise as the level index grows).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "dualburst/container.hpp"
#include "dualburst/errors.hpp"
#include "dualburst/rng.hpp"
#include "dualburst/sensor.hpp"
#include "dualburst/tensor.hpp"

namespace dualburst {

enum class ReadoutMode { per_frame, single };

struct SeverityLevel {
  int shot = 0;
  int blur = 0;
  bool operator==(const SeverityLevel&) const = default;
};

struct ExposurePlan {
  enum class Mode { frame_window, severity };

  Mode mode = Mode::frame_window;
  std::vector<int> windows{1, 3, 5, 7};  // frame_window mode
  std::vector<SeverityLevel> levels;     // severity mode
  bool include_clean = true;

  static ExposurePlan frames(std::vector<int> windows, bool include_clean = true) {
    ExposurePlan p;
    p.windows = std::move(windows);
    p.include_clean = include_clean;
    return p;
  }

  static ExposurePlan severity(std::vector<SeverityLevel> levels, bool include_clean = true) {
    ExposurePlan p;
    p.mode = Mode::severity;
    p.windows.clear();
    p.levels = std::move(levels);
    p.include_clean = include_clean;
    return p;
  }

  std::size_t size() const { return mode == Mode::frame_window ? windows.size() : levels.size(); }

  void validate() const {
    if (mode == Mode::frame_window) {
      if (windows.empty()) throw DomainError("exposure plan needs at least one window");
      for (std::size_t i = 0; i < windows.size(); ++i) {
        if (windows[i] < 1 || windows[i] % 2 == 0) throw DomainError("windows must be odd");
        if (i > 0 && windows[i] <= windows[i - 1]) throw DomainError("windows must be increasing");
      }
    } else {
      if (levels.empty()) throw DomainError("exposure plan needs at least one severity level");
      for (const auto& l : levels) {
        if (l.shot < 0 || l.shot > 4 || l.blur < 0 || l.blur > 4) {
          throw DomainError("severity levels must lie in [0, 4]");
        }
      }
    }
  }
};

/// The ladder used for single-image sources: noisiest/sharpest first.
inline std::vector<SeverityLevel> default_severity_ladder() { return {{4, 1}, {3, 2}, {2, 3}, {1, 4}}; }

struct Burst {
  std::vector<TensorF> images;   // display domain, [0,1]
  std::optional<TensorF> clean;  // noise-free, blur-free reference
  int label = 0;
  std::vector<double> exposures;  // effective exposure per image, seconds

  std::size_t size() const { return images.size(); }

  void validate() const {
    if (images.empty()) throw DomainError("burst has no images");
    if (exposures.size() != images.size()) throw DomainError("burst exposures/images length mismatch");
    for (const auto& im : images) {
      if (im.shape() != images.front().shape()) throw DomainError("burst images differ in shape");
    }
    if (clean && clean->shape() != images.front().shape()) throw DomainError("clean image shape mismatch");
  }
};

inline TensorF apply_gamma(const TensorF& image, double gamma) {
  const double inv = 1.0 / gamma;
  return map(image, [inv](float v) { return static_cast<float>(std::pow(static_cast<double>(v), inv)); });
}

inline TensorF clamp01(const TensorF& image) {
  return map(image, [](float v) { return std::clamp(v, 0.0f, 1.0f); });
}

/// Average electrons per frame over an odd window centered on `center`.
///
/// per_frame: every frame is captured (shot + dark + read) on its own and the
/// noisy frames are averaged. single: photons are integrated over the window
/// with one readout, then divided by the window length. With `noiseless` the
/// expected electron counts are returned.
inline TensorF simulate_exposure_from_frames(const FluxFrames& flux, std::size_t center, int window,
                                             const SensorConfig& sensor, const RngStream& rng,
                                             ReadoutMode mode = ReadoutMode::per_frame, bool noiseless = false) {
  if (window < 1 || window % 2 == 0) throw DomainError("windows must be odd");
  const std::size_t half = static_cast<std::size_t>(window - 1) / 2;
  if (center < half || center + half >= flux.count()) {
    throw DomainError("window " + std::to_string(window) + " around frame " + std::to_string(center) +
                      " exceeds the " + std::to_string(flux.count()) + "-frame sequence");
  }
  const std::size_t begin = center - half;
  const std::size_t end = center + half + 1;
  const Shape& shape = flux.shape();
  const float inv_k = 1.0f / static_cast<float>(window);

  if (noiseless) {
    TensorF total(shape);
    for (std::size_t f = begin; f < end; ++f) {
      total += scale(flux.frames[f], static_cast<float>(sensor.eta * flux.frame_dt));
    }
    return scale(total, inv_k);
  }
  if (mode == ReadoutMode::single) {
    return scale(simulate_raw_capture(flux, {begin, end}, sensor, rng), inv_k);
  }
  TensorF total(shape);
  for (std::size_t f = begin; f < end; ++f) {
    total += simulate_raw_capture(flux, {f, f + 1}, sensor, derive_stream(rng, "frame", f));
  }
  return scale(total, inv_k);
}

/// Rasterized line segment of `length` pixels through the center of a
/// length x length kernel, normalized to sum 1. Angle in radians, 0 = horizontal.
inline TensorF motion_blur_kernel(int length, double angle) {
  if (length < 1 || length % 2 == 0) throw DomainError("blur kernel length must be odd and >= 1");
  const auto n = static_cast<std::size_t>(length);
  const int half = (length - 1) / 2;
  TensorF k({n, n});
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  // Step one pixel along the dominant axis so the segment covers exactly `length` pixels.
  // Image rows grow downward, so a positive angle moves up (negative row offset).
  const bool horizontal = std::abs(c) >= std::abs(s);
  for (int t = -half; t <= half; ++t) {
    long dx = 0;
    long dy = 0;
    if (horizontal) {
      dx = t;
      dy = std::lround(-t * s / c);
    } else {
      dy = t;
      dx = std::lround(-t * c / s);
    }
    k(static_cast<std::size_t>(half + dy), static_cast<std::size_t>(half + dx)) = 1.0f;
  }
  const float total = static_cast<float>(sum(k));
  k *= 1.0f / total;
  return k;
}

/// 2-d correlation with an odd square kernel, output the size of the input,
/// edge pixels replicated outside the image.
inline TensorF convolve_replicate(const TensorF& image, const TensorF& kernel) {
  if (image.ndim() != 2 || kernel.ndim() != 2) throw DomainError("convolve expects 2-d tensors");
  const long h = static_cast<long>(image.dim(0));
  const long w = static_cast<long>(image.dim(1));
  const long kh = static_cast<long>(kernel.dim(0));
  const long kw = static_cast<long>(kernel.dim(1));
  const long ry = kh / 2;
  const long rx = kw / 2;
  TensorF out(image.shape());
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long i = 0; i < kh; ++i) {
        const long sy = std::clamp(y + i - ry, 0L, h - 1);
        for (long j = 0; j < kw; ++j) {
          const float kv = kernel(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
          if (kv == 0.0f) continue;
          const long sx = std::clamp(x + j - rx, 0L, w - 1);
          acc += static_cast<double>(kv) * image(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
        }
      }
      out(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = static_cast<float>(acc);
    }
  }
  return out;
}

inline constexpr int kSeverityBlurLength[5] = {1, 5, 9, 13, 17};
// Electrons collected at display white; level 0 means noise-free.
inline constexpr double kSeverityPhotonBudget[5] = {0.0, 240.0, 60.0, 25.0, 12.0};
// Nominal frame time used to report an effective exposure for severity images.
inline constexpr double kSeverityFrameDt = 1.0 / 120.0;

/// Blur direction drawn for a severity corruption; uniform over [0, pi).
inline double severity_blur_angle(const RngStream& rng) {
  auto s = derive_stream(rng, "blur_angle", 0);
  return s.uniform(0.0, std::numbers::pi);
}

/// Motion blur then shot noise on a [0,1] image, result clamped to [0,1].
inline TensorF severity_corrupt(const TensorF& image, int shot_level, int blur_level, const RngStream& rng) {
  if (shot_level < 0 || shot_level > 4 || blur_level < 0 || blur_level > 4) {
    throw DomainError("severity levels must lie in [0, 4]");
  }
  if (image.ndim() != 2) throw DomainError("severity_corrupt expects a 2-d image");
  for (float v : image.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DomainError("severity_corrupt expects values in [0, 1]");
  }
  TensorF out = image;
  if (blur_level > 0) {
    out = convolve_replicate(out, motion_blur_kernel(kSeverityBlurLength[blur_level], severity_blur_angle(rng)));
  }
  if (shot_level > 0) {
    const double budget = kSeverityPhotonBudget[shot_level];
    auto noise = derive_stream(rng, "shot", 0);
    for (auto& v : out.values()) v = static_cast<float>(noise.poisson(std::max(0.0, v * budget)) / budget);
  }
  return clamp01(out);
}

namespace detail {

inline TensorF to_display(const TensorF& electrons_per_frame, const SensorConfig& sensor, double frame_dt) {
  const double s = 1.0 / (sensor.eta * frame_dt * sensor.full_scale);
  return apply_gamma(clamp01(scale(electrons_per_frame, static_cast<float>(s))), sensor.gamma);
}

}  // namespace detail

struct CaptureOptions {
  ReadoutMode readout = ReadoutMode::per_frame;
  bool noiseless = false;
};

/// Frame-window burst around the middle frame of `flux`.
///
/// Each image is exposure-normalized (electrons / (eta * dt_eff * full_scale),
/// which for a window average is the same as dividing the per-frame average by
/// eta * frame_dt * full_scale), clamped to [0,1], then gamma-mapped.
inline Burst make_burst(const FluxFrames& flux, const ExposurePlan& plan, const SensorConfig& sensor,
                        const RngStream& rng, CaptureOptions options = {}) {
  plan.validate();
  flux.validate();
  if (plan.mode != ExposurePlan::Mode::frame_window) {
    throw DomainError("a flux sequence source requires a frame_window plan");
  }
  const std::size_t center = flux.count() / 2;
  Burst burst;
  for (std::size_t i = 0; i < plan.windows.size(); ++i) {
    const int w = plan.windows[i];
    TensorF e = simulate_exposure_from_frames(flux, center, w, sensor, derive_stream(rng, "exposure", i),
                                              options.readout, options.noiseless);
    burst.images.push_back(detail::to_display(e, sensor, flux.frame_dt));
    burst.exposures.push_back(w * flux.frame_dt);
  }
  if (plan.include_clean) {
    TensorF e = simulate_exposure_from_frames(flux, center, 1, sensor, rng, options.readout, true);
    burst.clean = detail::to_display(e, sensor, flux.frame_dt);
  }
  return burst;
}

/// Severity burst from a single linear [0,1] image.
inline Burst make_burst(const TensorF& image, const ExposurePlan& plan, const SensorConfig& sensor,
                        const RngStream& rng, CaptureOptions options = {}) {
  plan.validate();
  if (plan.mode != ExposurePlan::Mode::severity) {
    throw DomainError("a single-image source requires a severity plan");
  }
  Burst burst;
  for (std::size_t i = 0; i < plan.levels.size(); ++i) {
    const auto [shot, blur] = plan.levels[i];
    TensorF c = severity_corrupt(image, options.noiseless ? 0 : shot, blur, derive_stream(rng, "exposure", i));
    burst.images.push_back(apply_gamma(c, sensor.gamma));
    burst.exposures.push_back(kSeverityBlurLength[blur] * kSeverityFrameDt);
  }
  if (plan.include_clean) burst.clean = apply_gamma(clamp01(image), sensor.gamma);
  return burst;
}

inline std::string burst_image_name(std::size_t i) { return "img_" + std::to_string(i); }

inline Container burst_to_container(const Burst& burst) {
  burst.validate();
  Container c;
  for (std::size_t i = 0; i < burst.images.size(); ++i) c.emplace(burst_image_name(i), burst.images[i]);
  if (burst.clean) c.emplace("clean", *burst.clean);
  std::vector<float> exp(burst.exposures.begin(), burst.exposures.end());
  const std::size_t n = exp.size();
  c.emplace("exposures", TensorF({n}, std::move(exp)));
  if (burst.label < 0 || burst.label > 255) throw DomainError("burst label must fit in u8");
  c.emplace("label", TensorU8({1}, {static_cast<unsigned char>(burst.label)}));
  return c;
}

inline Burst burst_from_container(const Container& c) {
  Burst burst;
  for (std::size_t i = 0;; ++i) {
    auto it = c.find(burst_image_name(i));
    if (it == c.end()) break;
    burst.images.push_back(as_real<float>(it->second));
  }
  if (auto it = c.find("clean"); it != c.end()) burst.clean = as_real<float>(it->second);
  const auto exp = as_real<double>(c.at("exposures"));
  burst.exposures.assign(exp.values().begin(), exp.values().end());
  auto lit = c.find("label");
  if (lit == c.end()) throw FormatError("burst container lacks a label");
  burst.label = static_cast<int>(std::lround(as_real<double>(lit->second)[0]));
  burst.validate();
  return burst;
}

inline void save_burst(const std::filesystem::path& path, const Burst& burst) {
  save_container(path, burst_to_container(burst));
}

inline Burst load_burst(const std::filesystem::path& path) {
  try {
    return burst_from_container(load_container(path));
  } catch (const std::out_of_range&) {
    throw FormatError(path.string() + ": burst container lacks exposures");
  } catch (const DomainError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace dualburst
