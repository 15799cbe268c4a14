#pragma once

// Photon-counting sensor model. Internal unit is electrons; no quantization
// happens here (see quantize() for export).
//
//   z_p = shot + dark + read
//   shot ~ Poisson(eta * integral(phi dt)),  dark ~ Poisson(sigma_d * dt),  read ~ N(0, sigma_r^2)
//   SNR  = S^2 / (S + sigma_r^2 + sigma_d * dt),  S = eta * integral(phi dt)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dualburst/errors.hpp"
#include "dualburst/rng.hpp"
#include "dualburst/tensor.hpp"

namespace dualburst {

struct SensorConfig {
  double eta = 0.8;          // quantum efficiency, electrons per photon, (0, 1]
  double sigma_r = 2.0;      // read noise std dev, electrons per readout
  double sigma_d = 1.0;      // dark current, electrons per second
  double gamma = 2.2;        // display gamma
  double full_scale = 1000.0;  // value mapped to display 1.0 after exposure normalization
  int bit_depth = 8;         // export quantization, 8 or 16

  void validate() const {
    if (!(eta > 0.0 && eta <= 1.0)) throw ConfigError("eta must be in (0, 1]");
    if (!(sigma_r >= 0.0) || !std::isfinite(sigma_r)) throw ConfigError("sigma_r must be >= 0");
    if (!(sigma_d >= 0.0) || !std::isfinite(sigma_d)) throw ConfigError("sigma_d must be >= 0");
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be > 0");
    if (!(full_scale > 0.0) || !std::isfinite(full_scale)) throw ConfigError("full_scale must be > 0");
    if (bit_depth != 8 && bit_depth != 16) throw ConfigError("bit_depth must be 8 or 16");
  }

  std::string to_string() const {
    std::ostringstream os;
    os.precision(17);
    os << "eta=" << eta << "\nsigma_r=" << sigma_r << "\nsigma_d=" << sigma_d << "\ngamma=" << gamma
       << "\nfull_scale=" << full_scale << "\nbit_depth=" << bit_depth << '\n';
    return os.str();
  }
};

/// Parses `key=value` lines. Blank lines and lines starting with '#' are skipped;
/// keys not given keep their defaults. Unknown keys are an error.
inline SensorConfig parse_sensor_config(std::istream& in) {
  SensorConfig cfg;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string{};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("sensor config line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    double v = 0.0;
    try {
      std::size_t used = 0;
      v = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
    } catch (const std::exception&) {
      throw ConfigError("sensor config line " + std::to_string(lineno) + ": bad number '" + value + "'");
    }
    if (key == "eta") cfg.eta = v;
    else if (key == "sigma_r") cfg.sigma_r = v;
    else if (key == "sigma_d") cfg.sigma_d = v;
    else if (key == "gamma") cfg.gamma = v;
    else if (key == "full_scale") cfg.full_scale = v;
    else if (key == "bit_depth") cfg.bit_depth = static_cast<int>(v);
    else throw ConfigError("sensor config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

inline SensorConfig load_sensor_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open sensor config: " + path.string());
  return parse_sensor_config(in);
}

/// Photon flux sequence (photons/second per pixel), each frame covering frame_dt seconds.
struct FluxFrames {
  std::vector<TensorF> frames;
  double frame_dt = 0.01;

  std::size_t count() const { return frames.size(); }
  const Shape& shape() const { return frames.at(0).shape(); }

  void validate() const {
    if (frames.empty()) throw DomainError("flux sequence has no frames");
    if (!(frame_dt > 0.0)) throw DomainError("frame_dt must be > 0");
    for (const auto& f : frames) {
      if (f.shape() != frames.front().shape()) throw DomainError("flux frames differ in shape");
      for (float v : f.values()) {
        if (!(v >= 0.0f) || !std::isfinite(v)) throw DomainError("flux must be finite and nonnegative");
      }
    }
  }
};

/// Half-open frame range [begin, end).
struct FrameWindow {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const { return end > begin ? end - begin : 0; }
};

inline TensorF sample_shot_noise(const TensorF& expected_electrons, RngStream rng) {
  TensorF out(expected_electrons.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = expected_electrons[i];
    if (!(m >= 0.0) || !std::isfinite(m)) throw DomainError("shot noise mean must be finite and >= 0");
    out[i] = static_cast<float>(rng.poisson(m));
  }
  return out;
}

inline TensorF sample_read_noise(const Shape& shape, double sigma_r, RngStream rng) {
  if (!(sigma_r >= 0.0) || !std::isfinite(sigma_r)) throw DomainError("sigma_r must be >= 0");
  TensorF out(shape);
  if (sigma_r == 0.0) return out;
  for (auto& v : out.values()) v = static_cast<float>(sigma_r * rng.normal());
  return out;
}

inline TensorF sample_dark_current(double sigma_d, double dt, const Shape& shape, RngStream rng) {
  if (!(sigma_d >= 0.0) || !std::isfinite(sigma_d)) throw DomainError("sigma_d must be >= 0");
  if (!(dt > 0.0) || !std::isfinite(dt)) throw DomainError("dt must be > 0");
  TensorF out(shape);
  const double m = sigma_d * dt;
  if (m == 0.0) return out;
  for (auto& v : out.values()) v = static_cast<float>(rng.poisson(m));
  return out;
}

/// One raw reading in electrons: photons integrated over the window, dark
/// current over the window duration, a single read-noise draw.
inline TensorF simulate_raw_capture(const FluxFrames& flux, FrameWindow window, const SensorConfig& sensor,
                                    const RngStream& rng) {
  if (window.length() == 0) throw DomainError("capture window is empty");
  if (window.end > flux.count()) throw DomainError("capture window exceeds the flux sequence");
  const Shape& shape = flux.shape();
  TensorF total(shape);
  for (std::size_t f = window.begin; f < window.end; ++f) {
    TensorF expected = scale(flux.frames[f], static_cast<float>(sensor.eta * flux.frame_dt));
    total += sample_shot_noise(expected, derive_stream(rng, "shot", f));
  }
  const double duration = static_cast<double>(window.length()) * flux.frame_dt;
  total += sample_dark_current(sensor.sigma_d, duration, shape, derive_stream(rng, "dark", 0));
  total += sample_read_noise(shape, sensor.sigma_r, derive_stream(rng, "read", 0));
  return total;
}

/// Signal-to-noise ratio for an expected signal of `signal_electrons` collected over dt seconds.
inline double snr(double signal_electrons, const SensorConfig& sensor, double dt) {
  if (!(signal_electrons >= 0.0)) throw DomainError("signal must be >= 0");
  if (!(dt > 0.0)) throw DomainError("dt must be > 0");
  const double denom = signal_electrons + sensor.sigma_r * sensor.sigma_r + sensor.sigma_d * dt;
  if (denom == 0.0) return 0.0;
  return signal_electrons * signal_electrons / denom;
}

/// Maps [0,1] values to integer codes at the given bit depth (round to nearest).
inline std::vector<std::uint16_t> quantize(const TensorF& image, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw DomainError("bit_depth must be 8 or 16");
  const double max_code = bit_depth == 8 ? 255.0 : 65535.0;
  std::vector<std::uint16_t> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = std::clamp(static_cast<double>(image[i]), 0.0, 1.0);
    out[i] = static_cast<std::uint16_t>(std::lround(v * max_code));
  }
  return out;
}

struct NoiseStatsRow {
  double dt = 0.0;
  double signal = 0.0;  // expected photo-electrons
  double predicted = 0.0;
  double empirical = 0.0;
  double rel_err = 0.0;
};

/// Predicted vs empirical SNR of single-frame captures of a constant flux, one
/// row per exposure time. The empirical signal is the sample mean minus the
/// expected dark-current offset, which is a known bias and not photo-signal.
inline std::vector<NoiseStatsRow> noise_stats(const SensorConfig& sensor, double flux,
                                              const std::vector<double>& dts, std::size_t pixels,
                                              const RngStream& rng) {
  sensor.validate();
  if (!(flux >= 0.0)) throw DomainError("flux must be >= 0");
  if (pixels < 2) throw DomainError("noise_stats needs at least 2 pixels");
  std::vector<NoiseStatsRow> rows;
  for (std::size_t i = 0; i < dts.size(); ++i) {
    const double dt = dts[i];
    if (!(dt > 0.0)) throw DomainError("dt must be > 0");
    FluxFrames f;
    f.frame_dt = dt;
    f.frames.push_back(TensorF({pixels}, static_cast<float>(flux)));
    const TensorF raw = simulate_raw_capture(f, {0, 1}, sensor, derive_stream(rng, "noise_stats", i));
    NoiseStatsRow r;
    r.dt = dt;
    r.signal = flux * sensor.eta * dt;
    r.predicted = snr(r.signal, sensor, dt);
    const double m = mean(raw) - sensor.sigma_d * dt;
    const double v = variance(raw);
    r.empirical = v > 0.0 ? m * m / v : 0.0;
    r.rel_err = r.predicted > 0.0 ? std::abs(r.empirical - r.predicted) / r.predicted : std::abs(r.empirical);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace dualburst
