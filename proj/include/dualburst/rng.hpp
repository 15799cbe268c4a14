#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace dualburst {

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

// Stafford variant 13 finalizer (the SplitMix64 output function).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

/// Counter-based splittable generator.
///
/// Output n of a stream is mix64(key + n * golden) where the key is a hash of
/// (seed, stream_id). The sequence depends only on those two integers, so it is
/// identical on every platform. Child streams are obtained with derive_stream();
/// a stream must not be shared between threads, derive one per work item instead.
///
/// Gaussian and Poisson draws are built from the uniform stream with explicit
/// formulas rather than <random> distributions, whose algorithms are
/// implementation-defined.
class RngStream {
 public:
  constexpr RngStream() noexcept : RngStream(0, 0) {}
  constexpr RngStream(std::uint64_t seed, std::uint64_t stream_id) noexcept
      : seed_(seed), stream_id_(stream_id), key_(detail::mix64(seed ^ detail::mix64(stream_id + detail::kGolden))) {}

  static constexpr RngStream root(std::uint64_t seed) noexcept { return RngStream(seed, 0); }

  constexpr std::uint64_t seed() const noexcept { return seed_; }
  constexpr std::uint64_t stream_id() const noexcept { return stream_id_; }
  constexpr std::uint64_t position() const noexcept { return counter_; }

  constexpr std::uint64_t next_u64() noexcept {
    ++counter_;
    return detail::mix64(key_ + counter_ * detail::kGolden);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1]; safe as a log argument.
  double uniform_pos() noexcept { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), Lemire multiply-shift (bias below 2^-64 * n).
  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform_pos()));
    const double theta = 2.0 * std::numbers::pi * uniform();
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  /// Poisson draw. Knuth multiplication below kPoissonGaussianThreshold,
  /// rounded Gaussian clamped at zero above it.
  double poisson(double mean) noexcept {
    if (mean <= 0.0) return 0.0;
    if (mean < kPoissonGaussianThreshold) {
      const double limit = std::exp(-mean);
      double k = 0.0;
      double p = uniform_pos();
      while (p > limit) {
        k += 1.0;
        p *= uniform_pos();
      }
      return k;
    }
    const double v = std::round(mean + std::sqrt(mean) * normal());
    return v < 0.0 ? 0.0 : v;
  }

  static constexpr double kPoissonGaussianThreshold = 30.0;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Child stream for (label, index). The parent is not advanced, so the order in
/// which children are derived does not matter.
inline RngStream derive_stream(const RngStream& parent, std::string_view label, std::uint64_t index) {
  using detail::mix64;
  const std::uint64_t h = mix64(detail::fnv1a64(label) ^ detail::kGolden);
  const std::uint64_t id = mix64(parent.stream_id() ^ mix64(h + mix64(index ^ 0xD1B54A32D192ED03ULL)));
  return RngStream(parent.seed(), id);
}

}  // namespace dualburst
