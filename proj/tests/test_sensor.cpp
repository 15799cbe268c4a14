#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "dualburst/sensor.hpp"

namespace db = dualburst;

namespace {

constexpr std::size_t kSide = 317;  // 317^2 = 100489 >= 1e5 pixels

db::FluxFrames constant_flux(float phi, std::size_t frames, double frame_dt) {
  db::FluxFrames f;
  f.frame_dt = frame_dt;
  for (std::size_t i = 0; i < frames; ++i) f.frames.emplace_back(db::Shape{kSide, kSide}, phi);
  return f;
}

db::SensorConfig sensor(double eta, double sigma_r, double sigma_d) {
  db::SensorConfig s;
  s.eta = eta;
  s.sigma_r = sigma_r;
  s.sigma_d = sigma_d;
  return s;
}

}  // namespace

TEST(ShotNoise, ZeroMeanGivesZeros) {
  const auto out = db::sample_shot_noise(db::TensorF({50, 50}, 0.0f), db::RngStream::root(1));
  EXPECT_EQ(db::sum(out), 0.0);
}

TEST(ShotNoise, LargeMeanMoments) {
  const auto out = db::sample_shot_noise(db::TensorF({kSide, kSide}, 1000.0f), db::RngStream::root(2));
  EXPECT_GE(db::mean(out), 990.0);
  EXPECT_LE(db::mean(out), 1010.0);
  EXPECT_GE(db::variance(out), 950.0);
  EXPECT_LE(db::variance(out), 1050.0);
}

TEST(ShotNoise, SmallMeanMomentsUseExactSampler) {
  const auto out = db::sample_shot_noise(db::TensorF({kSide, kSide}, 3.5f), db::RngStream::root(3));
  EXPECT_NEAR(db::mean(out), 3.5, 0.03);
  EXPECT_NEAR(db::variance(out), 3.5, 0.1);
  for (float v : out.values()) ASSERT_EQ(v, std::round(v));
}

TEST(ShotNoise, DeterministicUnderSeed) {
  const db::TensorF mean({40, 40}, 12.0f);
  EXPECT_EQ(db::sample_shot_noise(mean, db::RngStream::root(4)), db::sample_shot_noise(mean, db::RngStream::root(4)));
}

TEST(ShotNoise, RejectsNegativeOrNonFinite) {
  EXPECT_THROW(db::sample_shot_noise(db::TensorF({2}, -1.0f), db::RngStream::root(0)), db::DomainError);
  EXPECT_THROW(db::sample_shot_noise(db::TensorF({2}, std::numeric_limits<float>::quiet_NaN()), db::RngStream::root(0)),
               db::DomainError);
  EXPECT_THROW(db::sample_shot_noise(db::TensorF({2}, std::numeric_limits<float>::infinity()), db::RngStream::root(0)),
               db::DomainError);
}

TEST(ReadNoise, ZeroSigmaGivesZeros) {
  EXPECT_EQ(db::sum(db::sample_read_noise({30, 30}, 0.0, db::RngStream::root(5))), 0.0);
}

TEST(ReadNoise, StandardDeviation) {
  const auto out = db::sample_read_noise({kSide, kSide}, 2.0, db::RngStream::root(6));
  const double sd = std::sqrt(db::variance(out));
  EXPECT_GE(sd, 1.98);
  EXPECT_LE(sd, 2.02);
  EXPECT_NEAR(db::mean(out), 0.0, 0.02);
}

TEST(ReadNoise, DeterministicAndValidated) {
  EXPECT_EQ(db::sample_read_noise({20, 20}, 1.5, db::RngStream::root(7)),
            db::sample_read_noise({20, 20}, 1.5, db::RngStream::root(7)));
  EXPECT_THROW(db::sample_read_noise({2, 2}, -0.1, db::RngStream::root(7)), db::DomainError);
}

TEST(DarkCurrent, ZeroRateGivesZeros) {
  EXPECT_EQ(db::sum(db::sample_dark_current(0.0, 1.0, {30, 30}, db::RngStream::root(8))), 0.0);
}

TEST(DarkCurrent, MeanMatchesRateTimesDuration) {
  const auto out = db::sample_dark_current(50.0, 0.1, {kSide, kSide}, db::RngStream::root(9));
  EXPECT_NEAR(db::mean(out), 5.0, 0.07);
}

TEST(DarkCurrent, DoublingDurationDoublesMean) {
  const double m1 = db::mean(db::sample_dark_current(50.0, 0.1, {kSide, kSide}, db::RngStream::root(10)));
  const double m2 = db::mean(db::sample_dark_current(50.0, 0.2, {kSide, kSide}, db::RngStream::root(11)));
  EXPECT_NEAR(m2 / m1, 2.0, 0.04);
}

TEST(DarkCurrent, RejectsInvalidParameters) {
  EXPECT_THROW(db::sample_dark_current(-1.0, 0.1, {2, 2}, db::RngStream::root(0)), db::DomainError);
  EXPECT_THROW(db::sample_dark_current(1.0, 0.0, {2, 2}, db::RngStream::root(0)), db::DomainError);
}

TEST(RawCapture, ZeroFluxNoNoiseIsZero) {
  const auto out = db::simulate_raw_capture(constant_flux(0.0f, 2, 0.01), {0, 2}, sensor(0.8, 0.0, 0.0),
                                            db::RngStream::root(12));
  EXPECT_EQ(db::sum(out), 0.0);
}

TEST(RawCapture, MeanAndVarianceDecompose) {
  // shot mean 1000 * 0.8 * 0.01 = 8, dark 10 * 0.01 = 0.1, read variance 4.
  const auto out = db::simulate_raw_capture(constant_flux(1000.0f, 1, 0.01), {0, 1}, sensor(0.8, 2.0, 10.0),
                                            db::RngStream::root(13));
  EXPECT_NEAR(db::mean(out), 8.1, 8.1 * 0.05);
  EXPECT_NEAR(db::variance(out), 12.1, 12.1 * 0.05);
}

TEST(RawCapture, MeanScalesWithWindow) {
  const auto flux = constant_flux(1000.0f, 4, 0.01);
  const auto s = sensor(0.8, 2.0, 10.0);
  const double m1 = db::mean(db::simulate_raw_capture(flux, {0, 1}, s, db::RngStream::root(14)));
  const double m4 = db::mean(db::simulate_raw_capture(flux, {0, 4}, s, db::RngStream::root(15)));
  EXPECT_NEAR(m4 / m1, 4.0, 4.0 * 0.02);
}

TEST(RawCapture, RejectsEmptyOrOversizedWindow) {
  const auto flux = constant_flux(10.0f, 2, 0.01);
  EXPECT_THROW(db::simulate_raw_capture(flux, {1, 1}, sensor(0.8, 1, 1), db::RngStream::root(0)), db::DomainError);
  EXPECT_THROW(db::simulate_raw_capture(flux, {0, 3}, sensor(0.8, 1, 1), db::RngStream::root(0)), db::DomainError);
}

TEST(Snr, ZeroSignal) { EXPECT_EQ(db::snr(0.0, sensor(0.8, 2.0, 10.0), 0.01), 0.0); }

TEST(Snr, AllTermsZeroIsZeroByConvention) { EXPECT_EQ(db::snr(0.0, sensor(0.8, 0.0, 0.0), 0.01), 0.0); }

TEST(Snr, WorkedExample) {
  // 10^2 / (10 + 4 + 0.1)
  EXPECT_NEAR(db::snr(10.0, sensor(0.8, 2.0, 10.0), 0.01), 100.0 / 14.1, 1e-12);
  EXPECT_NEAR(db::snr(10.0, sensor(0.8, 2.0, 10.0), 0.01), 7.0922, 1e-4);
}

TEST(Snr, MonotoneInExposureForConstantFlux) {
  const auto s = sensor(0.6, 3.0, 20.0);
  const double phi = 400.0;
  double prev = 0.0;
  for (int k = 0; k < 10; ++k) {
    const double dt = 0.002 * std::pow(1.5, k);
    const double v = db::snr(phi * s.eta * dt, s, dt);
    EXPECT_GT(v, prev);
    EXPECT_LT(db::snr(phi * s.eta * dt, s, dt), db::snr(phi * s.eta * 2 * dt, s, 2 * dt));
    prev = v;
  }
}

TEST(Snr, EmpiricalVarianceMatchesDenominatorAcrossSettings) {
  struct Case {
    double eta, sigma_r, sigma_d, phi, dt;
  };
  for (const auto& c : {Case{0.8, 2.0, 10.0, 1000.0, 0.01}, Case{0.5, 1.0, 50.0, 3000.0, 0.02},
                        Case{0.9, 4.0, 5.0, 200.0, 0.05}}) {
    const auto s = sensor(c.eta, c.sigma_r, c.sigma_d);
    const auto out = db::simulate_raw_capture(constant_flux(static_cast<float>(c.phi), 1, c.dt), {0, 1}, s,
                                              db::RngStream::root(16));
    const double signal = c.phi * c.eta * c.dt;
    const double expected = signal + c.sigma_r * c.sigma_r + c.sigma_d * c.dt;
    EXPECT_NEAR(db::variance(out), expected, 0.05 * expected);
    const double empirical_snr = std::pow(db::mean(out) - c.sigma_d * c.dt, 2) / db::variance(out);
    EXPECT_NEAR(empirical_snr, db::snr(signal, s, c.dt), 0.05 * db::snr(signal, s, c.dt));
  }
}

TEST(SensorConfig, ParsesKeyValueFile) {
  std::istringstream in("# sensor\neta = 0.5\nsigma_r=1.5\n\nsigma_d=3\ngamma=2.0\nfull_scale=250\nbit_depth=16\n");
  const auto cfg = db::parse_sensor_config(in);
  EXPECT_EQ(cfg.eta, 0.5);
  EXPECT_EQ(cfg.sigma_r, 1.5);
  EXPECT_EQ(cfg.sigma_d, 3.0);
  EXPECT_EQ(cfg.gamma, 2.0);
  EXPECT_EQ(cfg.full_scale, 250.0);
  EXPECT_EQ(cfg.bit_depth, 16);
}

TEST(SensorConfig, DefaultsGammaTo22) {
  std::istringstream in("eta=0.9\n");
  EXPECT_EQ(db::parse_sensor_config(in).gamma, 2.2);
}

TEST(SensorConfig, RejectsBadInput) {
  for (const char* text : {"etta=0.5\n", "eta=abc\n", "eta 0.5\n", "eta=1.5\n", "bit_depth=12\n", "sigma_r=-1\n"}) {
    std::istringstream in(text);
    EXPECT_THROW(db::parse_sensor_config(in), db::ConfigError) << text;
  }
}

TEST(Quantize, RoundsAndClamps) {
  const db::TensorF im({4}, {-0.2f, 0.0f, 0.5f, 1.3f});
  EXPECT_EQ(db::quantize(im, 8), (std::vector<std::uint16_t>{0, 0, 128, 255}));
  EXPECT_EQ(db::quantize(im, 16), (std::vector<std::uint16_t>{0, 0, 32768, 65535}));
}

TEST(NoiseStats, PredictedMatchesEmpiricalAndRisesWithExposure) {
  const auto rows = db::noise_stats(db::SensorConfig{}, 1000.0, {0.01, 0.02, 0.04, 0.08}, 100000,
                                    db::RngStream::root(30));
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_LT(rows[i].rel_err, 0.05) << rows[i].dt;
    if (i > 0) EXPECT_GT(rows[i].empirical, rows[i - 1].empirical);
  }
  EXPECT_NEAR(rows[0].signal, 8.0, 1e-12);
  EXPECT_THROW(db::noise_stats(db::SensorConfig{}, 1000.0, {0.0}, 100, db::RngStream::root(0)), db::DomainError);
}
