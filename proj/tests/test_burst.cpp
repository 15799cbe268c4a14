#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "dualburst/burst.hpp"
#include "dualburst/scene.hpp"

namespace db = dualburst;

namespace {

db::SensorConfig quiet_sensor(double sigma_r = 0.0, double sigma_d = 0.0) {
  db::SensorConfig s;
  s.sigma_r = sigma_r;
  s.sigma_d = sigma_d;
  return s;
}

db::FluxFrames uniform_frames(std::size_t side, float phi, std::size_t frames) {
  db::FluxFrames f;
  for (std::size_t i = 0; i < frames; ++i) f.frames.emplace_back(db::Shape{side, side}, phi);
  return f;
}

// A vertical edge moving one pixel right per frame.
db::FluxFrames moving_edge(std::size_t side, std::size_t frames) {
  db::FluxFrames f;
  for (std::size_t i = 0; i < frames; ++i) {
    db::TensorF im({side, side}, 50.0f);
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        if (x < side / 4 + i) im(y, x) = 900.0f;
      }
    }
    f.frames.push_back(im);
  }
  return f;
}

double mean_gradient_magnitude(const db::TensorF& im) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t y = 0; y + 1 < im.dim(0); ++y) {
    for (std::size_t x = 0; x + 1 < im.dim(1); ++x) {
      const double gx = im(y, x + 1) - im(y, x);
      const double gy = im(y + 1, x) - im(y, x);
      acc += std::sqrt(gx * gx + gy * gy);
      ++n;
    }
  }
  return acc / static_cast<double>(n);
}

}  // namespace

TEST(ExposurePlan, Validation) {
  EXPECT_NO_THROW(db::ExposurePlan::frames({1, 3, 5, 7}).validate());
  EXPECT_THROW(db::ExposurePlan::frames({1, 4}).validate(), db::DomainError);
  EXPECT_THROW(db::ExposurePlan::frames({3, 1}).validate(), db::DomainError);
  EXPECT_THROW(db::ExposurePlan::frames({}).validate(), db::DomainError);
  EXPECT_THROW(db::ExposurePlan::severity({{5, 0}}).validate(), db::DomainError);
  EXPECT_THROW(db::ExposurePlan::severity({{0, -1}}).validate(), db::DomainError);
}

TEST(ExposureFromFrames, WindowOneNoiselessIsScaledCenterFrame) {
  auto flux = moving_edge(16, 7);
  flux.frame_dt = 0.02;
  const auto s = quiet_sensor();
  const auto out = db::simulate_exposure_from_frames(flux, 3, 1, s, db::RngStream::root(1),
                                                     db::ReadoutMode::per_frame, true);
  EXPECT_EQ(out, db::scale(flux.frames[3], static_cast<float>(s.eta * flux.frame_dt)));
}

TEST(ExposureFromFrames, PerFrameReadNoiseAveragesDown) {
  for (int k : {3, 5}) {
    const auto flux = uniform_frames(317, 0.0f, 7);
    const auto out = db::simulate_exposure_from_frames(flux, 3, k, quiet_sensor(2.0), db::RngStream::root(2));
    const double expected = 4.0 / k;
    EXPECT_NEAR(db::variance(out), expected, 0.1 * expected) << "window " << k;
  }
}

TEST(ExposureFromFrames, SingleReadoutAddsReadNoiseOnce) {
  const auto flux = uniform_frames(317, 0.0f, 7);
  const auto out = db::simulate_exposure_from_frames(flux, 3, 5, quiet_sensor(2.0), db::RngStream::root(3),
                                                     db::ReadoutMode::single);
  EXPECT_NEAR(db::variance(out), 4.0 / 25.0, 0.1 * 4.0 / 25.0);
}

TEST(ExposureFromFrames, PerFrameEqualsMeanOfIndependentlyCapturedFrames) {
  const auto flux = moving_edge(24, 7);
  const auto s = quiet_sensor(2.0, 10.0);
  const auto rng = db::RngStream::root(4);
  const auto out = db::simulate_exposure_from_frames(flux, 3, 7, s, rng);
  db::TensorF oracle({24, 24});
  for (std::size_t f = 0; f < 7; ++f) {
    oracle += db::simulate_raw_capture(flux, {f, f + 1}, s, db::derive_stream(rng, "frame", f));
  }
  oracle *= 1.0f / 7.0f;
  EXPECT_EQ(out, oracle);
}

TEST(ExposureFromFrames, RejectsBadWindows) {
  const auto flux = uniform_frames(4, 1.0f, 5);
  EXPECT_THROW(db::simulate_exposure_from_frames(flux, 2, 2, quiet_sensor(), db::RngStream::root(0)), db::DomainError);
  EXPECT_THROW(db::simulate_exposure_from_frames(flux, 1, 5, quiet_sensor(), db::RngStream::root(0)), db::DomainError);
  EXPECT_THROW(db::simulate_exposure_from_frames(flux, 4, 3, quiet_sensor(), db::RngStream::root(0)), db::DomainError);
}

TEST(MotionBlurKernel, LengthOneIsIdentity) {
  const auto k = db::motion_blur_kernel(1, 0.7);
  EXPECT_EQ(k.shape(), (db::Shape{1, 1}));
  EXPECT_EQ(k[0], 1.0f);
}

TEST(MotionBlurKernel, HorizontalAndVerticalLines) {
  const auto h = db::motion_blur_kernel(3, 0.0);
  const auto v = db::motion_blur_kernel(3, std::numbers::pi / 2);
  for (std::size_t y = 0; y < 3; ++y) {
    for (std::size_t x = 0; x < 3; ++x) {
      EXPECT_FLOAT_EQ(h(y, x), y == 1 ? 1.0f / 3.0f : 0.0f);
      EXPECT_FLOAT_EQ(v(y, x), x == 1 ? 1.0f / 3.0f : 0.0f);
    }
  }
}

TEST(MotionBlurKernel, SumsToOneAndCoversLengthPixels) {
  auto rng = db::RngStream::root(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int len = 1 + 2 * static_cast<int>(rng.below(9));
    const auto k = db::motion_blur_kernel(len, rng.uniform(0.0, std::numbers::pi));
    EXPECT_NEAR(db::sum(k), 1.0, 1e-6);
    std::size_t nonzero = 0;
    for (float v : k.values()) nonzero += v != 0.0f;
    EXPECT_EQ(nonzero, static_cast<std::size_t>(len));
  }
}

TEST(MotionBlurKernel, RejectsEvenLength) {
  EXPECT_THROW(db::motion_blur_kernel(4, 0.0), db::DomainError);
  EXPECT_THROW(db::motion_blur_kernel(0, 0.0), db::DomainError);
}

TEST(SeverityCorrupt, ZeroLevelsIsIdentity) {
  auto rng = db::RngStream::root(6);
  db::TensorF im({20, 20});
  for (auto& v : im.values()) v = static_cast<float>(rng.uniform());
  EXPECT_EQ(db::severity_corrupt(im, 0, 0, rng), im);
}

TEST(SeverityCorrupt, ShotLevelFourVariance) {
  const auto out = db::severity_corrupt(db::TensorF({317, 317}, 0.5f), 4, 0, db::RngStream::root(7));
  EXPECT_NEAR(db::mean(out), 0.5, 0.01);
  EXPECT_NEAR(db::variance(out), 0.5 / 12.0, 0.1 * 0.5 / 12.0);
}

TEST(SeverityCorrupt, ImpulseReproducesLevelOneKernel) {
  const auto rng = db::RngStream::root(8);
  db::TensorF im({21, 21});
  im(10, 10) = 1.0f;
  const auto out = db::severity_corrupt(im, 0, 1, rng);
  const auto k = db::motion_blur_kernel(5, db::severity_blur_angle(rng));
  double outside = 0.0;
  for (std::size_t y = 0; y < 21; ++y) {
    for (std::size_t x = 0; x < 21; ++x) {
      const bool in = y >= 8 && y <= 12 && x >= 8 && x <= 12;
      if (in) {
        EXPECT_NEAR(out(y, x), k(y - 8, x - 8), 1e-6);
      } else {
        outside += out(y, x);
      }
    }
  }
  EXPECT_EQ(outside, 0.0);
}

TEST(SeverityCorrupt, VarianceGrowsWithShotLevel) {
  for (int blur : {0, 2}) {
    double prev = -1.0;
    for (int s = 0; s <= 4; ++s) {
      const double v = db::variance(db::severity_corrupt(db::TensorF({200, 200}, 0.5f), s, blur, db::RngStream::root(9)));
      EXPECT_GT(v, prev) << "shot " << s << " blur " << blur;
      prev = v;
    }
  }
}

TEST(SeverityCorrupt, RejectsOutOfRange) {
  const db::TensorF im({4, 4}, 0.5f);
  EXPECT_THROW(db::severity_corrupt(im, 5, 0, db::RngStream::root(0)), db::DomainError);
  EXPECT_THROW(db::severity_corrupt(im, 0, -1, db::RngStream::root(0)), db::DomainError);
  EXPECT_THROW(db::severity_corrupt(db::TensorF({4, 4}, 1.5f), 1, 1, db::RngStream::root(0)), db::DomainError);
}

TEST(Gamma, Examples) {
  const db::TensorF im({3}, {0.0f, 0.25f, 1.0f});
  const auto g = db::apply_gamma(im, 2.2);
  EXPECT_EQ(g[0], 0.0f);
  EXPECT_NEAR(g[1], 0.5326, 1e-4);
  EXPECT_EQ(g[2], 1.0f);
  EXPECT_EQ(db::apply_gamma(im, 1.0), im);
}

TEST(MakeBurst, SingleNoiselessWindowMatchesClean) {
  const auto scene = db::generate_scene(db::SceneSpec{}, 3);
  const auto b = db::make_burst(scene.flux, db::ExposurePlan::frames({1}), db::SensorConfig{}, db::RngStream::root(1),
                                {db::ReadoutMode::per_frame, true});
  ASSERT_EQ(b.size(), 1u);
  ASSERT_TRUE(b.clean.has_value());
  EXPECT_EQ(b.images[0], *b.clean);
}

TEST(MakeBurst, NormalizationEqualizesBrightnessOnStaticScene) {
  db::SensorConfig s;
  s.full_scale = 2000.0;
  auto flux = uniform_frames(317, 1000.0f, 8);
  const auto b = db::make_burst(flux, db::ExposurePlan::frames({1, 3, 5, 7}), s, db::RngStream::root(2));
  const double ref = db::mean(*b.clean);
  for (const auto& im : b.images) EXPECT_NEAR(db::mean(im), ref, 0.05 * ref);
}

TEST(MakeBurst, NoiseFallsAndSharpnessFallsWithWindow) {
  db::SceneSpec spec;
  spec.speed_min = 2.0;
  const auto scene = db::generate_scene(spec, 11);
  const auto plan = db::ExposurePlan::frames({1, 3, 5, 7});
  const db::SensorConfig sensor;

  // Per-pixel variance across 200 independent captures.
  const std::size_t reps = 200;
  std::vector<db::TensorD> sum(4, db::TensorD({32, 32})), sum2(4, db::TensorD({32, 32}));
  for (std::size_t r = 0; r < reps; ++r) {
    const auto b = db::make_burst(scene.flux, plan, sensor, db::derive_stream(db::RngStream::root(3), "rep", r));
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t p = 0; p < b.images[i].size(); ++p) {
        sum[i][p] += b.images[i][p];
        sum2[i][p] += static_cast<double>(b.images[i][p]) * b.images[i][p];
      }
    }
  }
  double prev_var = 1e9;
  for (std::size_t i = 0; i < 4; ++i) {
    double v = 0.0;
    for (std::size_t p = 0; p < sum[i].size(); ++p) {
      const double m = sum[i][p] / reps;
      v += sum2[i][p] / reps - m * m;
    }
    v /= static_cast<double>(sum[i].size());
    EXPECT_LE(v, prev_var) << "window index " << i;
    prev_var = v;
  }

  const auto clean = db::make_burst(scene.flux, plan, sensor, db::RngStream::root(4), {db::ReadoutMode::per_frame, true});
  // Gradient magnitude is convex, so averaging frames cannot raise it in the linear domain.
  double prev_sharp = 1e9;
  for (const auto& im : clean.images) {
    const double g = mean_gradient_magnitude(db::apply_gamma(im, 1.0 / sensor.gamma));
    EXPECT_LE(g, prev_sharp);
    prev_sharp = g;
  }
}

TEST(MakeBurst, ReproducibleBoundedAndCleanIsNoiseFree) {
  const auto scene = db::generate_scene(db::SceneSpec{}, 5);
  const auto plan = db::ExposurePlan::frames({1, 3, 5, 7});
  const auto a = db::make_burst(scene.flux, plan, db::SensorConfig{}, db::RngStream::root(5));
  const auto b = db::make_burst(scene.flux, plan, db::SensorConfig{}, db::RngStream::root(5));
  const auto c = db::make_burst(scene.flux, plan, db::SensorConfig{}, db::RngStream::root(6));
  EXPECT_EQ(db::encode_container(db::burst_to_container(a)), db::encode_container(db::burst_to_container(b)));
  EXPECT_EQ(*a.clean, *c.clean);
  EXPECT_NE(a.images[0], c.images[0]);
  for (const auto& im : a.images) {
    for (float v : im.values()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
  EXPECT_EQ(a.exposures, (std::vector<double>{0.01, 0.03, 0.05, 0.07}));
}

TEST(MakeBurst, SeverityLadder) {
  db::TensorF im({32, 32}, 0.2f);
  for (std::size_t y = 8; y < 24; ++y) {
    for (std::size_t x = 8; x < 24; ++x) im(y, x) = 0.8f;
  }
  const auto plan = db::ExposurePlan::severity(db::default_severity_ladder());
  const auto b = db::make_burst(im, plan, db::SensorConfig{}, db::RngStream::root(7));
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(*b.clean, db::apply_gamma(im, 2.2));
  for (std::size_t i = 1; i < 4; ++i) EXPECT_GT(b.exposures[i], b.exposures[i - 1]);
}

TEST(MakeBurst, SourceMustMatchPlanMode) {
  const auto flux = uniform_frames(8, 100.0f, 8);
  EXPECT_THROW(db::make_burst(flux, db::ExposurePlan::severity({{1, 1}}), db::SensorConfig{}, db::RngStream::root(0)),
               db::DomainError);
  EXPECT_THROW(db::make_burst(db::TensorF({8, 8}, 0.5f), db::ExposurePlan::frames({1}), db::SensorConfig{},
                              db::RngStream::root(0)),
               db::DomainError);
}

TEST(BurstContainer, RoundTripAndErrors) {
  const auto scene = db::generate_scene(db::SceneSpec{}, 9);
  auto b = db::make_burst(scene.flux, db::ExposurePlan::frames({1, 3}), db::SensorConfig{}, db::RngStream::root(8));
  b.label = 3;
  const auto dir = std::filesystem::temp_directory_path() / "dualburst_tests";
  std::filesystem::create_directories(dir);
  db::save_burst(dir / "burst.dbt", b);
  const auto back = db::load_burst(dir / "burst.dbt");
  EXPECT_EQ(back.images, b.images);
  EXPECT_EQ(*back.clean, *b.clean);
  EXPECT_EQ(back.label, 3);
  ASSERT_EQ(back.exposures.size(), 2u);
  EXPECT_FLOAT_EQ(static_cast<float>(back.exposures[1]), 0.03f);

  auto c = db::burst_to_container(b);
  c.erase("label");
  db::save_container(dir / "nolabel.dbt", c);
  EXPECT_THROW(db::load_burst(dir / "nolabel.dbt"), db::FormatError);
}
