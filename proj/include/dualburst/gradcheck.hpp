#pragma once

// Central-difference check of the analytic gradient of the full training loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dualburst/net.hpp"
#include "dualburst/rng.hpp"
#include "dualburst/trainer.hpp"

namespace dualburst {

struct GradCheckEntry {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t skipped = 0;  // probes whose +-h step flipped a ReLU
  std::vector<GradCheckEntry> entries;
};

struct GradCheckOptions {
  std::size_t samples = 200;
  double step = 1e-5;
  // Denominator floor: the central difference carries about eps * |loss| / step of
  // rounding noise (~1e-10 here), so gradients below the floor are compared absolutely.
  double rel_floor = 1e-4;
  // Test hook: edits the analytic gradients before comparison.
  std::function<void(Model<double>&)> mutate_analytic;
};

inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

namespace detail {

// Forward-only evaluation of the training loss total, also recording the sign
// pattern of every hidden unit over all images of the sample.
inline double loss_with_pattern(const Model<double>& model, const std::vector<TensorD>& images,
                                const std::optional<TensorD>& clean, int label, const TrainConfig& cfg,
                                std::vector<bool>& pattern) {
  pattern.clear();
  auto features = [&](const TensorD& im) {
    Activations<double> a;
    TensorD f = forward_features(model, im, &a);
    for (const auto& o : a.outputs) {
      for (double v : o.values()) pattern.push_back(v > 0.0);
    }
    return f;
  };
  std::vector<TensorD> feats;
  double total = 0.0;
  for (const auto& im : images) {
    feats.push_back(features(im));
    total += softmax_xent(forward_head(model, feats.back()), label).loss;
  }
  const bool use_clean = clean && (cfg.use_clean_anchor || cfg.include_clean_in_task);
  TensorD clean_feat;
  if (use_clean) {
    clean_feat = features(*clean);
    if (cfg.include_clean_in_task) total += softmax_xent(forward_head(model, clean_feat), label).loss;
  }
  const double fc = consistency_term(feats, cfg.use_clean_anchor ? &clean_feat : nullptr, cfg).loss;
  return total + cfg.lambda_fc * fc;
}

}  // namespace detail

/// Compares analytic and central-difference gradients on randomly drawn
/// parameters. Probes where the +-h evaluations see different ReLU patterns
/// are non-differentiable points for finite differences; they are skipped and
/// replaced by a fresh draw.
inline GradCheckReport grad_check(const Model<double>& model, const std::vector<TensorD>& images,
                                  const std::optional<TensorD>& clean, int label, const TrainConfig& cfg,
                                  const RngStream& rng, const GradCheckOptions& opts = {}) {
  Model<double> grads = batch_loss(model, images, clean, label, cfg).grads;
  if (opts.mutate_analytic) opts.mutate_analytic(grads);

  Model<double> probe = model;
  auto params = probe.parameters();
  const auto names = probe.parameter_names();
  const auto gparams = grads.parameters();
  const std::size_t total = probe.parameter_count();
  auto pick = derive_stream(rng, "gradcheck", 0);

  GradCheckReport report;
  std::vector<bool> up_pattern, down_pattern;
  const std::size_t max_attempts = opts.samples * 20;
  for (std::size_t attempt = 0; report.entries.size() < opts.samples && attempt < max_attempts; ++attempt) {
    std::size_t flat = pick.below(total);
    std::size_t p = 0;
    while (flat >= params[p]->size()) flat -= params[p++]->size();
    double& w = (*params[p])[flat];
    const double saved = w;

    w = saved + opts.step;
    const double up = detail::loss_with_pattern(probe, images, clean, label, cfg, up_pattern);
    w = saved - opts.step;
    const double down = detail::loss_with_pattern(probe, images, clean, label, cfg, down_pattern);
    w = saved;
    if (up_pattern != down_pattern) {
      ++report.skipped;
      continue;
    }
    GradCheckEntry e;
    e.parameter = names[p];
    e.index = flat;
    e.analytic = (*gparams[p])[flat];
    e.numeric = (up - down) / (2.0 * opts.step);
    e.rel_err = relative_error(e.analytic, e.numeric, opts.rel_floor);
    report.max_rel_err = std::max(report.max_rel_err, e.rel_err);
    report.entries.push_back(std::move(e));
  }
  return report;
}

inline GradCheckReport grad_check(const Model<double>& model, const Burst& burst, const TrainConfig& cfg,
                                  const RngStream& rng, const GradCheckOptions& opts = {}) {
  std::vector<TensorD> images;
  for (const auto& im : burst.images) images.push_back(cast<double>(im));
  std::optional<TensorD> clean;
  if (burst.clean) clean = cast<double>(*burst.clean);
  return grad_check(model, images, clean, burst.label, cfg, rng, opts);
}

/// Fresh init plus nonzero biases, so bias gradients are exercised by the check.
inline Model<double> gradcheck_model(const NetConfig& cfg, const RngStream& rng) {
  auto m = Model<double>::init(cfg, rng);
  auto b = derive_stream(rng, "bias", 0);
  for (auto& t : m.conv_b) {
    for (auto& v : t.values()) v = b.uniform(-0.05, 0.1);
  }
  for (auto& v : m.head_b.values()) v = b.uniform(-0.5, 0.5);
  return m;
}

}  // namespace dualburst
