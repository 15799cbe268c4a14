#pragma once

// Multi-exposure training objective and the SGD loop.
//
// Per training sample (one burst x_1..x_N with clean reference x_c, label y):
//
//   loss = sum_i xent(g(phi(x_i)), y) [+ xent(g(phi(x_c)), y)]
//        + lambda_fc * sum_i |phi(x_i) - phi(x_c)|^2          (anchor mode)
//
// Without a clean reference the consistency term is the pairwise form
//   (1 / 2N) * sum_{i,j} |phi(x_i) - phi(x_j)|^2,
// which equals sum_i |phi(x_i) - mean_j phi(x_j)|^2.
// lambda_fc plays the role of the inverse prior variance.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dualburst/burst.hpp"
#include "dualburst/ensemble.hpp"
#include "dualburst/errors.hpp"
#include "dualburst/net.hpp"
#include "dualburst/parallel.hpp"
#include "dualburst/rng.hpp"
#include "dualburst/scene.hpp"
#include "dualburst/tensor.hpp"

namespace dualburst {

struct TrainConfig {
  enum class Schedule { cosine, constant };

  double lambda_fc = 5.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr_base = 0.1;
  double momentum = 0.9;
  Schedule schedule = Schedule::cosine;
  bool use_clean_anchor = true;
  bool include_clean_in_task = true;
  bool stop_clean_grad = false;  // block the consistency gradient into the clean branch
  bool normalize_features = false;  // consistency distance on unit-length features
  double grad_clip = 0.0;          // global L2 norm cap on the batch gradient; 0 disables
  std::size_t lambda_warmup_epochs = 0;  // lambda_fc ramps linearly from 0 over this many epochs
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lambda_fc >= 0.0) || !std::isfinite(lambda_fc)) throw ConfigError("lambda_fc must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr_base >= 0.0) || !std::isfinite(lr_base)) throw ConfigError("lr_base must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (!(grad_clip >= 0.0) || !std::isfinite(grad_clip)) throw ConfigError("grad_clip must be >= 0");
  }

  std::string to_string() const {
    std::ostringstream os;
    os.precision(17);
    os << "lambda_fc=" << lambda_fc << "\nepochs=" << epochs << "\nbatch_size=" << batch_size
       << "\nlr_base=" << lr_base << "\nmomentum=" << momentum
       << "\nschedule=" << (schedule == Schedule::cosine ? "cosine" : "constant")
       << "\nuse_clean_anchor=" << use_clean_anchor << "\ninclude_clean_in_task=" << include_clean_in_task
       << "\nstop_clean_grad=" << stop_clean_grad << "\nnormalize_features=" << normalize_features
       << "\ngrad_clip=" << grad_clip
       << "\nlambda_warmup_epochs=" << lambda_warmup_epochs << "\nseed=" << seed << '\n';
    return os.str();
  }
};

template <typename T>
struct ConsistencyResult {
  T loss{};
  std::vector<Tensor<T>> grads;  // d loss / d features[i]
  Tensor<T> clean_grad;          // anchor mode only
};

namespace detail {

template <typename T>
void require_same_length(const std::vector<Tensor<T>>& features, const Tensor<T>* anchor) {
  for (const auto& f : features) {
    if (f.size() != features.front().size() || (anchor && f.size() != anchor->size())) {
      throw DomainError("feature length mismatch in consistency term");
    }
  }
}

}  // namespace detail

/// sum_i |f_i - c|^2 with gradients 2(f_i - c) and -2 sum_i (f_i - c).
template <typename T>
ConsistencyResult<T> consistency_anchor(const std::vector<Tensor<T>>& features, const Tensor<T>& clean) {
  detail::require_same_length(features, &clean);
  ConsistencyResult<T> r;
  r.clean_grad = Tensor<T>(clean.shape());
  for (const auto& f : features) {
    Tensor<T> d = f;
    d -= clean;
    for (auto v : d.values()) r.loss += v * v;
    d *= T{2};
    r.clean_grad -= d;
    r.grads.push_back(std::move(d));
  }
  return r;
}

/// (1 / 2N) sum over ordered pairs of |f_i - f_j|^2; gradient 2(f_i - mean).
template <typename T>
ConsistencyResult<T> consistency_pairwise(const std::vector<Tensor<T>>& features) {
  if (features.size() < 2) throw DomainError("pairwise consistency needs at least two features");
  detail::require_same_length<T>(features, nullptr);
  const std::size_t n = features.size();
  Tensor<T> centroid(features.front().shape());
  for (const auto& f : features) centroid += f;
  centroid *= T{1} / static_cast<T>(n);
  ConsistencyResult<T> r;
  for (const auto& f : features) {
    Tensor<T> d = f;
    d -= centroid;
    for (auto v : d.values()) r.loss += v * v;
    d *= T{2};
    r.grads.push_back(std::move(d));
  }
  return r;
}

namespace detail {

inline constexpr double kNormEps = 1e-8;

// u = f / sqrt(|f|^2 + eps); smooth at zero.
template <typename T>
Tensor<T> unit_feature(const Tensor<T>& f) {
  T sq = static_cast<T>(kNormEps);
  for (auto v : f.values()) sq += v * v;
  return scale(f, T{1} / std::sqrt(sq));
}

// Pulls a gradient on unit_feature(f) back to f: g/s - f (f.g) / s^3.
template <typename T>
Tensor<T> unit_feature_backward(const Tensor<T>& f, const Tensor<T>& g) {
  T sq = static_cast<T>(kNormEps);
  T dot = T{};
  for (std::size_t k = 0; k < f.size(); ++k) {
    sq += f[k] * f[k];
    dot += f[k] * g[k];
  }
  const T s = std::sqrt(sq);
  Tensor<T> out = scale(g, T{1} / s);
  for (std::size_t k = 0; k < f.size(); ++k) out[k] -= f[k] * dot / (sq * s);
  return out;
}

}  // namespace detail

/// The unweighted consistency term of `cfg` with gradients on the raw features.
/// `clean` may be null in pairwise mode; fewer than two features in pairwise
/// mode yields zero.
template <typename T>
ConsistencyResult<T> consistency_term(const std::vector<Tensor<T>>& feats, const Tensor<T>* clean,
                                      const TrainConfig& cfg) {
  if (cfg.use_clean_anchor && !clean) throw ConfigError("use_clean_anchor requires a clean feature");
  if (!cfg.use_clean_anchor && feats.size() < 2) {
    ConsistencyResult<T> r;
    for (const auto& f : feats) r.grads.emplace_back(f.shape());
    return r;
  }
  std::vector<Tensor<T>> used = feats;
  Tensor<T> used_clean = clean ? *clean : Tensor<T>{};
  if (cfg.normalize_features) {
    for (auto& f : used) f = detail::unit_feature(f);
    if (clean) used_clean = detail::unit_feature(*clean);
  }
  ConsistencyResult<T> r = cfg.use_clean_anchor ? consistency_anchor(used, used_clean) : consistency_pairwise(used);
  if (cfg.normalize_features) {
    for (std::size_t i = 0; i < feats.size(); ++i) r.grads[i] = detail::unit_feature_backward(feats[i], r.grads[i]);
    if (cfg.use_clean_anchor) r.clean_grad = detail::unit_feature_backward(*clean, r.clean_grad);
  }
  return r;
}

template <typename T>
struct LossResult {
  T total{};
  T task{};
  T fc{};  // unweighted consistency value
  Model<T> grads;
};

/// Loss and parameter gradients for one burst.
template <typename T>
LossResult<T> batch_loss(const Model<T>& model, const std::vector<Tensor<T>>& images,
                         const std::optional<Tensor<T>>& clean, int label, const TrainConfig& cfg) {
  if (images.empty()) throw DomainError("burst has no images");
  if (cfg.use_clean_anchor && !clean) throw ConfigError("use_clean_anchor requires a clean image in the burst");
  const std::size_t n = images.size();
  LossResult<T> r;
  r.grads = model.zeros_like();

  std::vector<Activations<T>> acts(n);
  std::vector<Tensor<T>> feats(n);
  for (std::size_t i = 0; i < n; ++i) feats[i] = forward_features(model, images[i], &acts[i]);

  const bool use_clean = clean && (cfg.use_clean_anchor || cfg.include_clean_in_task);
  Activations<T> clean_acts;
  Tensor<T> clean_feat;
  if (use_clean) clean_feat = forward_features(model, *clean, &clean_acts);

  std::vector<Tensor<T>> dfeat(n);
  Tensor<T> clean_dfeat;
  const T lambda = static_cast<T>(cfg.lambda_fc);
  if (!cfg.use_clean_anchor && n < 2 && lambda != T{}) {
    throw DomainError("pairwise consistency needs at least two images");
  }
  {
    auto c = consistency_term(feats, cfg.use_clean_anchor ? &clean_feat : nullptr, cfg);
    r.fc = c.loss;
    if (lambda != T{}) {
      for (std::size_t i = 0; i < n; ++i) dfeat[i] = scale(c.grads[i], lambda);
      if (cfg.use_clean_anchor && !cfg.stop_clean_grad) clean_dfeat = scale(c.clean_grad, lambda);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    auto x = softmax_xent(forward_head(model, feats[i]), label);
    r.task += x.loss;
    backward_accumulate(model, acts[i], dfeat[i], x.dlogits, r.grads);
  }
  if (use_clean) {
    Tensor<T> dlogits;
    if (cfg.include_clean_in_task) {
      auto x = softmax_xent(forward_head(model, clean_feat), label);
      r.task += x.loss;
      dlogits = std::move(x.dlogits);
    }
    if (!dlogits.empty() || !clean_dfeat.empty()) {
      backward_accumulate(model, clean_acts, clean_dfeat, dlogits, r.grads);
    }
  }
  r.total = r.task + lambda * r.fc;
  return r;
}

inline LossResult<float> batch_loss(const Model<float>& model, const Burst& burst, const TrainConfig& cfg) {
  return batch_loss(model, burst.images, burst.clean, burst.label, cfg);
}

inline LossResult<double> batch_loss(const Model<double>& model, const Burst& burst, const TrainConfig& cfg) {
  std::vector<TensorD> images;
  for (const auto& im : burst.images) images.push_back(cast<double>(im));
  std::optional<TensorD> clean;
  if (burst.clean) clean = cast<double>(*burst.clean);
  return batch_loss(model, images, clean, burst.label, cfg);
}

/// v <- momentum * v + g;  p <- p - lr * v
template <typename T>
void sgd_step(Model<T>& params, const Model<T>& grads, Model<T>& velocity, double lr, double momentum) {
  auto p = params.parameters();
  auto g = grads.parameters();
  auto v = velocity.parameters();
  if (p.size() != g.size() || p.size() != v.size()) throw DomainError("sgd_step: parameter lists differ");
  const T m = static_cast<T>(momentum);
  const T step = static_cast<T>(lr);
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k]->shape() != g[k]->shape() || p[k]->shape() != v[k]->shape()) {
      throw DomainError("sgd_step: shape mismatch in parameter " + std::to_string(k));
    }
    for (std::size_t i = 0; i < p[k]->size(); ++i) {
      (*v[k])[i] = m * (*v[k])[i] + (*g[k])[i];
      (*p[k])[i] -= step * (*v[k])[i];
    }
  }
}

inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr_base) {
  if (total_steps == 0) return lr_base;
  if (step > total_steps) throw DomainError("cosine_lr: step beyond schedule");
  return lr_base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double task_loss = 0.0;
  double fc_loss = 0.0;
  double test_top1 = 0.0;
};

inline constexpr const char* kMetricsHeader = "epoch,train_loss,task_loss,fc_loss,test_top1";

inline std::string format_metrics_row(const EpochMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.6f", m.epoch, m.train_loss, m.task_loss, m.fc_loss,
                m.test_top1);
  return buf;
}

/// Loads every burst of a split, tagging failures with the sample path.
inline std::vector<Burst> load_split(const DatasetManifest& manifest, const std::string& split) {
  const auto entries = manifest.split(split);
  std::vector<Burst> out(entries.size());
  parallel_for(entries.size(), [&](std::size_t k) {
    const auto& e = entries[k];
    try {
      out[k] = load_burst(manifest.root / e.path);
    } catch (const std::exception& ex) {
      throw FormatError("sample " + e.path + " (seed " + std::to_string(e.seed) + "): " + ex.what());
    }
    if (out[k].label != e.label) throw FormatError("sample " + e.path + ": label disagrees with manifest");
  });
  return out;
}

struct EvalResult {
  double top1 = 0.0;
  double feature_dispersion = 0.0;
  std::vector<TensorF> probabilities;
};

inline EvalResult evaluate(const Model<float>& model, const std::vector<Burst>& bursts, EvalMode mode) {
  EvalResult r;
  r.probabilities.resize(bursts.size());
  std::vector<double> disp(bursts.size());
  std::vector<int> labels(bursts.size());
  parallel_for(bursts.size(), [&](std::size_t k) {
    r.probabilities[k] = classify(model, bursts[k], mode);
    disp[k] = feature_dispersion(model, bursts[k].images);
    labels[k] = bursts[k].label;
  });
  if (!bursts.empty()) {
    r.top1 = top_k_accuracy(r.probabilities, labels, 1);
    r.feature_dispersion = std::accumulate(disp.begin(), disp.end(), 0.0) / static_cast<double>(disp.size());
  }
  return r;
}

struct FitResult {
  Model<float> model;
  std::vector<EpochMetrics> metrics;
};

/// SGD with momentum over whole bursts. Shuffle order per epoch comes from
/// (cfg.seed, epoch); per-sample gradients are computed in parallel and summed
/// in sample order, so results do not depend on the thread count.
inline FitResult fit(Model<float> model, const std::vector<Burst>& train, const std::vector<Burst>& test,
                     const TrainConfig& cfg, EvalMode test_mode = {},
                     const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.validate();
  FitResult out;
  if (cfg.epochs == 0 || train.empty()) {
    out.model = std::move(model);
    return out;
  }
  const std::size_t batches_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = batches_per_epoch * cfg.epochs;
  Model<float> velocity = model.zeros_like();
  const auto root = RngStream::root(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto shuffle = derive_stream(root, "shuffle", epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    EpochMetrics m;
    m.epoch = epoch + 1;
    TrainConfig step_cfg = cfg;
    if (epoch < cfg.lambda_warmup_epochs) {
      step_cfg.lambda_fc = cfg.lambda_fc * static_cast<double>(epoch + 1) / static_cast<double>(cfg.lambda_warmup_epochs + 1);
    }
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t count = std::min(cfg.batch_size, train.size() - begin);
      std::vector<LossResult<float>> results(count);
      parallel_for(count, [&](std::size_t k) {
        const Burst& burst = train[order[begin + k]];
        try {
          results[k] = batch_loss(model, burst, step_cfg);
        } catch (const DomainError& e) {
          throw DomainError("training sample " + std::to_string(order[begin + k]) + ": " + e.what());
        }
      });
      Model<float> grads = model.zeros_like();
      for (const auto& r : results) {
        grads += r.grads;
        m.train_loss += r.total;
        m.task_loss += r.task;
        m.fc_loss += r.fc;
      }
      grads *= 1.0f / static_cast<float>(count);
      if (cfg.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto* t : grads.parameters()) {
          for (float v : t->values()) sq += static_cast<double>(v) * v;
        }
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) grads *= static_cast<float>(cfg.grad_clip / norm);
      }
      const double lr = cfg.schedule == TrainConfig::Schedule::cosine ? cosine_lr(step, total_steps, cfg.lr_base)
                                                                      : cfg.lr_base;
      sgd_step(model, grads, velocity, lr, cfg.momentum);
      ++step;
    }
    const auto n = static_cast<double>(train.size());
    m.train_loss /= n;
    m.task_loss /= n;
    m.fc_loss /= n;
    if (!test.empty()) m.test_top1 = evaluate(model, test, test_mode).top1;
    out.metrics.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  out.model = std::move(model);
  return out;
}

/// fit() over the train and test splits of an on-disk dataset.
inline FitResult fit(Model<float> model, const DatasetManifest& manifest, const TrainConfig& cfg,
                     EvalMode test_mode = {}, const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  return fit(std::move(model), load_split(manifest, "train"), load_split(manifest, "test"), cfg, test_mode,
             on_epoch);
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& metrics) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write metrics: " + path.string());
  os << kMetricsHeader << '\n';
  for (const auto& m : metrics) os << format_metrics_row(m) << '\n';
}

}  // namespace dualburst
