#pragma once

// Ensemble aggregation over a burst, the Gaussian-smoothed classifier probe,
// FCOS-style detection map decoding and the usual detection metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "dualburst/burst.hpp"
#include "dualburst/container.hpp"
#include "dualburst/errors.hpp"
#include "dualburst/net.hpp"
#include "dualburst/rng.hpp"
#include "dualburst/tensor.hpp"

namespace dualburst {

// ---------------------------------------------------------------------------
// Classification

template <typename T>
Tensor<T> predict_proba(const Model<T>& model, const Tensor<T>& image) {
  return softmax(forward_head(model, forward_features(model, image)));
}

/// Arithmetic mean of the per-image softmax outputs.
template <typename T>
Tensor<T> ensemble_classify(const Model<T>& model, const std::vector<Tensor<T>>& images) {
  if (images.empty()) throw DomainError("ensemble over an empty burst");
  Tensor<T> acc({static_cast<std::size_t>(model.config.num_classes)});
  for (const auto& im : images) acc += predict_proba(model, im);
  acc *= T{1} / static_cast<T>(images.size());
  return acc;
}

inline TensorF ensemble_classify(const Model<float>& model, const Burst& burst) {
  return ensemble_classify(model, burst.images);
}

template <typename T>
std::size_t argmax(const Tensor<T>& v) {
  return static_cast<std::size_t>(std::max_element(v.values().begin(), v.values().end()) - v.values().begin());
}

struct Votes {
  std::size_t prediction = 0;
  std::vector<std::size_t> histogram;
};

/// Majority vote of the head over isotropic Gaussian perturbations of a clean feature.
template <typename T>
Votes smoothed_predict(const Model<T>& model, const Tensor<T>& clean_feature, double epsilon,
                       std::size_t num_samples, const RngStream& rng) {
  if (num_samples < 1) throw DomainError("smoothed_predict needs at least one sample");
  if (!(epsilon >= 0.0)) throw DomainError("epsilon must be >= 0");
  Votes v;
  v.histogram.assign(static_cast<std::size_t>(model.config.num_classes), 0);
  auto s = derive_stream(rng, "smooth", 0);
  Tensor<T> f = clean_feature;
  for (std::size_t n = 0; n < num_samples; ++n) {
    for (std::size_t j = 0; j < f.size(); ++j) {
      f[j] = clean_feature[j] + static_cast<T>(epsilon * s.normal());
    }
    ++v.histogram[argmax(forward_head(model, f))];
  }
  v.prediction = static_cast<std::size_t>(std::max_element(v.histogram.begin(), v.histogram.end()) -
                                          v.histogram.begin());
  return v;
}

/// Fraction of samples whose true label is among the k highest-scoring classes.
/// Ties are resolved toward the lower class index.
template <typename T>
double top_k_accuracy(const std::vector<Tensor<T>>& predictions, const std::vector<int>& labels, std::size_t k) {
  if (predictions.size() != labels.size()) throw DomainError("predictions/labels length mismatch");
  if (predictions.empty()) return 0.0;
  const std::size_t c = predictions.front().size();
  if (k < 1 || k > c) throw DomainError("k must be in [1, num_classes]");
  std::size_t hits = 0;
  for (std::size_t n = 0; n < predictions.size(); ++n) {
    const auto& p = predictions[n];
    const auto y = static_cast<std::size_t>(labels[n]);
    if (!std::isfinite(p[y])) continue;  // a non-finite score never counts as a hit
    std::size_t rank = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (p[j] > p[y] || (p[j] == p[y] && j < y)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

/// Mean over images of the pairwise L2 distance between per-exposure features.
template <typename T>
double feature_dispersion(const Model<T>& model, const std::vector<Tensor<T>>& images) {
  if (images.size() < 2) return 0.0;
  std::vector<Tensor<T>> feats;
  for (const auto& im : images) feats.push_back(forward_features(model, im));
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    for (std::size_t j = i + 1; j < feats.size(); ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < feats[i].size(); ++k) {
        const double d = static_cast<double>(feats[i][k]) - static_cast<double>(feats[j][k]);
        d2 += d * d;
      }
      total += std::sqrt(d2);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

/// Which input an evaluation pass classifies.
struct EvalMode {
  enum class Kind { ensemble, single, clean };
  Kind kind = Kind::ensemble;
  std::size_t index = 0;  // for single

  static EvalMode parse(const std::string& s) {
    if (s == "ensemble") return {};
    if (s == "clean") return {Kind::clean, 0};
    if (s.rfind("single:", 0) == 0) {
      try {
        std::size_t used = 0;
        const auto idx = std::stoul(s.substr(7), &used);
        if (used == s.size() - 7) return {Kind::single, idx};
      } catch (const std::exception&) {
      }
    }
    throw ConfigError("eval mode must be ensemble, clean or single:<i>, got '" + s + "'");
  }

  std::string to_string() const {
    switch (kind) {
      case Kind::ensemble: return "ensemble";
      case Kind::clean: return "clean";
      case Kind::single: return "single:" + std::to_string(index);
    }
    return "";
  }
};

inline TensorF classify(const Model<float>& model, const Burst& burst, EvalMode mode) {
  switch (mode.kind) {
    case EvalMode::Kind::ensemble:
      return ensemble_classify(model, burst.images);
    case EvalMode::Kind::clean:
      if (!burst.clean) throw DomainError("burst has no clean image");
      return predict_proba(model, *burst.clean);
    case EvalMode::Kind::single:
      if (mode.index >= burst.size()) {
        throw DomainError("single:" + std::to_string(mode.index) + " out of range for a burst of " +
                          std::to_string(burst.size()));
      }
      return predict_proba(model, burst.images[mode.index]);
  }
  throw DomainError("unknown eval mode");
}

// ---------------------------------------------------------------------------
// Detection

struct DetectionMaps {
  TensorF cls;  // [H, W, C] scores in [0,1]
  TensorF ctr;  // [H, W] centerness in [0,1]
  TensorF reg;  // [H, W, 4] distances l, t, r, b in pixels
  float stride = 8.0f;

  std::size_t height() const { return ctr.dim(0); }
  std::size_t width() const { return ctr.dim(1); }
  std::size_t classes() const { return cls.dim(2); }

  static DetectionMaps zeros(std::size_t h, std::size_t w, std::size_t c, float stride) {
    return {TensorF({h, w, c}), TensorF({h, w}), TensorF({h, w, 4}), stride};
  }

  void validate() const {
    if (cls.ndim() != 3 || ctr.ndim() != 2 || reg.ndim() != 3 || reg.dim(2) != 4 || cls.dim(0) != ctr.dim(0) ||
        cls.dim(1) != ctr.dim(1) || reg.dim(0) != ctr.dim(0) || reg.dim(1) != ctr.dim(1)) {
      throw DomainError("inconsistent detection map shapes");
    }
    if (!(stride > 0.0f)) throw DomainError("detection stride must be > 0");
    for (float v : reg.values()) {
      if (!(v >= 0.0f)) throw DomainError("box regression distances must be >= 0");
    }
  }
};

struct Box {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  float score = 0;
  int cls = 0;
  bool operator==(const Box&) const = default;
};

/// Elementwise mean of cls, ctr and reg over the list.
inline DetectionMaps aggregate_detection_maps(const std::vector<DetectionMaps>& maps) {
  if (maps.empty()) throw DomainError("no detection maps to aggregate");
  for (const auto& m : maps) m.validate();
  const auto& first = maps.front();
  DetectionMaps out = DetectionMaps::zeros(first.height(), first.width(), first.classes(), first.stride);
  for (const auto& m : maps) {
    if (m.cls.shape() != first.cls.shape() || m.stride != first.stride) {
      throw DomainError("detection maps differ in shape or stride");
    }
    out.cls += m.cls;
    out.ctr += m.ctr;
    out.reg += m.reg;
  }
  const float inv = 1.0f / static_cast<float>(maps.size());
  out.cls *= inv;
  out.ctr *= inv;
  out.reg *= inv;
  return out;
}

/// Every (cell, class) with sqrt(cls * ctr) >= threshold becomes a box around
/// the cell center ((j + 0.5) * stride, (i + 0.5) * stride).
inline std::vector<Box> decode_boxes(const DetectionMaps& maps, float score_threshold) {
  maps.validate();
  std::vector<Box> boxes;
  for (std::size_t i = 0; i < maps.height(); ++i) {
    for (std::size_t j = 0; j < maps.width(); ++j) {
      const float cx = (static_cast<float>(j) + 0.5f) * maps.stride;
      const float cy = (static_cast<float>(i) + 0.5f) * maps.stride;
      for (std::size_t c = 0; c < maps.classes(); ++c) {
        const float score = std::sqrt(maps.cls(i, j, c) * maps.ctr(i, j));
        if (!(score >= score_threshold)) continue;
        Box b{cx - maps.reg(i, j, 0), cy - maps.reg(i, j, 1), cx + maps.reg(i, j, 2), cy + maps.reg(i, j, 3), score,
              static_cast<int>(c)};
        if (b.x2 > b.x1 && b.y2 > b.y1) boxes.push_back(b);
      }
    }
  }
  return boxes;
}

/// Writes a box into the cell containing its center; inverse of decode_boxes
/// for boxes whose center is a cell center.
inline void encode_box(DetectionMaps& maps, const Box& box, float cls_score, float centerness) {
  const float cx = 0.5f * (box.x1 + box.x2);
  const float cy = 0.5f * (box.y1 + box.y2);
  const auto j = static_cast<std::size_t>(std::floor(cx / maps.stride));
  const auto i = static_cast<std::size_t>(std::floor(cy / maps.stride));
  if (i >= maps.height() || j >= maps.width()) throw DomainError("box center lies outside the map");
  const float ccx = (static_cast<float>(j) + 0.5f) * maps.stride;
  const float ccy = (static_cast<float>(i) + 0.5f) * maps.stride;
  maps.cls(i, j, static_cast<std::size_t>(box.cls)) = cls_score;
  maps.ctr(i, j) = centerness;
  maps.reg(i, j, 0) = ccx - box.x1;
  maps.reg(i, j, 1) = ccy - box.y1;
  maps.reg(i, j, 2) = box.x2 - ccx;
  maps.reg(i, j, 3) = box.y2 - ccy;
}

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, static_cast<double>(std::min(a.x2, b.x2)) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, static_cast<double>(std::min(a.y2, b.y2)) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double area_a = static_cast<double>(a.x2 - a.x1) * (a.y2 - a.y1);
  const double area_b = static_cast<double>(b.x2 - b.x1) * (b.y2 - b.y1);
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Strict priority: higher score, then smaller class id, then lexicographically smaller coordinates.
inline bool box_priority(const Box& a, const Box& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.cls, a.x1, a.y1, a.x2, a.y2) < std::tie(b.cls, b.x1, b.y1, b.x2, b.y2);
}

/// Greedy per-class suppression: a box is dropped when it overlaps a kept box
/// of the same class with IoU above the threshold. Output in priority order.
inline std::vector<Box> nms(std::vector<Box> boxes, double iou_threshold) {
  std::stable_sort(boxes.begin(), boxes.end(), box_priority);
  std::vector<Box> kept;
  for (const auto& b : boxes) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Box& k) {
      return k.cls == b.cls && iou(k, b) > iou_threshold;
    });
    if (!suppressed) kept.push_back(b);
  }
  return kept;
}

/// All-point interpolated average precision for one image, greedy matching by
/// descending score, each ground truth matched at most once.
inline double ap_at_iou(std::vector<Box> predictions, const std::vector<Box>& ground_truth, double iou_threshold) {
  if (ground_truth.empty()) return predictions.empty() ? 1.0 : 0.0;
  std::stable_sort(predictions.begin(), predictions.end(), box_priority);
  std::vector<bool> used(ground_truth.size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t n = 0; n < predictions.size(); ++n) {
    const auto& p = predictions[n];
    double best = iou_threshold;
    std::size_t best_g = ground_truth.size();
    for (std::size_t g = 0; g < ground_truth.size(); ++g) {
      if (used[g] || ground_truth[g].cls != p.cls) continue;
      const double o = iou(p, ground_truth[g]);
      if (o >= best) {
        best = o;
        best_g = g;
      }
    }
    if (best_g < ground_truth.size()) {
      used[best_g] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(n + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(ground_truth.size()));
  }
  // Precision envelope from the right, then sum over recall steps.
  for (std::size_t n = precision.size(); n-- > 1;) precision[n - 1] = std::max(precision[n - 1], precision[n]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t n = 0; n < precision.size(); ++n) {
    ap += (recall[n] - prev_recall) * precision[n];
    prev_recall = recall[n];
  }
  return ap;
}

inline Container detection_maps_to_container(const DetectionMaps& m) {
  m.validate();
  return {{"cls", m.cls}, {"ctr", m.ctr}, {"reg", m.reg}, {"stride", TensorF({1}, {m.stride})}};
}

inline DetectionMaps detection_maps_from_container(const Container& c) {
  DetectionMaps m;
  m.cls = get_entry<float>(c, "cls");
  m.ctr = get_entry<float>(c, "ctr");
  m.reg = get_entry<float>(c, "reg");
  m.stride = as_real<float>(c.at("stride"))[0];
  m.validate();
  return m;
}

/// One `x1 y1 x2 y2 score class` line per box.
inline std::string format_boxes(const std::vector<Box>& boxes) {
  std::string out;
  char line[128];
  for (const auto& b : boxes) {
    std::snprintf(line, sizeof(line), "%.6g %.6g %.6g %.6g %.6g %d\n", b.x1, b.y1, b.x2, b.y2, b.score, b.cls);
    out += line;
  }
  return out;
}

/// Four-exposure scene where each exposure carries the shared true object plus
/// one spurious object of its own, scored above the true one.
///
/// True object (class 0): cls 0.9, centerness 0.5 in every map -> combined 0.67.
/// Spurious object (class 0, unique cell per map): cls 0.6, centerness 1.0 -> 0.77.
/// After averaging the spurious cells fall to sqrt(0.15 * 0.25) = 0.19.
struct FalsePositiveScenario {
  std::vector<DetectionMaps> exposures;
  Box truth;
  float threshold = 0.5f;
};

inline FalsePositiveScenario make_false_positive_scenario() {
  FalsePositiveScenario s;
  constexpr std::size_t kSize = 8;
  constexpr float kStride = 8.0f;
  s.truth = Box{20.0f, 20.0f, 44.0f, 44.0f, 1.0f, 0};  // centered on cell (3, 3)
  const std::size_t spurious_cells[4][2] = {{0, 0}, {0, 7}, {7, 0}, {7, 7}};
  for (const auto& cell : spurious_cells) {
    DetectionMaps m = DetectionMaps::zeros(kSize, kSize, 2, kStride);
    encode_box(m, s.truth, 0.9f, 0.5f);
    const float cx = (static_cast<float>(cell[1]) + 0.5f) * kStride;
    const float cy = (static_cast<float>(cell[0]) + 0.5f) * kStride;
    encode_box(m, Box{cx - 4.0f, cy - 4.0f, cx + 4.0f, cy + 4.0f, 1.0f, 0}, 0.6f, 1.0f);
    s.exposures.push_back(std::move(m));
  }
  return s;
}

}  // namespace dualburst
