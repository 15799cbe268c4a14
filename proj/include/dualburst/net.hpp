#pragma once

// Small strided CNN classifier with hand-written reverse mode.
//
//   features = GAP(relu(conv3x3/2(... relu(conv3x3/2(image)))))
//   logits   = W * features + b
//
// Every convolution is 3x3, stride 2, zero padding 1, so an H x W plane maps
// to ((H - 1) / 2 + 1) x ((W - 1) / 2 + 1).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dualburst/container.hpp"
#include "dualburst/errors.hpp"
#include "dualburst/rng.hpp"
#include "dualburst/tensor.hpp"

namespace dualburst {

struct NetConfig {
  std::size_t input_size = 32;
  std::vector<std::size_t> channels{1, 8, 16, 32};
  int num_classes = 4;

  std::size_t feature_dim() const { return channels.back(); }
  std::size_t conv_layers() const { return channels.size() - 1; }

  void validate() const {
    if (channels.size() < 2 || channels.front() != 1) throw ConfigError("channel plan must start at 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (input_size < 1) throw ConfigError("input_size must be >= 1");
  }

  bool operator==(const NetConfig&) const = default;
};

inline constexpr std::size_t kKernel = 3;

inline std::size_t conv_out_size(std::size_t n) { return (n - 1) / 2 + 1; }

template <typename T>
struct Model {
  NetConfig config;
  std::vector<Tensor<T>> conv_w;  // [out, in, 3, 3]
  std::vector<Tensor<T>> conv_b;  // [out]
  Tensor<T> head_w;               // [classes, features]
  Tensor<T> head_b;               // [classes]

  /// All-zero parameters with the shapes implied by `config`.
  static Model zeros(const NetConfig& config) {
    config.validate();
    Model m;
    m.config = config;
    for (std::size_t l = 0; l < config.conv_layers(); ++l) {
      m.conv_w.emplace_back(Shape{config.channels[l + 1], config.channels[l], kKernel, kKernel});
      m.conv_b.emplace_back(Shape{config.channels[l + 1]});
    }
    const auto c = static_cast<std::size_t>(config.num_classes);
    m.head_w = Tensor<T>({c, config.feature_dim()});
    m.head_b = Tensor<T>({c});
    return m;
  }

  Model zeros_like() const { return zeros(config); }

  /// Fan-in scaled uniform weights (He bound sqrt(6 / fan_in) for convolutions,
  /// 1 / sqrt(fan_in) for the head), zero biases.
  static Model init(const NetConfig& config, const RngStream& rng) {
    Model m = zeros(config);
    for (std::size_t l = 0; l < m.conv_w.size(); ++l) {
      const double fan_in = static_cast<double>(config.channels[l] * kKernel * kKernel);
      const double bound = std::sqrt(6.0 / fan_in);
      auto s = derive_stream(rng, "init.conv", l);
      for (auto& v : m.conv_w[l].values()) v = static_cast<T>(s.uniform(-bound, bound));
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(config.feature_dim()));
    auto s = derive_stream(rng, "init.head", 0);
    for (auto& v : m.head_w.values()) v = static_cast<T>(s.uniform(-bound, bound));
    return m;
  }

  /// Parameters in a fixed order: conv0.w, conv0.b, ..., head.w, head.b.
  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (std::size_t l = 0; l < conv_w.size(); ++l) {
      out.push_back(&conv_w[l]);
      out.push_back(&conv_b[l]);
    }
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
  }

  std::vector<const Tensor<T>*> parameters() const {
    std::vector<const Tensor<T>*> out;
    for (auto* p : const_cast<Model*>(this)->parameters()) out.push_back(p);
    return out;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < conv_w.size(); ++l) {
      out.push_back("conv" + std::to_string(l) + ".w");
      out.push_back("conv" + std::to_string(l) + ".b");
    }
    out.push_back("head.w");
    out.push_back("head.b");
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->size();
    return n;
  }

  Model& operator+=(const Model& other) {
    auto mine = parameters();
    auto theirs = other.parameters();
    for (std::size_t i = 0; i < mine.size(); ++i) *mine[i] += *theirs[i];
    return *this;
  }

  Model& operator*=(T s) {
    for (auto* p : parameters()) *p *= s;
    return *this;
  }

  bool operator==(const Model&) const = default;

  template <typename U>
  Model<U> cast_to() const {
    Model<U> m;
    m.config = config;
    for (const auto& w : conv_w) m.conv_w.push_back(cast<U>(w));
    for (const auto& b : conv_b) m.conv_b.push_back(cast<U>(b));
    m.head_w = cast<U>(head_w);
    m.head_b = cast<U>(head_b);
    return m;
  }
};

/// Per-layer post-ReLU outputs and the pooled feature, kept for backward().
template <typename T>
struct Activations {
  Tensor<T> input;                 // [1, H, W]
  std::vector<Tensor<T>> outputs;  // [C_l, H_l, W_l], post-ReLU
  Tensor<T> feature;               // [F]
};

namespace detail {

template <typename T>
Tensor<T> conv3x3s2_forward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t ci = in.dim(0), h = in.dim(1), wd = in.dim(2);
  const std::size_t co = w.dim(0);
  const std::size_t ho = conv_out_size(h), wo = conv_out_size(wd);
  Tensor<T> out({co, ho, wo});
  for (std::size_t o = 0; o < co; ++o) {
    T* op = out.data() + o * ho * wo;
    std::fill(op, op + ho * wo, b[o]);
    for (std::size_t i = 0; i < ci; ++i) {
      const T* ip = in.data() + i * h * wd;
      for (std::size_t ky = 0; ky < kKernel; ++ky) {
        for (std::size_t kx = 0; kx < kKernel; ++kx) {
          const T wv = w[((o * ci + i) * kKernel + ky) * kKernel + kx];
          for (std::size_t y = 0; y < ho; ++y) {
            const long sy = static_cast<long>(2 * y + ky) - 1;
            if (sy < 0 || sy >= static_cast<long>(h)) continue;
            const T* row = ip + static_cast<std::size_t>(sy) * wd;
            T* orow = op + y * wo;
            for (std::size_t x = 0; x < wo; ++x) {
              const long sx = static_cast<long>(2 * x + kx) - 1;
              if (sx < 0 || sx >= static_cast<long>(wd)) continue;
              orow[x] += wv * row[sx];
            }
          }
        }
      }
    }
  }
  return out;
}

// Accumulates dW, db and (optionally) d(input) for one strided conv.
template <typename T>
void conv3x3s2_backward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& dout, Tensor<T>& dw,
                        Tensor<T>& db, Tensor<T>* din) {
  const std::size_t ci = in.dim(0), h = in.dim(1), wd = in.dim(2);
  const std::size_t co = w.dim(0);
  const std::size_t ho = dout.dim(1), wo = dout.dim(2);
  for (std::size_t o = 0; o < co; ++o) {
    const T* gp = dout.data() + o * ho * wo;
    T bsum = T{};
    for (std::size_t k = 0; k < ho * wo; ++k) bsum += gp[k];
    db[o] += bsum;
    for (std::size_t i = 0; i < ci; ++i) {
      const T* ip = in.data() + i * h * wd;
      T* dip = din ? din->data() + i * h * wd : nullptr;
      for (std::size_t ky = 0; ky < kKernel; ++ky) {
        for (std::size_t kx = 0; kx < kKernel; ++kx) {
          const std::size_t widx = ((o * ci + i) * kKernel + ky) * kKernel + kx;
          const T wv = w[widx];
          T acc = T{};
          for (std::size_t y = 0; y < ho; ++y) {
            const long sy = static_cast<long>(2 * y + ky) - 1;
            if (sy < 0 || sy >= static_cast<long>(h)) continue;
            const std::size_t roff = static_cast<std::size_t>(sy) * wd;
            const T* grow = gp + y * wo;
            for (std::size_t x = 0; x < wo; ++x) {
              const long sx = static_cast<long>(2 * x + kx) - 1;
              if (sx < 0 || sx >= static_cast<long>(wd)) continue;
              acc += grow[x] * ip[roff + static_cast<std::size_t>(sx)];
              if (dip) dip[roff + static_cast<std::size_t>(sx)] += wv * grow[x];
            }
          }
          dw[widx] += acc;
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
void require_input(const Model<T>& model, const Tensor<T>& image) {
  const auto n = model.config.input_size;
  if (image.ndim() != 2 || image.dim(0) != n || image.dim(1) != n) {
    throw DomainError("input image shape " + shape_string(image.shape()) + " does not match model input " +
                      std::to_string(n) + "x" + std::to_string(n));
  }
}

/// Feature extractor: conv/ReLU stack then global average pooling.
template <typename T>
Tensor<T> forward_features(const Model<T>& model, const Tensor<T>& image, Activations<T>* cache = nullptr) {
  require_input(model, image);
  Tensor<T> x({1, image.dim(0), image.dim(1)}, image.vector());
  if (cache) {
    cache->input = x;
    cache->outputs.clear();
  }
  for (std::size_t l = 0; l < model.conv_w.size(); ++l) {
    x = detail::conv3x3s2_forward(x, model.conv_w[l], model.conv_b[l]);
    for (auto& v : x.values()) v = v > T{} ? v : T{};
    if (cache) cache->outputs.push_back(x);
  }
  const std::size_t c = x.dim(0);
  const std::size_t plane = x.dim(1) * x.dim(2);
  Tensor<T> feature({c});
  for (std::size_t k = 0; k < c; ++k) {
    T s = T{};
    for (std::size_t p = 0; p < plane; ++p) s += x[k * plane + p];
    feature[k] = s / static_cast<T>(plane);
  }
  if (cache) cache->feature = feature;
  return feature;
}

template <typename T>
Tensor<T> forward_head(const Model<T>& model, const Tensor<T>& feature) {
  const std::size_t f = model.head_w.dim(1);
  const std::size_t c = model.head_w.dim(0);
  if (feature.ndim() != 1 || feature.dim(0) != f) {
    throw DomainError("feature length " + shape_string(feature.shape()) + " does not match head input " +
                      std::to_string(f));
  }
  Tensor<T> logits = model.head_b;
  for (std::size_t k = 0; k < c; ++k) {
    T s = T{};
    for (std::size_t j = 0; j < f; ++j) s += model.head_w(k, j) * feature[j];
    logits[k] += s;
  }
  return logits;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  const T mx = *std::max_element(logits.values().begin(), logits.values().end());
  Tensor<T> p = logits;
  T total = T{};
  for (auto& v : p.values()) {
    v = std::exp(v - mx);
    total += v;
  }
  p *= T{1} / total;
  return p;
}

template <typename T>
struct XentResult {
  T loss;
  Tensor<T> dlogits;
};

/// Cross-entropy with max-subtraction; gradient softmax(logits) - onehot(label).
template <typename T>
XentResult<T> softmax_xent(const Tensor<T>& logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw DomainError("label " + std::to_string(label) + " out of range");
  }
  const T mx = *std::max_element(logits.values().begin(), logits.values().end());
  T total = T{};
  for (auto v : logits.values()) total += std::exp(v - mx);
  const T log_z = mx + std::log(total);
  XentResult<T> r{log_z - logits[static_cast<std::size_t>(label)], Tensor<T>(logits.shape())};
  for (std::size_t k = 0; k < logits.size(); ++k) r.dlogits[k] = std::exp(logits[k] - log_z);
  r.dlogits[static_cast<std::size_t>(label)] -= T{1};
  return r;
}

/// Adds the parameter gradients of one forward pass into `grads`.
///
/// `dfeature` is an upstream gradient on the pooled feature (the consistency
/// term); `dlogits` is the task-loss gradient on the head output. Either may be
/// empty (default-constructed) to mean zero.
template <typename T>
void backward_accumulate(const Model<T>& model, const Activations<T>& acts, const Tensor<T>& dfeature,
                         const Tensor<T>& dlogits, Model<T>& grads) {
  const std::size_t f = model.config.feature_dim();
  const std::size_t c = static_cast<std::size_t>(model.config.num_classes);
  if (acts.outputs.size() != model.conv_w.size() || acts.feature.size() != f) {
    throw DomainError("activations do not match the model");
  }
  if (!dfeature.empty() && dfeature.size() != f) throw DomainError("dfeature length mismatch");
  if (!dlogits.empty() && dlogits.size() != c) throw DomainError("dlogits length mismatch");

  Tensor<T> df({f});
  if (!dfeature.empty()) df += dfeature;
  if (!dlogits.empty()) {
    for (std::size_t k = 0; k < c; ++k) {
      const T g = dlogits[k];
      grads.head_b[k] += g;
      for (std::size_t j = 0; j < f; ++j) {
        grads.head_w(k, j) += g * acts.feature[j];
        df[j] += model.head_w(k, j) * g;
      }
    }
  }

  // Pooling spreads the feature gradient evenly, ReLU masks it.
  const auto& last = acts.outputs.back();
  const std::size_t plane = last.dim(1) * last.dim(2);
  Tensor<T> g(last.shape());
  for (std::size_t k = 0; k < f; ++k) {
    const T v = df[k] / static_cast<T>(plane);
    for (std::size_t p = 0; p < plane; ++p) g[k * plane + p] = last[k * plane + p] > T{} ? v : T{};
  }

  for (std::size_t l = model.conv_w.size(); l-- > 0;) {
    const Tensor<T>& in = l == 0 ? acts.input : acts.outputs[l - 1];
    if (l == 0) {
      detail::conv3x3s2_backward<T>(in, model.conv_w[l], g, grads.conv_w[l], grads.conv_b[l], nullptr);
      break;
    }
    Tensor<T> din(in.shape());
    detail::conv3x3s2_backward<T>(in, model.conv_w[l], g, grads.conv_w[l], grads.conv_b[l], &din);
    for (std::size_t k = 0; k < din.size(); ++k) {
      if (!(in[k] > T{})) din[k] = T{};
    }
    g = std::move(din);
  }
}

template <typename T>
Model<T> backward(const Model<T>& model, const Activations<T>& acts, const Tensor<T>& dfeature,
                  const Tensor<T>& dlogits) {
  Model<T> grads = model.zeros_like();
  backward_accumulate(model, acts, dfeature, dlogits, grads);
  return grads;
}

/// Checkpoint: one entry per parameter plus "meta" = [classes, input_size, channels...] (f64).
template <typename T>
Container model_to_container(const Model<T>& model) {
  Container c;
  const auto names = model.parameter_names();
  const auto params = model.parameters();
  for (std::size_t i = 0; i < names.size(); ++i) c.emplace(names[i], *params[i]);
  std::vector<double> meta{static_cast<double>(model.config.num_classes),
                           static_cast<double>(model.config.input_size)};
  for (auto ch : model.config.channels) meta.push_back(static_cast<double>(ch));
  const std::size_t n = meta.size();
  c.emplace("meta", TensorD({n}, std::move(meta)));
  return c;
}

template <typename T>
Model<T> model_from_container(const Container& c) {
  const auto& meta = get_entry<double>(c, "meta");
  if (meta.size() < 4) throw FormatError("checkpoint meta too short");
  NetConfig cfg;
  cfg.num_classes = static_cast<int>(meta[0]);
  cfg.input_size = static_cast<std::size_t>(meta[1]);
  cfg.channels.clear();
  for (std::size_t i = 2; i < meta.size(); ++i) cfg.channels.push_back(static_cast<std::size_t>(meta[i]));
  Model<T> m = Model<T>::zeros(cfg);
  const auto names = m.parameter_names();
  auto params = m.parameters();
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto it = c.find(names[i]);
    if (it == c.end()) throw FormatError("checkpoint lacks parameter " + names[i]);
    Tensor<T> t = as_real<T>(it->second);
    if (t.shape() != params[i]->shape()) throw FormatError("checkpoint parameter " + names[i] + " has wrong shape");
    *params[i] = std::move(t);
  }
  return m;
}

}  // namespace dualburst
