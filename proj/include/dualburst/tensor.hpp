#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dualburst/errors.hpp"

namespace dualburst {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major n-d array. The last dimension is contiguous.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    check_dims();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(shape_)) {
      throw DomainError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& vector() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // 2-d and 3-d accessors; no bounds checks beyond the debug assertions of std::vector.
  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept {
    return data_[i * shape_[1] + j];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(*this, other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor& operator-=(const Tensor& other) {
    require_same_shape(*this, other, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }

  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  bool operator==(const Tensor& other) const = default;

  static void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape_ != b.shape_) {
      throw DomainError(std::string("shape mismatch in ") + what + ": " + shape_string(a.shape_) +
                        " vs " + shape_string(b.shape_));
    }
  }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw DomainError("tensor dimensions must be positive: " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TensorU8 = Tensor<unsigned char>;

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  out += b;
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T>::require_same_shape(a, b, "mul");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = a;
  out *= s;
  return out;
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F&& f) {
  Tensor<T> out = a;
  for (auto& v : out.values()) v = f(v);
  return out;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a) {
  std::vector<To> data(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) data[i] = static_cast<To>(a[i]);
  return Tensor<To>(a.shape(), std::move(data));
}

template <typename T>
double sum(const Tensor<T>& a) {
  double s = 0.0;
  for (auto v : a.values()) s += static_cast<double>(v);
  return s;
}

template <typename T>
double mean(const Tensor<T>& a) {
  return a.empty() ? 0.0 : sum(a) / static_cast<double>(a.size());
}

// Population variance, two-pass.
template <typename T>
double variance(const Tensor<T>& a) {
  if (a.empty()) return 0.0;
  const double m = mean(a);
  double s = 0.0;
  for (auto v : a.values()) {
    const double d = static_cast<double>(v) - m;
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

template <typename T>
bool all_finite(const Tensor<T>& a) {
  return std::all_of(a.values().begin(), a.values().end(),
                     [](T v) { return std::isfinite(static_cast<double>(v)); });
}

}  // namespace dualburst
