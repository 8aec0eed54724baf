/*
 * Copyright 2026 The elan-sr Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace elan {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NCHW extent of a rank-4 tensor. Batched matrices use (B, 1, rows, cols).
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t size() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
           std::to_string(w) + ")";
  }
};

/// Dense row-major NCHW tensor with an optional gradient buffer of identical shape.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }
  Tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
      : Tensor(Shape{n, c, h, w}, fill) {}

  const Shape& shape() const { return shape_; }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index(n, c, h, w)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  /// Pointer to the start of plane (n, c).
  T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  bool has_grad() const { return !grad_.empty(); }
  /// Allocates a zeroed gradient buffer if none exists.
  std::span<T> grad() {
    if (grad_.empty()) grad_.assign(data_.size(), T(0));
    return grad_;
  }
  std::span<const T> grad() const { return grad_; }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T(0)); }
  void clear_grad() {
    grad_.clear();
    grad_.shrink_to_fit();
  }
  /// Returns the gradient as a tensor (zeros if absent).
  Tensor grad_tensor() const {
    Tensor g(shape_);
    if (!grad_.empty()) std::copy(grad_.begin(), grad_.end(), g.data_.begin());
    return g;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void reshape(Shape s) {
    if (s.size() != shape_.size()) {
      throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    }
    shape_ = s;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data().begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
  std::vector<T> grad_;
};

template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

/// max |a - b| / max(max |b|, floor). Shapes must agree.
template <class T>
double max_relative_error(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-12) {
  if (a.shape() != b.shape()) {
    throw ShapeError("comparing tensors of shapes " + a.shape().str() + " and " + b.shape().str());
  }
  double diff = 0.0;
  double scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(double(a[i]) - double(b[i])));
    scale = std::max(scale, std::abs(double(b[i])));
  }
  return diff / scale;
}

template <class T>
double max_abs_difference(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("comparing tensors of shapes " + a.shape().str() + " and " + b.shape().str());
  }
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(double(a[i]) - double(b[i])));
  return diff;
}

template <class T, class Rng>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

template <class T, class Rng>
Tensor<T> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(s);
  fill_uniform(t, rng, lo, hi);
  return t;
}

/// Weights and bias of a square-kernel convolution. Stride is always 1.
template <class T>
struct ConvParams {
  Tensor<T> weight;  // (out, in, k, k)
  Tensor<T> bias;    // (1, out, 1, 1)

  ConvParams() = default;
  ConvParams(std::size_t out_channels, std::size_t in_channels, std::size_t kernel)
      : weight(out_channels, in_channels, kernel, kernel), bias(1, out_channels, 1, 1) {
    if (kernel != 1 && kernel != 3) throw ConfigError("kernel size must be 1 or 3, got " + std::to_string(kernel));
  }

  std::size_t out_channels() const { return weight.n(); }
  std::size_t in_channels() const { return weight.c(); }
  std::size_t kernel() const { return weight.h(); }
  std::size_t padding() const { return (kernel() - 1) / 2; }
  std::size_t param_count() const { return weight.size() + bias.size(); }
};

/// Batch-norm affine parameters and running statistics.
template <class T>
struct BnParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;

  BnParams() = default;
  explicit BnParams(std::size_t channels)
      : gamma(1, channels, 1, 1, T(1)),
        beta(1, channels, 1, 1, T(0)),
        running_mean(1, channels, 1, 1, T(0)),
        running_var(1, channels, 1, 1, T(1)) {}

  std::size_t channels() const { return gamma.c(); }
  /// Learnable scalars only (gamma, beta).
  std::size_t trainable_count() const { return gamma.size() + beta.size(); }
  /// Every stored scalar, running statistics included.
  std::size_t param_count() const { return 4 * gamma.size(); }
};

}  // namespace elan
