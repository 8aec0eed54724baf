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

// Y-channel PSNR / SSIM as used for super-resolution benchmarks.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "elan/tensor.hpp"

namespace elan {

enum class ColorSpace { rgb, ycbcr };

/// Three-plane image with values on the 8-bit scale [0, 255] (not necessarily integral).
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  ColorSpace space = ColorSpace::rgb;
  std::vector<double> data;  // planar: channel, row, column

  Image() = default;
  Image(std::size_t h, std::size_t w, ColorSpace cs = ColorSpace::rgb, double fill = 0.0)
      : height(h), width(w), space(cs), data(3 * h * w, fill) {}

  std::size_t plane_size() const { return height * width; }
  double& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  const double* plane(std::size_t c) const { return data.data() + c * plane_size(); }
  double* plane(std::size_t c) { return data.data() + c * plane_size(); }

  bool same_extent(const Image& o) const { return height == o.height && width == o.width; }
  bool in_range() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return v >= 0.0 && v <= 255.0; });
  }

  /// Image n of a (N, 3, H, W) tensor holding unit-range values.
  template <class T>
  static Image from_tensor(const Tensor<T>& t, std::size_t n = 0) {
    if (t.c() != 3) throw ShapeError("Image::from_tensor: expected 3 channels, got " + t.shape().str());
    Image img(t.h(), t.w());
    for (std::size_t c = 0; c < 3; ++c) {
      const T* src = t.plane(n, c);
      for (std::size_t i = 0; i < img.plane_size(); ++i) img.plane(c)[i] = double(src[i]) * 255.0;
    }
    return img;
  }

  /// (1, 3, H, W) tensor with values divided by 255.
  template <class T>
  Tensor<T> to_tensor() const {
    Tensor<T> t(1, 3, height, width);
    for (std::size_t i = 0; i < data.size(); ++i) t[i] = static_cast<T>(data[i] / 255.0);
    return t;
  }
};

/// Rounds to the nearest integer and clamps to [0, 255].
inline Image quantize(const Image& img) {
  Image out = img;
  for (auto& v : out.data) v = std::clamp(std::nearbyint(v), 0.0, 255.0);
  return out;
}

/// BT.601 limited range: Y in [16, 235], Cb/Cr in [16, 240].
inline Image rgb_to_ycbcr(const Image& img) {
  if (img.space != ColorSpace::rgb) throw Error("rgb_to_ycbcr: input is not tagged RGB");
  Image out(img.height, img.width, ColorSpace::ycbcr);
  for (std::size_t i = 0; i < img.plane_size(); ++i) {
    const double r = img.plane(0)[i] / 255.0, g = img.plane(1)[i] / 255.0, b = img.plane(2)[i] / 255.0;
    out.plane(0)[i] = 16.0 + 65.481 * r + 128.553 * g + 24.966 * b;
    out.plane(1)[i] = 128.0 - 37.797 * r - 74.203 * g + 112.0 * b;
    out.plane(2)[i] = 128.0 + 112.0 * r - 93.786 * g - 18.214 * b;
  }
  return out;
}

/// Luma plane, converting from RGB when needed.
inline std::vector<double> luma(const Image& img) {
  const Image y = img.space == ColorSpace::ycbcr ? img : rgb_to_ycbcr(img);
  return std::vector<double>(y.plane(0), y.plane(0) + y.plane_size());
}

namespace detail {

struct Plane {
  std::size_t height = 0, width = 0;
  std::vector<double> v;
  double at(std::size_t y, std::size_t x) const { return v[y * width + x]; }
};

inline Plane cropped_luma(const Image& img, std::size_t border) {
  if (2 * border >= img.height || 2 * border >= img.width) {
    throw ShapeError("border crop of " + std::to_string(border) + " leaves nothing of a " +
                     std::to_string(img.height) + "x" + std::to_string(img.width) + " image");
  }
  const auto y = luma(img);
  Plane p{img.height - 2 * border, img.width - 2 * border, {}};
  p.v.reserve(p.height * p.width);
  for (std::size_t r = border; r < img.height - border; ++r)
    for (std::size_t c = border; c < img.width - border; ++c) p.v.push_back(y[r * img.width + c]);
  return p;
}

inline void check_pair(const Image& a, const Image& b, const char* who) {
  if (!a.same_extent(b)) {
    throw ShapeError(std::string(who) + ": image sizes differ (" + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
  }
}

}  // namespace detail

/// Returned by psnr() for identical inputs.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// Y-channel PSNR in dB after dropping `border` pixels on every side.
inline double psnr(const Image& a, const Image& b, std::size_t border = 0) {
  detail::check_pair(a, b, "psnr");
  const auto ya = detail::cropped_luma(a, border);
  const auto yb = detail::cropped_luma(b, border);
  double se = 0.0;
  for (std::size_t i = 0; i < ya.v.size(); ++i) se += (ya.v[i] - yb.v[i]) * (ya.v[i] - yb.v[i]);
  if (se == 0.0) return kPsnrIdentical;
  const double mse = se / double(ya.v.size());
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

namespace detail {

inline std::array<double, 11> gaussian_window_1d() {
  std::array<double, 11> g{};
  double s = 0;
  for (int i = 0; i < 11; ++i) {
    const double d = i - 5;
    g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    s += g[i];
  }
  for (auto& v : g) v /= s;
  return g;
}

// Valid-mode separable filtering with the 11-tap Gaussian.
inline Plane filter_valid(const Plane& p) {
  static const auto g = gaussian_window_1d();
  Plane rows{p.height, p.width - 10, std::vector<double>(p.height * (p.width - 10))};
  for (std::size_t y = 0; y < rows.height; ++y)
    for (std::size_t x = 0; x < rows.width; ++x) {
      double s = 0;
      for (std::size_t k = 0; k < 11; ++k) s += g[k] * p.at(y, x + k);
      rows.v[y * rows.width + x] = s;
    }
  Plane out{p.height - 10, rows.width, std::vector<double>((p.height - 10) * rows.width)};
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) {
      double s = 0;
      for (std::size_t k = 0; k < 11; ++k) s += g[k] * rows.at(y + k, x);
      out.v[y * out.width + x] = s;
    }
  return out;
}

}  // namespace detail

/// Y-channel SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, L = 255,
/// averaged over every position where the window fits.
inline double ssim(const Image& a, const Image& b, std::size_t border = 0) {
  detail::check_pair(a, b, "ssim");
  const auto x = detail::cropped_luma(a, border);
  const auto y = detail::cropped_luma(b, border);
  if (x.height < 11 || x.width < 11) throw ShapeError("ssim: image smaller than the 11x11 window");
  auto product = [](const detail::Plane& p, const detail::Plane& q) {
    detail::Plane r = p;
    for (std::size_t i = 0; i < r.v.size(); ++i) r.v[i] *= q.v[i];
    return r;
  };
  const auto mx = detail::filter_valid(x), my = detail::filter_valid(y);
  const auto sxx = detail::filter_valid(product(x, x));
  const auto syy = detail::filter_valid(product(y, y));
  const auto sxy = detail::filter_valid(product(x, y));
  const double c1 = (0.01 * 255) * (0.01 * 255), c2 = (0.03 * 255) * (0.03 * 255);
  double total = 0;
  for (std::size_t i = 0; i < mx.v.size(); ++i) {
    const double ux = mx.v[i], uy = my.v[i];
    const double vx = sxx.v[i] - ux * ux, vy = syy.v[i] - uy * uy, cxy = sxy.v[i] - ux * uy;
    total += ((2 * ux * uy + c1) * (2 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
  }
  return total / double(mx.v.size());
}

}  // namespace elan
