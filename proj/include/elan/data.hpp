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

// Bicubic degradation and paired patch sampling for training.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "elan/metrics.hpp"
#include "elan/tensor.hpp"

namespace elan {

/// Keys cubic kernel with a = -0.5.
inline double cubic_kernel(double x) {
  constexpr double a = -0.5;
  const double ax = std::abs(x), ax2 = ax * ax, ax3 = ax2 * ax;
  if (ax <= 1.0) return (a + 2) * ax3 - (a + 3) * ax2 + 1;
  if (ax <= 2.0) return a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a;
  return 0.0;
}

/// Sampling taps of one output sample along one axis.
struct ResampleTaps {
  std::vector<std::size_t> index;
  std::vector<double> weight;
};

/// Per-output taps for resizing `in` samples to `out` samples. Downscaling
/// widens the kernel by 1/scale (antialiasing); indices clamp at the edges.
inline std::vector<ResampleTaps> bicubic_taps(std::size_t in, std::size_t out) {
  const double scale = double(out) / double(in);
  const bool antialias = scale < 1.0;
  const double kernel_width = antialias ? 4.0 / scale : 4.0;
  std::vector<ResampleTaps> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    // 1-based centre of output sample i mapped into input coordinates.
    const double u = double(i + 1) / scale + 0.5 * (1.0 - 1.0 / scale);
    const auto left = static_cast<std::ptrdiff_t>(std::floor(u - kernel_width / 2.0));
    const auto count = static_cast<std::ptrdiff_t>(std::ceil(kernel_width)) + 2;
    double total = 0;
    for (std::ptrdiff_t j = left; j < left + count; ++j) {
      const double d = u - double(j);
      const double w = antialias ? scale * cubic_kernel(scale * d) : cubic_kernel(d);
      if (w == 0.0) continue;
      const std::ptrdiff_t clamped = std::clamp<std::ptrdiff_t>(j, 1, std::ptrdiff_t(in)) - 1;
      taps[i].index.push_back(std::size_t(clamped));
      taps[i].weight.push_back(w);
      total += w;
    }
    for (auto& w : taps[i].weight) w /= total;
  }
  return taps;
}

/// Resizes to an explicit output extent.
inline Image bicubic_resize(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0 || img.height == 0 || img.width == 0) {
    throw ShapeError("bicubic_resize: degenerate size " + std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  const auto ty = bicubic_taps(img.height, out_h);
  const auto tx = bicubic_taps(img.width, out_w);
  Image rows(img.height, out_w, img.space);
  Image out(out_h, out_w, img.space);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        // offsets from the first tap keep flat regions exact
        const double base = img.at(c, y, tx[x].index[0]);
        double s = 0;
        for (std::size_t k = 0; k < tx[x].index.size(); ++k) s += tx[x].weight[k] * (img.at(c, y, tx[x].index[k]) - base);
        rows.at(c, y, x) = base + s;
      }
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        const double base = rows.at(c, ty[y].index[0], x);
        double s = 0;
        for (std::size_t k = 0; k < ty[y].index.size(); ++k) s += ty[y].weight[k] * (rows.at(c, ty[y].index[k], x) - base);
        out.at(c, y, x) = base + s;
      }
  }
  return out;
}

/// Output extent is ceil(extent * scale_factor).
inline Image bicubic_resize(const Image& img, double scale_factor) {
  if (!(scale_factor > 0.0)) throw ShapeError("bicubic_resize: scale must be positive");
  auto extent = [&](std::size_t n) { return static_cast<std::size_t>(std::ceil(double(n) * scale_factor - 1e-9)); };
  return bicubic_resize(img, extent(img.height), extent(img.width));
}

/// LR/HR training pair; tensors hold unit-range values, shapes (1, 3, p, p) and (1, 3, rp, rp).
template <class T>
struct PatchPair {
  Tensor<T> lr;
  Tensor<T> hr;
  std::size_t lr_y = 0, lr_x = 0;
  std::size_t hr_y = 0, hr_x = 0;
};

template <class T>
Tensor<T> crop_image(const Image& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  Tensor<T> t(1, 3, h, w);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) t(0, c, y, x) = static_cast<T>(img.at(c, y0 + y, x0 + x) / 255.0);
  return t;
}

/// Uniformly placed, aligned LR/HR patch pairs; the HR origin is `scale` times the LR origin.
template <class T>
std::vector<PatchPair<T>> sample_patch_pairs(const Image& hr, const Image& lr, std::size_t scale, std::size_t patch,
                                             std::size_t count, std::uint64_t seed) {
  if (scale == 0 || lr.height * scale > hr.height || lr.width * scale > hr.width) {
    throw ShapeError("sample_patch_pairs: LR image is not a 1/" + std::to_string(scale) + " copy of the HR image");
  }
  if (patch == 0 || patch > lr.height || patch > lr.width) {
    throw ShapeError("sample_patch_pairs: patch " + std::to_string(patch) + " larger than LR image " +
                     std::to_string(lr.height) + "x" + std::to_string(lr.width));
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dy(0, lr.height - patch), dx(0, lr.width - patch);
  std::vector<PatchPair<T>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    PatchPair<T> p;
    p.lr_y = dy(rng);
    p.lr_x = dx(rng);
    p.hr_y = p.lr_y * scale;
    p.hr_x = p.lr_x * scale;
    p.lr = crop_image<T>(lr, p.lr_y, p.lr_x, patch, patch);
    p.hr = crop_image<T>(hr, p.hr_y, p.hr_x, patch * scale, patch * scale);
    out.push_back(std::move(p));
  }
  return out;
}

/// Element of the dihedral group D4: rotate counter-clockwise by quarter_turns * 90 degrees, then optionally mirror left-right.
struct Augmentation {
  int quarter_turns = 0;
  bool hflip = false;

  Augmentation inverse() const {
    if (hflip) return *this;  // a reflection is its own inverse
    return {(4 - quarter_turns % 4) % 4, false};
  }
  static Augmentation from_degrees(int degrees, bool hflip) {
    if (degrees % 90 != 0 || degrees < 0 || degrees >= 360) {
      throw Error("augment: rotation must be 0, 90, 180 or 270 degrees, got " + std::to_string(degrees));
    }
    return {degrees / 90, hflip};
  }
};

template <class T>
Tensor<T> apply_augmentation(const Tensor<T>& x, const Augmentation& a) {
  if (x.h() != x.w()) throw ShapeError("augment: patches must be square, got " + x.shape().str());
  const std::size_t p = x.h();
  Tensor<T> out(x.shape());
  const int turns = ((a.quarter_turns % 4) + 4) % 4;
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t xx = 0; xx < p; ++xx) {
          std::size_t sy = y, sx = a.hflip ? p - 1 - xx : xx;
          for (int t = 0; t < turns; ++t) {
            // one counter-clockwise turn: out(y, x) = in(x, p-1-y)
            const std::size_t ny = sx, nx = p - 1 - sy;
            sy = ny;
            sx = nx;
          }
          out(n, c, y, xx) = x(n, c, sy, sx);
        }
  return out;
}

template <class T>
PatchPair<T> augment(const PatchPair<T>& pair, int rotation_degrees, bool hflip) {
  const auto a = Augmentation::from_degrees(rotation_degrees, hflip);
  PatchPair<T> out = pair;
  out.lr = apply_augmentation(pair.lr, a);
  out.hr = apply_augmentation(pair.hr, a);
  return out;
}

}  // namespace elan
