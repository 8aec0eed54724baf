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

// Building blocks of an ELAB: shift-conv local feature extraction, window
// partitioning, diagonal circular shift, accelerated self-attention with a
// single query/key projection, group-wise multi-scale attention and
// attention-score sharing.

#include <cmath>
#include <concepts>
#include <numeric>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "elan/ops.hpp"

namespace elan {

// ---------------------------------------------------------------------------
// five-group spatial shift

/// Channel range [begin, end) of shift group `g` (0..4). Remainder channels go to group 4.
inline std::pair<std::size_t, std::size_t> shift_group_range(std::size_t channels, std::size_t g) {
  const std::size_t per = channels / 5;
  const std::size_t begin = g * per;
  const std::size_t end = g == 4 ? channels : begin + per;
  return {begin, end};
}

/// Group 0 moves left, 1 right, 2 up, 3 down by one pixel (zero fill); group 4 stays.
inline IndexMap spatial_shift_map(const Shape& s) {
  if (s.c < 5) throw ShapeError("spatial_shift_5group: need at least 5 channels, got shape " + s.str());
  static constexpr std::ptrdiff_t kOffsets[5][2] = {{0, 1}, {0, -1}, {1, 0}, {-1, 0}, {0, 0}};  // (sy, sx) source offset
  IndexMap map(s.size());
  const auto H = std::ptrdiff_t(s.h), W = std::ptrdiff_t(s.w);
  for (std::size_t g = 0; g < 5; ++g) {
    const auto [c0, c1] = shift_group_range(s.c, g);
    const auto oy = kOffsets[g][0], ox = kOffsets[g][1];
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = c0; c < c1; ++c)
        for (std::ptrdiff_t y = 0; y < H; ++y)
          for (std::ptrdiff_t x = 0; x < W; ++x) {
            const std::ptrdiff_t sy = y + oy, sx = x + ox;
            const std::size_t o = ((n * s.c + c) * s.h + std::size_t(y)) * s.w + std::size_t(x);
            map[o] = (sy < 0 || sy >= H || sx < 0 || sx >= W)
                         ? -1
                         : std::ptrdiff_t(((n * s.c + c) * s.h + std::size_t(sy)) * s.w + std::size_t(sx));
          }
  }
  return map;
}

template <class T>
Tensor<T> spatial_shift_5group(const Tensor<T>& x) {
  return gather(x, x.shape(), spatial_shift_map(x.shape()));
}

template <class T>
Var<T> spatial_shift_5group(Tape<T>& tape, const Var<T>& x) {
  return gather(tape, x, x.shape(), spatial_shift_map(x.shape()));
}

namespace detail {
template <class T>
void check_pointwise(const ConvParams<T>& p, const char* who) {
  if (p.kernel() != 1) throw ShapeError(std::string(who) + ": expects a 1x1 convolution");
}
}  // namespace detail

/// Spatial shift followed by a 1x1 convolution. Same parameters and MACs as the bare 1x1 conv.
template <class T>
Tensor<T> shift_conv(const Tensor<T>& x, const ConvParams<T>& p) {
  detail::check_pointwise(p, "shift_conv");
  detail::check_conv(x.shape(), p);
  return conv2d(spatial_shift_5group(x), p);
}

template <class T>
Var<T> shift_conv(Tape<T>& tape, const Var<T>& x, const ConvParams<T>& p) {
  detail::check_pointwise(p, "shift_conv");
  detail::check_conv(x.shape(), p);
  return conv2d(tape, spatial_shift_5group(tape, x), p);
}

/// x + shift_conv(relu(shift_conv(x, expand)), reduce)
template <class T>
Var<T> local_feature_block(Tape<T>& tape, const Var<T>& x, const ConvParams<T>& expand,
                           const ConvParams<T>& reduce) {
  if (expand.in_channels() != x.shape().c || reduce.in_channels() != expand.out_channels() ||
      reduce.out_channels() != x.shape().c) {
    throw ShapeError("local_feature_block: channel mismatch between input " + x.shape().str() + ", expand " +
                     expand.weight.shape().str() + " and reduce " + reduce.weight.shape().str());
  }
  auto hidden = relu(tape, shift_conv(tape, x, expand));
  return add(tape, x, shift_conv(tape, hidden, reduce));
}

template <class T>
Tensor<T> local_feature_block(const Tensor<T>& x, const ConvParams<T>& expand, const ConvParams<T>& reduce) {
  Tape<T> tape(false);
  return local_feature_block(tape, tape.constant(x), expand, reduce).value();
}

// ---------------------------------------------------------------------------
// window partition: (N, C, H, W) -> (N * heads * nw, 1, M*M, C / heads)

struct WindowLayout {
  Shape feature;          // the partitioned (padded) feature
  std::size_t window = 1;
  std::size_t heads = 1;

  std::size_t windows_y() const { return feature.h / window; }
  std::size_t windows_x() const { return feature.w / window; }
  std::size_t num_windows() const { return windows_y() * windows_x(); }
  std::size_t head_dim() const { return feature.c / heads; }
  Shape windows_shape() const {
    return Shape{feature.n * heads * num_windows(), 1, window * window, head_dim()};
  }
  friend bool operator==(const WindowLayout&, const WindowLayout&) = default;
};

inline WindowLayout make_window_layout(const Shape& s, std::size_t window, std::size_t heads = 1) {
  if (window == 0 || s.h % window != 0 || s.w % window != 0) {
    throw ShapeError("window_partition: extent " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " is not divisible by window " + std::to_string(window));
  }
  if (heads == 0 || s.c % heads != 0) {
    throw ShapeError("window_partition: " + std::to_string(s.c) + " channels do not split into " +
                     std::to_string(heads) + " heads");
  }
  return WindowLayout{s, window, heads};
}

/// For every element of the windows tensor, its source index in the feature tensor.
inline IndexMap window_partition_map(const WindowLayout& l) {
  const Shape s = l.feature;
  const std::size_t M = l.window, d = l.head_dim();
  IndexMap map(s.size());
  std::size_t i = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t h = 0; h < l.heads; ++h)
      for (std::size_t wy = 0; wy < l.windows_y(); ++wy)
        for (std::size_t wx = 0; wx < l.windows_x(); ++wx)
          for (std::size_t ty = 0; ty < M; ++ty)
            for (std::size_t tx = 0; tx < M; ++tx)
              for (std::size_t j = 0; j < d; ++j) {
                const std::size_t c = h * d + j, y = wy * M + ty, x = wx * M + tx;
                map[i++] = std::ptrdiff_t(((n * s.c + c) * s.h + y) * s.w + x);
              }
  return map;
}

inline IndexMap invert_permutation(const IndexMap& map) {
  IndexMap inv(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) inv[std::size_t(map[i])] = std::ptrdiff_t(i);
  return inv;
}

template <class T>
std::pair<Tensor<T>, WindowLayout> window_partition(const Tensor<T>& x, std::size_t window, std::size_t heads = 1) {
  const auto layout = make_window_layout(x.shape(), window, heads);
  return {gather(x, layout.windows_shape(), window_partition_map(layout)), layout};
}

template <class T>
Tensor<T> window_reverse(const Tensor<T>& windows, const WindowLayout& layout) {
  if (windows.shape() != layout.windows_shape()) {
    throw ShapeError("window_reverse: windows shape " + windows.shape().str() + " does not match layout " +
                     layout.windows_shape().str());
  }
  return gather(windows, layout.feature, invert_permutation(window_partition_map(layout)));
}

template <class T>
std::pair<Var<T>, WindowLayout> window_partition(Tape<T>& tape, const Var<T>& x, std::size_t window,
                                                 std::size_t heads = 1) {
  const auto layout = make_window_layout(x.shape(), window, heads);
  return {gather(tape, x, layout.windows_shape(), window_partition_map(layout)), layout};
}

template <class T>
Var<T> window_reverse(Tape<T>& tape, const Var<T>& windows, const WindowLayout& layout) {
  if (windows.shape() != layout.windows_shape()) {
    throw ShapeError("window_reverse: windows shape " + windows.shape().str() + " does not match layout " +
                     layout.windows_shape().str());
  }
  return gather(tape, windows, layout.feature, invert_permutation(window_partition_map(layout)));
}

// ---------------------------------------------------------------------------
// diagonal circular shift

struct ShiftPhase {
  bool shifted = false;
  std::ptrdiff_t dy = 0;
  std::ptrdiff_t dx = 0;

  static ShiftPhase none() { return {}; }
  /// Shift by half of the largest window along the diagonal.
  static ShiftPhase half_window(std::size_t max_window) {
    const auto s = std::ptrdiff_t(max_window / 2);
    return {true, s, s};
  }
  friend bool operator==(const ShiftPhase&, const ShiftPhase&) = default;
  std::string str() const {
    return shifted ? "shifted(" + std::to_string(dy) + "," + std::to_string(dx) + ")" : "unshifted";
  }
};

/// Toroidal translation: the value at (y, x) moves to ((y + dy) mod H, (x + dx) mod W).
inline IndexMap circular_shift_map(const Shape& s, std::ptrdiff_t dy, std::ptrdiff_t dx) {
  IndexMap map(s.size());
  const auto H = std::ptrdiff_t(s.h), W = std::ptrdiff_t(s.w);
  auto wrap = [](std::ptrdiff_t v, std::ptrdiff_t m) { return ((v % m) + m) % m; };
  std::size_t i = 0;
  for (std::size_t p = 0; p < s.n * s.c; ++p)
    for (std::ptrdiff_t y = 0; y < H; ++y)
      for (std::ptrdiff_t x = 0; x < W; ++x)
        map[i++] = std::ptrdiff_t(p * s.plane()) + wrap(y - dy, H) * W + wrap(x - dx, W);
  return map;
}

template <class T>
Tensor<T> circular_shift(const Tensor<T>& x, std::ptrdiff_t dy, std::ptrdiff_t dx) {
  return gather(x, x.shape(), circular_shift_map(x.shape(), dy, dx));
}

template <class T>
Tensor<T> inverse_circular_shift(const Tensor<T>& x, std::ptrdiff_t dy, std::ptrdiff_t dx) {
  return circular_shift(x, -dy, -dx);
}

template <class T>
Var<T> circular_shift(Tape<T>& tape, const Var<T>& x, std::ptrdiff_t dy, std::ptrdiff_t dx) {
  return gather(tape, x, x.shape(), circular_shift_map(x.shape(), dy, dx));
}

template <class T>
Var<T> inverse_circular_shift(Tape<T>& tape, const Var<T>& x, std::ptrdiff_t dy, std::ptrdiff_t dx) {
  return circular_shift(tape, x, -dy, -dx);
}

// ---------------------------------------------------------------------------
// reflection padding to window multiples

/// Original extent of a feature padded at its bottom/right edges.
struct CropRecord {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t padded_height = 0;
  std::size_t padded_width = 0;

  bool empty() const { return height == padded_height && width == padded_width; }
};

inline std::size_t windows_lcm(const std::vector<std::size_t>& sizes) {
  std::size_t l = 1;
  for (std::size_t s : sizes) {
    if (s == 0) throw ConfigError("window sizes must be positive");
    l = std::lcm(l, s);
  }
  return l;
}

/// Mirror index without repeating the edge sample; valid for any pad length.
inline std::size_t reflect_index(std::size_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::size_t period = 2 * (n - 1);
  const std::size_t m = i % period;
  return m < n ? m : period - m;
}

inline IndexMap reflect_pad_map(const Shape& s, std::size_t ph, std::size_t pw) {
  IndexMap map(s.n * s.c * ph * pw);
  std::size_t i = 0;
  for (std::size_t p = 0; p < s.n * s.c; ++p)
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x)
        map[i++] = std::ptrdiff_t(p * s.plane() + reflect_index(y, s.h) * s.w + reflect_index(x, s.w));
  return map;
}

inline CropRecord window_padding(const Shape& s, const std::vector<std::size_t>& sizes) {
  const std::size_t l = windows_lcm(sizes);
  return CropRecord{s.h, s.w, (s.h + l - 1) / l * l, (s.w + l - 1) / l * l};
}

template <class T>
std::pair<Tensor<T>, CropRecord> pad_to_windows(const Tensor<T>& x, const std::vector<std::size_t>& sizes) {
  const CropRecord rec = window_padding(x.shape(), sizes);
  if (rec.empty()) return {x, rec};
  const Shape s = x.shape();
  return {gather(x, Shape{s.n, s.c, rec.padded_height, rec.padded_width},
                 reflect_pad_map(s, rec.padded_height, rec.padded_width)),
          rec};
}

template <class T>
std::pair<Var<T>, CropRecord> pad_to_windows(Tape<T>& tape, const Var<T>& x, const std::vector<std::size_t>& sizes) {
  const CropRecord rec = window_padding(x.shape(), sizes);
  if (rec.empty()) return {x, rec};
  const Shape s = x.shape();
  return {gather(tape, x, Shape{s.n, s.c, rec.padded_height, rec.padded_width},
                 reflect_pad_map(s, rec.padded_height, rec.padded_width)),
          rec};
}

inline IndexMap crop_map(const Shape& s, const CropRecord& rec) {
  IndexMap map(s.n * s.c * rec.height * rec.width);
  std::size_t i = 0;
  for (std::size_t p = 0; p < s.n * s.c; ++p)
    for (std::size_t y = 0; y < rec.height; ++y)
      for (std::size_t x = 0; x < rec.width; ++x) map[i++] = std::ptrdiff_t(p * s.plane() + y * s.w + x);
  return map;
}

template <class T>
Tensor<T> crop(const Tensor<T>& x, const CropRecord& rec) {
  if (rec.empty()) return x;
  if (x.h() != rec.padded_height || x.w() != rec.padded_width) throw ShapeError("crop: extent does not match record");
  return gather(x, Shape{x.n(), x.c(), rec.height, rec.width}, crop_map(x.shape(), rec));
}

template <class T>
Var<T> crop(Tape<T>& tape, const Var<T>& x, const CropRecord& rec) {
  if (rec.empty()) return x;
  const Shape s = x.shape();
  if (s.h != rec.padded_height || s.w != rec.padded_width) throw ShapeError("crop: extent does not match record");
  return gather(tape, x, Shape{s.n, s.c, rec.height, rec.width}, crop_map(s, rec));
}

// ---------------------------------------------------------------------------
// accelerated self-attention

/// Projections for one attention group. Query and key share `theta`; groups
/// that reuse scores from an earlier block carry no theta at all. The
/// projections read every input channel and emit this group's channels.
template <class T>
struct AsaWeights {
  std::optional<ConvParams<T>> theta;
  std::optional<BnParams<T>> bn_theta;  // absent once folded
  ConvParams<T> g;
  std::optional<BnParams<T>> bn_g;

  bool computes_scores() const { return theta.has_value(); }
  std::size_t out_channels() const { return g.out_channels(); }
};

/// Normalized attention weights of one group: (N * heads * nw, 1, M*M, M*M).
template <class T>
struct GroupScores {
  Var<T> weights;
  WindowLayout layout;  // layout of the value windows these scores apply to (channels excluded)
};

template <class T>
struct AttentionScores {
  std::vector<GroupScores<T>> groups;
  std::size_t block = 0;  // producing block
  ShiftPhase phase;
};

template <class T>
struct AsaResult {
  Var<T> out;
  GroupScores<T> scores;
  Var<T> logits;  // pre-softmax q k^T (unscaled)
};

namespace detail {
template <class T, class Bn>
Var<T> project(Tape<T>& tape, const Var<T>& x, const ConvParams<T>& conv, Bn& bn, bool training) {
  auto y = conv2d(tape, x, conv);
  if (bn) y = batch_norm(tape, y, *bn, training);
  return y;
}

inline bool same_geometry(const WindowLayout& a, const WindowLayout& b) {
  return a.window == b.window && a.heads == b.heads && a.feature.n == b.feature.n && a.feature.h == b.feature.h &&
         a.feature.w == b.feature.w;
}
}  // namespace detail

/// q = k = bn(theta(x)), v = bn(g(x)); per window softmax(q k^T / sqrt(d)) v.
/// `x` spatial extent must be divisible by `window`.
template <class T, class W>
  requires std::same_as<std::remove_const_t<W>, AsaWeights<T>>
AsaResult<T> asa_compute(Tape<T>& tape, const Var<T>& x, W& w, std::size_t window, std::size_t heads, bool training) {
  if (!w.theta) throw ConfigError("asa_compute: group has no theta projection (it only reuses scores)");
  std::optional<ScorePathRegion> region(std::in_place);
  auto q = detail::project(tape, x, *w.theta, w.bn_theta, training);
  auto [qw, layout] = window_partition(tape, q, window, heads);
  auto logits = batched_matmul(tape, qw, qw, Transpose::second);
  region.reset();
  auto v = detail::project(tape, x, w.g, w.bn_g, training);
  auto [vw, vlayout] = window_partition(tape, v, window, heads);
  const T inv_sqrt_d = T(1) / std::sqrt(T(layout.head_dim()));
  auto scores = softmax_rows(tape, logits, inv_sqrt_d);
  auto out = window_reverse(tape, batched_matmul(tape, scores, vw), vlayout);
  return {out, GroupScores<T>{scores, vlayout}, logits};
}

/// Applies previously computed scores to a fresh value projection; theta and q k^T are skipped.
template <class T, class W>
  requires std::same_as<std::remove_const_t<W>, AsaWeights<T>>
Var<T> asa_reuse(Tape<T>& tape, const Var<T>& x, W& w, const GroupScores<T>& scores, bool training) {
  const WindowLayout& ref = scores.layout;
  const Shape vs{x.shape().n, w.out_channels(), x.shape().h, x.shape().w};
  if (vs.h % ref.window != 0 || vs.w % ref.window != 0 || vs.c % ref.heads != 0) {
    throw ShapeError("asa_reuse: input " + x.shape().str() + " cannot use scores computed for window " +
                     std::to_string(ref.window));
  }
  const auto layout = make_window_layout(vs, ref.window, ref.heads);
  if (!detail::same_geometry(layout, ref)) {
    throw ShapeError("asa_reuse: window layout mismatch: scores were computed on " + ref.feature.str() +
                     " with window " + std::to_string(ref.window) + ", input is " + x.shape().str());
  }
  auto v = detail::project(tape, x, w.g, w.bn_g, training);
  auto [vw, vlayout] = window_partition(tape, v, ref.window, ref.heads);
  return window_reverse(tape, batched_matmul(tape, scores.weights, vw), vlayout);
}

// ---------------------------------------------------------------------------
// group-wise multi-scale self-attention

struct GmsaConfig {
  std::vector<std::size_t> window_sizes;
  std::vector<std::size_t> group_channels;
  std::size_t heads_per_group = 1;

  /// Equal split across groups; remainder channels join the last group.
  static GmsaConfig equal_split(std::size_t channels, std::vector<std::size_t> windows, std::size_t heads = 1) {
    if (windows.empty()) throw ConfigError("GMSA needs at least one window size");
    GmsaConfig cfg{std::move(windows), {}, heads};
    const std::size_t K = cfg.window_sizes.size();
    cfg.group_channels.assign(K, channels / K);
    cfg.group_channels.back() += channels % K;
    return cfg;
  }

  std::size_t groups() const { return window_sizes.size(); }
  std::size_t max_window() const {
    std::size_t m = 0;
    for (auto s : window_sizes) m = std::max(m, s);
    return m;
  }
  std::size_t total_channels() const { return std::accumulate(group_channels.begin(), group_channels.end(), std::size_t(0)); }

  void validate(std::size_t channels) const {
    if (window_sizes.empty()) throw ConfigError("GMSA needs at least one group");
    if (window_sizes.size() != group_channels.size()) {
      throw ConfigError("GMSA: " + std::to_string(window_sizes.size()) + " window sizes but " +
                        std::to_string(group_channels.size()) + " channel groups");
    }
    for (auto s : window_sizes) {
      if (s == 0) throw ConfigError("GMSA: window sizes must be positive");
    }
    if (heads_per_group == 0) throw ConfigError("GMSA: heads_per_group must be positive");
    for (auto c : group_channels) {
      if (c == 0 || c % heads_per_group != 0) {
        throw ConfigError("GMSA: group of " + std::to_string(c) + " channels does not split into " +
                          std::to_string(heads_per_group) + " heads");
      }
    }
    if (total_channels() != channels) {
      throw ConfigError("GMSA: group channels sum to " + std::to_string(total_channels()) + ", feature has " +
                        std::to_string(channels));
    }
  }
  friend bool operator==(const GmsaConfig&, const GmsaConfig&) = default;
};

template <class T>
struct GmsaWeights {
  std::vector<AsaWeights<T>> groups;
  ConvParams<T> merge;

  bool computes_scores() const { return !groups.empty() && groups.front().computes_scores(); }
};

template <class T>
struct GmsaResult {
  Var<T> out;
  AttentionScores<T> scores;
  std::vector<Var<T>> logits;  // per group, empty when scores were reused
};

/// Optional circular shift, window padding, per-group attention (computed or
/// reused), concatenation, 1x1 merge, inverse shift and the residual add.
template <class T, class W>
  requires std::same_as<std::remove_const_t<W>, GmsaWeights<T>>
GmsaResult<T> gmsa(Tape<T>& tape, const Var<T>& x, const GmsaConfig& cfg, W& w, const ShiftPhase& phase,
                   const std::type_identity_t<AttentionScores<T>>* shared, bool training) {
  cfg.validate(x.shape().c);
  if (w.groups.size() != cfg.groups()) throw ConfigError("GMSA: weight groups do not match config");
  if (shared) {
    if (shared->groups.size() != cfg.groups()) {
      throw ShapeError("GMSA: shared scores carry " + std::to_string(shared->groups.size()) + " groups, config has " +
                       std::to_string(cfg.groups()));
    }
    if (!(shared->phase == phase)) {
      throw ShapeError("GMSA: shared scores were computed in phase " + shared->phase.str() + ", block runs " +
                       phase.str());
    }
  }
  Var<T> xs = phase.shifted ? circular_shift(tape, x, phase.dy, phase.dx) : x;
  auto [xp, rec] = pad_to_windows(tape, xs, cfg.window_sizes);

  GmsaResult<T> result;
  result.scores.phase = phase;
  std::vector<Var<T>> outs;
  for (std::size_t k = 0; k < cfg.groups(); ++k) {
    auto& gw = w.groups[k];
    if (gw.out_channels() != cfg.group_channels[k]) throw ConfigError("GMSA: group weight width mismatch");
    if (shared) {
      const auto& gs = shared->groups[k];
      if (gs.layout.window != cfg.window_sizes[k]) {
        throw ShapeError("GMSA: shared scores for group " + std::to_string(k) + " use window " +
                         std::to_string(gs.layout.window) + ", config expects " + std::to_string(cfg.window_sizes[k]));
      }
      outs.push_back(asa_reuse(tape, xp, gw, gs, training));
      result.scores.groups.push_back(gs);
    } else {
      auto r = asa_compute(tape, xp, gw, cfg.window_sizes[k], cfg.heads_per_group, training);
      outs.push_back(r.out);
      result.scores.groups.push_back(r.scores);
      result.logits.push_back(r.logits);
    }
  }
  if (shared) result.scores.block = shared->block;
  auto merged = conv2d(tape, crop(tape, concat_channels(tape, outs), rec), w.merge);
  if (phase.shifted) merged = inverse_circular_shift(tape, merged, phase.dy, phase.dx);
  result.out = add(tape, x, merged);
  return result;
}

// ---------------------------------------------------------------------------
// ELAB

template <class T>
struct ElabWeights {
  ConvParams<T> expand;  // shift-conv C -> eC
  ConvParams<T> reduce;  // shift-conv eC -> C
  GmsaWeights<T> attention;
};

template <class T, class W>
  requires std::same_as<std::remove_const_t<W>, ElabWeights<T>>
GmsaResult<T> elab_forward(Tape<T>& tape, const Var<T>& x, const GmsaConfig& cfg, W& w, const ShiftPhase& phase,
                           const std::type_identity_t<AttentionScores<T>>* shared, bool training) {
  auto local = local_feature_block(tape, x, w.expand, w.reduce);
  return gmsa(tape, local, cfg, w.attention, phase, shared, training);
}

// ---------------------------------------------------------------------------
// weight construction helpers

template <class T, class Rng>
void init_conv(ConvParams<T>& p, Rng& rng) {
  const double fan_in = double(p.in_channels() * p.kernel() * p.kernel());
  const double bound = 1.0 / std::sqrt(fan_in);
  fill_uniform(p.weight, rng, -bound, bound);
  fill_uniform(p.bias, rng, -bound, bound);
}

/// Weights for one GMSA; `with_theta` false builds a score-reusing module.
template <class T, class Rng>
GmsaWeights<T> make_gmsa_weights(const GmsaConfig& cfg, std::size_t channels, bool with_theta, Rng& rng) {
  cfg.validate(channels);
  GmsaWeights<T> w;
  for (std::size_t k = 0; k < cfg.groups(); ++k) {
    AsaWeights<T> a;
    const std::size_t ck = cfg.group_channels[k];
    if (with_theta) {
      a.theta.emplace(ck, channels, 1);
      init_conv(*a.theta, rng);
      a.bn_theta.emplace(ck);
    }
    a.g = ConvParams<T>(ck, channels, 1);
    init_conv(a.g, rng);
    a.bn_g.emplace(ck);
    w.groups.push_back(std::move(a));
  }
  w.merge = ConvParams<T>(channels, channels, 1);
  init_conv(w.merge, rng);
  return w;
}

template <class T>
AsaWeights<T> fold_batch_norm(const AsaWeights<T>& w) {
  AsaWeights<T> out;
  if (w.theta) out.theta = w.bn_theta ? fold_bn_into_conv(*w.theta, *w.bn_theta) : *w.theta;
  out.g = w.bn_g ? fold_bn_into_conv(w.g, *w.bn_g) : w.g;
  return out;
}

}  // namespace elan
