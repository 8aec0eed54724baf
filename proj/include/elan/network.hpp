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
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "elan/elan_ops.hpp"

namespace elan {

/// Architecture hyperparameters.
struct ElanConfig {
  std::size_t num_blocks = 24;
  std::size_t channels = 60;
  GmsaConfig gmsa = GmsaConfig::equal_split(60, {4, 8, 16});
  std::size_t share_depth = 1;  // blocks reusing each computed score set
  std::size_t scale = 4;
  std::size_t expansion = 2;  // local feature block width multiplier

  /// 24 blocks, 60 channels, windows 4/8/16, one sharing block per unit.
  static ElanConfig light(std::size_t scale) { return make(24, 60, scale); }
  /// 36 blocks, 180 channels, windows 4/8/16, one sharing block per unit.
  static ElanConfig normal(std::size_t scale) { return make(36, 180, scale); }

  static ElanConfig make(std::size_t blocks, std::size_t channels, std::size_t scale,
                         std::vector<std::size_t> windows = {4, 8, 16}, std::size_t share_depth = 1,
                         std::size_t expansion = 2) {
    ElanConfig cfg;
    cfg.num_blocks = blocks;
    cfg.channels = channels;
    cfg.gmsa = GmsaConfig::equal_split(channels, std::move(windows));
    cfg.share_depth = share_depth;
    cfg.scale = scale;
    cfg.expansion = expansion;
    return cfg;
  }

  void validate() const {
    if (num_blocks == 0) throw ConfigError("num_blocks must be positive");
    if (channels < 5 || channels * expansion < 5) {
      throw ConfigError("shift convolutions need at least 5 channels, got " + std::to_string(channels));
    }
    if (expansion == 0) throw ConfigError("expansion must be positive");
    if (scale < 2 || scale > 4) throw ConfigError("scale must be 2, 3 or 4, got " + std::to_string(scale));
    if (num_blocks % (share_depth + 1) != 0) {
      throw ConfigError(std::to_string(num_blocks) + " blocks do not divide into sharing units of " +
                        std::to_string(share_depth + 1));
    }
    if (!std::is_sorted(gmsa.window_sizes.begin(), gmsa.window_sizes.end())) {
      throw ConfigError("window sizes must be sorted ascending");
    }
    gmsa.validate(channels);
  }

  bool block_computes_scores(std::size_t block) const { return block % (share_depth + 1) == 0; }

  /// Sharing units alternate between the plain and the diagonally shifted window grid.
  ShiftPhase block_phase(std::size_t block) const {
    return (block / (share_depth + 1)) % 2 == 1 ? ShiftPhase::half_window(gmsa.max_window()) : ShiftPhase::none();
  }

  friend bool operator==(const ElanConfig&, const ElanConfig&) = default;
};

template <class T>
struct ElanWeights {
  ConvParams<T> head;  // 3x3, 3 -> C
  std::vector<ElabWeights<T>> blocks;
  ConvParams<T> tail;  // 3x3, C -> 3 r^2
};

/// Visits every stored tensor in checkpoint order as f(name, tensor, trainable).
template <class W, class F>
void for_each_tensor(W& w, F&& f) {
  auto conv = [&](const std::string& name, auto& p) {
    f(name + ".weight", p.weight, true);
    f(name + ".bias", p.bias, true);
  };
  auto bn = [&](const std::string& name, auto& p) {
    f(name + ".gamma", p.gamma, true);
    f(name + ".beta", p.beta, true);
    f(name + ".running_mean", p.running_mean, false);
    f(name + ".running_var", p.running_var, false);
  };
  conv("head", w.head);
  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    auto& blk = w.blocks[b];
    const std::string prefix = "blocks." + std::to_string(b);
    conv(prefix + ".expand", blk.expand);
    conv(prefix + ".reduce", blk.reduce);
    for (std::size_t k = 0; k < blk.attention.groups.size(); ++k) {
      auto& g = blk.attention.groups[k];
      const std::string gp = prefix + ".attention.group" + std::to_string(k);
      if (g.theta) conv(gp + ".theta", *g.theta);
      if (g.bn_theta) bn(gp + ".bn_theta", *g.bn_theta);
      conv(gp + ".g", g.g);
      if (g.bn_g) bn(gp + ".bn_g", *g.bn_g);
    }
    conv(prefix + ".attention.merge", blk.attention.merge);
  }
  conv("tail", w.tail);
}

/// Deterministic initialization: fan-in scaled uniform convolutions, identity batch norm.
template <class T>
ElanWeights<T> build(const ElanConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ElanWeights<T> w;
  const std::size_t C = cfg.channels;
  w.head = ConvParams<T>(C, 3, 3);
  init_conv(w.head, rng);
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    ElabWeights<T> blk;
    blk.expand = ConvParams<T>(C * cfg.expansion, C, 1);
    init_conv(blk.expand, rng);
    blk.reduce = ConvParams<T>(C, C * cfg.expansion, 1);
    init_conv(blk.reduce, rng);
    blk.attention = make_gmsa_weights<T>(cfg.gmsa, C, cfg.block_computes_scores(b), rng);
    w.blocks.push_back(std::move(blk));
  }
  w.tail = ConvParams<T>(3 * cfg.scale * cfg.scale, C, 3);
  init_conv(w.tail, rng);
  return w;
}

template <class T>
std::size_t allocated_scalars(const ElanWeights<T>& w) {
  std::size_t n = 0;
  for_each_tensor(w, [&](const std::string&, const Tensor<T>& t, bool) { n += t.size(); });
  return n;
}

/// X_h = pixel_shuffle(tail(X_s + blocks(X_s))), X_s = head(X_l).
template <class T, class W>
  requires std::same_as<std::remove_const_t<W>, ElanWeights<T>>
Var<T> forward(Tape<T>& tape, W& w, const ElanConfig& cfg, const Var<T>& lr, bool training) {
  if (lr.shape().c != 3) throw ShapeError("forward: expected a 3-channel input, got " + lr.shape().str());
  if (lr.shape().h == 0 || lr.shape().w == 0) throw ShapeError("forward: empty input " + lr.shape().str());
  if (w.blocks.size() != cfg.num_blocks) throw ConfigError("forward: weights do not match the configuration");
  auto shallow = conv2d(tape, lr, w.head);
  Var<T> h = shallow;
  std::optional<AttentionScores<T>> scores;
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    const bool computes = cfg.block_computes_scores(b);
    if (computes != w.blocks[b].attention.computes_scores()) {
      throw ConfigError("forward: block " + std::to_string(b) + " weights disagree with the sharing schedule");
    }
    auto r = elab_forward(tape, h, cfg.gmsa, w.blocks[b], cfg.block_phase(b), computes ? nullptr : &*scores, training);
    h = r.out;
    if (computes) {
      scores = std::move(r.scores);
      scores->block = b;
    }
  }
  auto rec = conv2d(tape, add(tape, shallow, h), w.tail);
  return pixel_shuffle(tape, rec, cfg.scale);
}

/// Inference with running batch-norm statistics.
template <class T>
Tensor<T> forward(const ElanWeights<T>& w, const ElanConfig& cfg, const Tensor<T>& lr) {
  Tape<T> tape(false);
  return forward(tape, w, cfg, tape.constant(lr), false).value();
}

/// Inference weights with every batch norm absorbed into its projection.
template <class T>
ElanWeights<T> fold_batch_norm(const ElanWeights<T>& w) {
  ElanWeights<T> out = w;
  for (auto& blk : out.blocks) {
    for (auto& g : blk.attention.groups) g = fold_batch_norm(g);
  }
  return out;
}

// ---------------------------------------------------------------------------
// parameter and MAC accounting

namespace detail {
inline std::size_t conv_params(std::size_t out, std::size_t in, std::size_t k) { return out * in * k * k + out; }

inline std::size_t count_with(const ElanConfig& cfg, std::size_t bn_scalars_per_channel) {
  cfg.validate();
  const std::size_t C = cfg.channels, E = C * cfg.expansion, r2 = cfg.scale * cfg.scale;
  std::size_t total = conv_params(C, 3, 3) + conv_params(3 * r2, C, 3);
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    total += conv_params(E, C, 1) + conv_params(C, E, 1) + conv_params(C, C, 1);
    for (std::size_t ck : cfg.gmsa.group_channels) {
      total += conv_params(ck, C, 1) + bn_scalars_per_channel * ck;
      if (cfg.block_computes_scores(b)) total += conv_params(ck, C, 1) + bn_scalars_per_channel * ck;
    }
  }
  return total;
}
}  // namespace detail

/// Every scalar stored in the weights, batch-norm running statistics included.
inline std::size_t count_params(const ElanConfig& cfg) { return detail::count_with(cfg, 4); }

/// Learnable scalars only (batch-norm running statistics excluded).
inline std::size_t count_trainable_params(const ElanConfig& cfg) { return detail::count_with(cfg, 2); }

struct FlopsEntry {
  std::string name;
  std::uint64_t macs = 0;
  std::uint64_t params = 0;  // trainable
};

struct FlopsReport {
  std::vector<FlopsEntry> entries;
  std::uint64_t total_macs = 0;
  std::uint64_t total_params = 0;      // trainable
  std::uint64_t stored_scalars = 0;    // count_params
  std::uint64_t attention_core_macs = 0;  // q k^T plus scores * v
  std::uint64_t score_path_macs = 0;      // theta projections plus q k^T
  std::uint64_t attention_path_macs = 0;  // theta, g projections, q k^T, scores * v
  std::size_t lr_height = 0, lr_width = 0;
  std::size_t padded_height = 0, padded_width = 0;

  std::uint64_t total_flops() const { return 2 * total_macs; }
};

/// MACs of every convolution (out * in * k^2 * H * W) and of the attention
/// products on the window-padded extent, for an LR input of H x W.
inline FlopsReport count_flops(const ElanConfig& cfg, std::size_t height, std::size_t width) {
  cfg.validate();
  const std::uint64_t C = cfg.channels, E = C * cfg.expansion, r2 = cfg.scale * cfg.scale;
  const std::uint64_t HW = std::uint64_t(height) * width;
  const CropRecord pad = window_padding(Shape{1, cfg.channels, height, width}, cfg.gmsa.window_sizes);
  const std::uint64_t HWp = std::uint64_t(pad.padded_height) * pad.padded_width;

  FlopsEntry head{"head conv3x3", 9 * 3 * C * HW, detail::conv_params(C, 3, 3)};
  FlopsEntry local{"local shift-conv x2", 0, 0};
  FlopsEntry theta{"attention theta proj", 0, 0};
  FlopsEntry value{"attention g proj", 0, 0};
  FlopsEntry scores{"attention q.k^T", 0, 0};
  FlopsEntry apply{"attention scores.v", 0, 0};
  FlopsEntry merge{"attention merge 1x1", 0, 0};
  FlopsEntry tail{"tail conv3x3", 9 * C * 3 * r2 * HW, detail::conv_params(3 * r2, C, 3)};

  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    const bool computes = cfg.block_computes_scores(b);
    local.macs += 2 * C * E * HW;
    local.params += detail::conv_params(E, C, 1) + detail::conv_params(C, E, 1);
    merge.macs += C * C * HW;
    merge.params += detail::conv_params(C, C, 1);
    for (std::size_t k = 0; k < cfg.gmsa.groups(); ++k) {
      const std::uint64_t ck = cfg.gmsa.group_channels[k];
      const std::uint64_t M2 = std::uint64_t(cfg.gmsa.window_sizes[k]) * cfg.gmsa.window_sizes[k];
      value.macs += C * ck * HWp;
      value.params += detail::conv_params(ck, C, 1) + 2 * ck;
      apply.macs += M2 * HWp * ck;
      if (computes) {
        theta.macs += C * ck * HWp;
        theta.params += detail::conv_params(ck, C, 1) + 2 * ck;
        scores.macs += M2 * HWp * ck;
      }
    }
  }
  FlopsReport r;
  r.entries = {head, local, theta, value, scores, apply, merge, tail};
  for (const auto& e : r.entries) {
    r.total_macs += e.macs;
    r.total_params += e.params;
  }
  r.stored_scalars = count_params(cfg);
  r.attention_core_macs = scores.macs + apply.macs;
  r.score_path_macs = theta.macs + scores.macs;
  r.attention_path_macs = theta.macs + value.macs + scores.macs + apply.macs;
  r.lr_height = height;
  r.lr_width = width;
  r.padded_height = pad.padded_height;
  r.padded_width = pad.padded_width;
  return r;
}

/// Attention-core MACs of one GMSA with equal channel groups: (2/K)(sum M_k^2) H W C.
inline std::uint64_t gmsa_core_macs_formula(const std::vector<std::size_t>& windows, std::size_t height,
                                            std::size_t width, std::size_t channels) {
  std::uint64_t sum_m2 = 0;
  for (auto m : windows) sum_m2 += std::uint64_t(m) * m;
  return 2 * sum_m2 * height * width * channels / windows.size();
}

}  // namespace elan
