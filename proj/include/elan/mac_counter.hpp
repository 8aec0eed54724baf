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

#include <cstdint>

namespace elan {

/// Multiply-accumulate totals observed while a ScopedMacCounter is active.
/// Only forward kernels report; backward passes are not counted.
struct MacCounts {
  std::uint64_t conv = 0;    // every convolution, 1x1 and 3x3
  std::uint64_t matmul = 0;  // batched matrix products (attention core)
  std::uint64_t score_path = 0;  // subset of the above spent inside ScorePathRegion


  std::uint64_t total() const { return conv + matmul; }
};

namespace detail {
inline thread_local MacCounts* active_mac_counter = nullptr;
inline thread_local int score_path_depth = 0;

inline void count_conv_macs(std::uint64_t macs) {
  if (!active_mac_counter) return;
  active_mac_counter->conv += macs;
  if (score_path_depth > 0) active_mac_counter->score_path += macs;
}
inline void count_matmul_macs(std::uint64_t macs) {
  if (!active_mac_counter) return;
  active_mac_counter->matmul += macs;
  if (score_path_depth > 0) active_mac_counter->score_path += macs;
}
}  // namespace detail

/// Marks work that only exists to produce attention scores (query/key projection, q k^T).
class ScorePathRegion {
 public:
  ScorePathRegion() { ++detail::score_path_depth; }
  ~ScorePathRegion() { --detail::score_path_depth; }
  ScorePathRegion(const ScorePathRegion&) = delete;
  ScorePathRegion& operator=(const ScorePathRegion&) = delete;
};

/// Installs a counter for the current thread; nests by restoring the previous one.
class ScopedMacCounter {
 public:
  ScopedMacCounter() : previous_(detail::active_mac_counter) { detail::active_mac_counter = &counts_; }
  ~ScopedMacCounter() { detail::active_mac_counter = previous_; }
  ScopedMacCounter(const ScopedMacCounter&) = delete;
  ScopedMacCounter& operator=(const ScopedMacCounter&) = delete;

  const MacCounts& counts() const { return counts_; }
  void reset() { counts_ = {}; }

 private:
  MacCounts counts_;
  MacCounts* previous_;
};

}  // namespace elan
