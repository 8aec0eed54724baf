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

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "elan/data.hpp"
#include "elan/network.hpp"

namespace elan {

/// Mean absolute difference over every element of the batch.
template <class T>
T l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("l1_loss: prediction " + pred.shape().str() + " vs target " + target.shape().str());
  }
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(double(pred[i]) - double(target[i]));
  return static_cast<T>(s / double(pred.size()));
}

template <class T>
Var<T> l1_loss(Tape<T>& tape, const Var<T>& pred, const Tensor<T>& target) {
  const T loss = l1_loss(pred.value(), target);
  return tape.record(Tensor<T>(Shape{1, 1, 1, 1}, loss), {pred}, [pn = pred.node(), target](Node<T>& self) {
    auto gp = adjoint(pn);
    const T g = self.value.grad()[0] / T(target.size());
    for (std::size_t i = 0; i < gp.size(); ++i) {
      const T d = pn->value[i] - target[i];
      gp[i] += d > T(0) ? g : (d < T(0) ? -g : T(0));
    }
  });
}

/// Adam hyperparameters and moment buffers.
template <class T>
struct AdamState {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

/// One bias-corrected Adam update of every parameter in place.
template <class T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state belongs to another parameter set");
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = *params[k];
    const Tensor<T>& g = grads[k];
    if (g.shape() != p.shape() || state.m[k].shape() != p.shape()) {
      throw ShapeError("adam_step: gradient " + g.shape().str() + " does not match parameter " + p.shape().str());
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double m = state.beta1 * double(state.m[k][i]) + (1.0 - state.beta1) * gi;
      const double v = state.beta2 * double(state.v[k][i]) + (1.0 - state.beta2) * gi * gi;
      state.m[k][i] = static_cast<T>(m);
      state.v[k][i] = static_cast<T>(v);
      const double mhat = m / bc1, vhat = v / bc2;
      p[i] = static_cast<T>(double(p[i]) - state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

/// Step learning-rate schedule over epochs.
struct Schedule {
  double base_lr = 2e-4;
  std::vector<std::size_t> milestones{250, 400, 425, 450, 475};
  double factor = 0.5;
};

/// base_lr * factor^(milestones reached by `epoch`).
inline double lr_at(const Schedule& s, std::size_t epoch) {
  for (std::size_t i = 1; i < s.milestones.size(); ++i) {
    if (s.milestones[i] <= s.milestones[i - 1]) throw ConfigError("schedule milestones must be strictly increasing");
  }
  double lr = s.base_lr;
  for (std::size_t m : s.milestones) {
    if (epoch >= m) lr *= s.factor;
  }
  return lr;
}

/// Trainable tensors in checkpoint order.
template <class T>
std::vector<Tensor<T>*> trainable_tensors(ElanWeights<T>& w) {
  std::vector<Tensor<T>*> out;
  for_each_tensor(w, [&](const std::string&, Tensor<T>& t, bool trainable) {
    if (trainable) out.push_back(&t);
  });
  return out;
}

struct TrainOptions {
  double lr = 2e-4;
  std::size_t batch_size = 1;
  bool augment = false;
};

template <class T>
struct TrainResult {
  std::vector<double> losses;  // loss of each step, measured before its update
  ElanWeights<T> weights;
};

/// Desk-scale training loop: build from `seed`, then `steps` Adam updates on L1 loss.
/// `on_step(step, loss)` is called after each step when provided.
template <class T>
TrainResult<T> train_toy(const ElanConfig& cfg, const std::vector<PatchPair<T>>& pairs, std::size_t steps,
                         std::uint64_t seed, const TrainOptions& opt = {},
                         const std::function<void(std::size_t, double)>& on_step = {}) {
  if (pairs.empty()) throw Error("train_toy: no training pairs");
  if (opt.batch_size == 0) throw ConfigError("train_toy: batch size must be positive");
  TrainResult<T> result{{}, build<T>(cfg, seed)};
  auto params = trainable_tensors(result.weights);
  AdamState<T> adam;
  adam.lr = opt.lr;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
  std::uniform_int_distribution<int> pick_aug(0, 7);

  const Shape lr_shape = pairs.front().lr.shape();
  const Shape hr_shape = pairs.front().hr.shape();
  for (std::size_t step = 0; step < steps; ++step) {
    Tensor<T> lr(Shape{opt.batch_size, 3, lr_shape.h, lr_shape.w});
    Tensor<T> hr(Shape{opt.batch_size, 3, hr_shape.h, hr_shape.w});
    for (std::size_t b = 0; b < opt.batch_size; ++b) {
      const std::size_t idx = pairs.size() == 1 ? 0 : pick(rng);
      PatchPair<T> pair = pairs[idx];
      if (opt.augment) {
        const int a = pick_aug(rng);
        pair = augment(pair, (a % 4) * 90, a >= 4);
      }
      if (pair.lr.shape() != Shape{1, 3, lr_shape.h, lr_shape.w} || pair.hr.shape() != Shape{1, 3, hr_shape.h, hr_shape.w}) {
        throw ShapeError("train_toy: all pairs must share one patch size");
      }
      std::copy(pair.lr.data().begin(), pair.lr.data().end(), lr.plane(b, 0));
      std::copy(pair.hr.data().begin(), pair.hr.data().end(), hr.plane(b, 0));
    }
    Tape<T> tape;
    auto pred = forward(tape, result.weights, cfg, tape.constant(std::move(lr)), true);
    auto loss = l1_loss(tape, pred, hr);
    tape.backward(loss);
    std::vector<Tensor<T>> grads;
    grads.reserve(params.size());
    for (auto* p : params) grads.push_back(tape.gradient(*p));
    adam_step(params, grads, adam);
    result.losses.push_back(double(loss.value()[0]));
    if (on_step) on_step(step, result.losses.back());
  }
  return result;
}

}  // namespace elan
