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

// Reverse-mode differentiation over an explicit tape.
//
// A Tape records every operation whose inputs require gradients, in creation
// order. backward() walks the record in reverse and accumulates adjoints into
// each node's gradient buffer. A tape constructed with recording disabled
// keeps nothing alive: intermediate values are released as soon as their Var
// handles go out of scope, which is what inference wants.

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "elan/tensor.hpp"

namespace elan {

template <class T>
struct Node {
  Tensor<T> value;  // value.grad() holds the adjoint
  std::function<void(Node&)> backward;
  bool requires_grad = false;
};

/// Handle to a value produced on a Tape.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  /// Accumulated adjoint; zeros when backward never reached this value.
  Tensor<T> grad() const { return node_->value.grad_tensor(); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Node<T>&)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) { return make(std::move(value), false); }

  /// A leaf whose gradient is wanted (only when recording).
  Var<T> variable(Tensor<T> value) { return make(std::move(value), recording_); }

  /// A leaf mirroring a parameter; gradient() retrieves its adjoint by address.
  Var<T> param(const Tensor<T>& p) {
    Var<T> v = make(p, recording_ && params_trainable_);
    if (v.requires_grad()) sources_[&p].push_back(v.node());
    return v;
  }

  /// When false, param() leaves are treated as constants (input-only gradients).
  void set_params_trainable(bool trainable) { params_trainable_ = trainable; }

  /// Records an op result. The closure runs during backward() only if some input required gradients.
  Var<T> record(Tensor<T> value, std::initializer_list<std::reference_wrapper<const Var<T>>> inputs,
                BackwardFn backward) {
    bool rg = false;
    for (const Var<T>& in : inputs) rg = rg || in.requires_grad();
    return record_if(std::move(value), rg, std::move(backward));
  }

  Var<T> record_if(Tensor<T> value, bool any_input_requires_grad, BackwardFn backward) {
    const bool rg = recording_ && any_input_requires_grad;
    Var<T> v = make(std::move(value), rg);
    if (rg) v.node()->backward = std::move(backward);
    return v;
  }

  void backward(const Var<T>& loss) {
    if (loss.value().size() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " + loss.shape().str());
    }
    if (!loss.requires_grad()) {
      throw Error("backward on a value that does not depend on any recorded variable");
    }
    loss.node()->value.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& node = **it;
      if (node.backward && node.value.has_grad()) node.backward(node);
    }
  }

  /// Sum of adjoints of every leaf created from `p` by param().
  Tensor<T> gradient(const Tensor<T>& p) const {
    Tensor<T> g(p.shape());
    auto it = sources_.find(&p);
    if (it == sources_.end()) return g;
    for (const auto& node : it->second) {
      if (!node->value.has_grad()) continue;
      auto src = node->value.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
    }
    return g;
  }

  void reset() {
    nodes_.clear();
    sources_.clear();
  }

 private:
  Var<T> make(Tensor<T> value, bool requires_grad) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    if (requires_grad) nodes_.push_back(node);
    return Var<T>(std::move(node));
  }

  bool recording_;
  bool params_trainable_ = true;
  std::vector<std::shared_ptr<Node<T>>> nodes_;
  std::unordered_map<const Tensor<T>*, std::vector<std::shared_ptr<Node<T>>>> sources_;
};

/// Adjoint buffer of an input node, or nullptr if it does not take gradients.
template <class T>
std::span<T> adjoint(const std::shared_ptr<Node<T>>& node) {
  if (!node->requires_grad) return {};
  return node->value.grad();
}

}  // namespace elan
