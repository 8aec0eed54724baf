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

// Differentiable tensor operations. Each op comes in two flavours: a Var
// overload that records onto a Tape, and a plain Tensor overload that runs
// the same forward kernel without any bookkeeping.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "elan/autograd.hpp"
#include "elan/mac_counter.hpp"
#include "elan/tensor.hpp"

namespace elan {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class T>
void check_conv(const Shape& x, const ConvParams<T>& p) {
  require(p.kernel() == 1 || p.kernel() == 3, "conv2d: kernel must be 1x1 or 3x3");
  require(p.bias.size() == p.out_channels(), "conv2d: bias length does not match out_channels");
  if (x.c != p.in_channels()) {
    throw ShapeError("conv2d: input shape " + x.str() + " does not match weight shape " +
                     p.weight.shape().str());
  }
}

// Same-padding, stride-1 convolution with zero padding.
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const std::size_t N = x.n(), Ci = x.c(), H = x.h(), W = x.w();
  const std::size_t Co = weight.n(), K = weight.h();
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K / 2);
  Tensor<T> out(N, Co, H, W);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < Co; ++o) {
      T* dst = out.plane(n, o);
      std::fill(dst, dst + H * W, bias[o]);
      for (std::size_t i = 0; i < Ci; ++i) {
        const T* src = x.plane(n, i);
        const T* wk = &weight[(o * Ci + i) * K * K];
        if (K == 1) {
          const T wv = wk[0];
          for (std::size_t p = 0; p < H * W; ++p) dst[p] += wv * src[p];
          continue;
        }
        for (std::size_t ky = 0; ky < K; ++ky) {
          for (std::size_t kx = 0; kx < K; ++kx) {
            const T wv = wk[ky * K + kx];
            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
            const std::size_t x0 = dx < 0 ? std::size_t(-dx) : 0;
            const std::size_t x1 = dx > 0 ? W - std::size_t(dx) : W;
            for (std::size_t y = 0; y < H; ++y) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
              T* drow = dst + y * W;
              const T* srow = src + std::size_t(sy) * W;
              for (std::size_t xx = x0; xx < x1; ++xx) drow[xx] += wv * srow[std::ptrdiff_t(xx) + dx];
            }
          }
        }
      }
    }
  }
  count_conv_macs(std::uint64_t(N) * Co * Ci * K * K * H * W);
  return out;
}

template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> gout, std::span<T> gx,
                     std::span<T> gw, std::span<T> gb) {
  const std::size_t N = x.n(), Ci = x.c(), H = x.h(), W = x.w();
  const std::size_t Co = weight.n(), K = weight.h();
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K / 2);
  const std::size_t HW = H * W;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < Co; ++o) {
      const T* g = gout.data() + (n * Co + o) * HW;
      if (!gb.empty()) {
        T s = 0;
        for (std::size_t p = 0; p < HW; ++p) s += g[p];
        gb[o] += s;
      }
      for (std::size_t i = 0; i < Ci; ++i) {
        const T* src = x.plane(n, i);
        T* gsrc = gx.empty() ? nullptr : gx.data() + (n * Ci + i) * HW;
        const std::size_t wbase = (o * Ci + i) * K * K;
        for (std::size_t ky = 0; ky < K; ++ky) {
          for (std::size_t kx = 0; kx < K; ++kx) {
            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
            const std::size_t x0 = dx < 0 ? std::size_t(-dx) : 0;
            const std::size_t x1 = dx > 0 ? W - std::size_t(dx) : W;
            const T wv = weight[wbase + ky * K + kx];
            T acc = 0;
            for (std::size_t y = 0; y < H; ++y) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
              const T* grow = g + y * W;
              const T* srow = src + std::size_t(sy) * W;
              if (!gw.empty()) {
                for (std::size_t xx = x0; xx < x1; ++xx) acc += grow[xx] * srow[std::ptrdiff_t(xx) + dx];
              }
              if (gsrc) {
                T* gs = gsrc + std::size_t(sy) * W;
                for (std::size_t xx = x0; xx < x1; ++xx) gs[std::ptrdiff_t(xx) + dx] += wv * grow[xx];
              }
            }
            if (!gw.empty()) gw[wbase + ky * K + kx] += acc;
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  detail::check_conv(x.shape(), p);
  return detail::conv2d_forward(x, p.weight, p.bias);
}

template <class T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  detail::require(weight.shape().h == weight.shape().w && (weight.shape().h == 1 || weight.shape().h == 3),
                  "conv2d: kernel must be 1x1 or 3x3");
  if (x.shape().c != weight.shape().c) {
    throw ShapeError("conv2d: input shape " + x.shape().str() + " does not match weight shape " +
                     weight.shape().str());
  }
  detail::require(bias.value().size() == weight.shape().n, "conv2d: bias length does not match out_channels");
  auto out = detail::conv2d_forward(x.value(), weight.value(), bias.value());
  return tape.record(std::move(out), {x, weight, bias},
                     [xn = x.node(), wn = weight.node(), bn = bias.node()](Node<T>& self) {
                       detail::conv2d_backward<T>(xn->value, wn->value, self.value.grad(), adjoint(xn),
                                                  adjoint(wn), adjoint(bn));
                     });
}

template <class T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const ConvParams<T>& p) {
  detail::check_conv(x.shape(), p);
  return conv2d(tape, x, tape.param(p.weight), tape.param(p.bias));
}

// ---------------------------------------------------------------------------
// elementwise

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

template <class T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  return tape.record(relu(x.value()), {x}, [xn = x.node()](Node<T>& self) {
    auto gx = adjoint(xn);
    auto g = self.value.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xn->value[i] > T(0)) gx[i] += g[i];
    }
  });
}

template <class T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes " + a.shape().str() + " and " + b.shape().str() + " differ");
  }
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return tape.record(std::move(out), {a, b}, [an = a.node(), bn = b.node()](Node<T>& self) {
    auto g = self.value.grad();
    for (auto gi : {adjoint(an), adjoint(bn)}) {
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
    }
  });
}

template <class T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * x.value()[i];
  return tape.record(std::move(out), {x}, [xn = x.node(), factor](Node<T>& self) {
    auto gx = adjoint(xn);
    auto g = self.value.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * g[i];
  });
}

/// Sum of all elements as a (1,1,1,1) tensor.
template <class T>
Var<T> sum(Tape<T>& tape, const Var<T>& x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  return tape.record(Tensor<T>(Shape{1, 1, 1, 1}, s), {x}, [xn = x.node()](Node<T>& self) {
    auto gx = adjoint(xn);
    const T g = self.value.grad()[0];
    for (auto& v : gx) v += g;
  });
}

/// Elementwise product with a fixed tensor. Used for weighted-sum losses in tests.
template <class T>
Var<T> weighted_sum(Tape<T>& tape, const Var<T>& x, const Tensor<T>& weights) {
  detail::require(weights.shape() == x.shape(), "weighted_sum: shape mismatch");
  T s = 0;
  for (std::size_t i = 0; i < x.value().size(); ++i) s += weights[i] * x.value()[i];
  return tape.record(Tensor<T>(Shape{1, 1, 1, 1}, s), {x}, [xn = x.node(), weights](Node<T>& self) {
    auto gx = adjoint(xn);
    const T g = self.value.grad()[0];
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * weights[i];
  });
}

// ---------------------------------------------------------------------------
// batch normalization

namespace detail {

template <class T>
void check_bn(const Shape& x, const BnParams<T>& p) {
  if (x.c != p.channels()) {
    throw ShapeError("batch_norm: input shape " + x.str() + " has " + std::to_string(x.c) +
                     " channels, parameters have " + std::to_string(p.channels()));
  }
}

template <class T>
struct BnForward {
  Tensor<T> out;
  Tensor<T> normalized;          // x_hat
  std::vector<T> inv_std;        // per channel
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // biased
};

template <class T>
BnForward<T> bn_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, const BnParams<T>& p,
                        bool training) {
  const std::size_t N = x.n(), C = x.c(), HW = x.h() * x.w();
  BnForward<T> r{Tensor<T>(x.shape()), Tensor<T>(x.shape()), std::vector<T>(C), std::vector<double>(C),
                 std::vector<double>(C)};
  const double count = double(N * HW);
  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (training) {
      double s = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = x.plane(n, c);
        for (std::size_t i = 0; i < HW; ++i) s += src[i];
      }
      mean = s / count;
      double v = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = x.plane(n, c);
        for (std::size_t i = 0; i < HW; ++i) v += (src[i] - mean) * (src[i] - mean);
      }
      var = v / count;
    } else {
      mean = p.running_mean[c];
      var = p.running_var[c];
    }
    r.batch_mean[c] = mean;
    r.batch_var[c] = var;
    const T istd = static_cast<T>(1.0 / std::sqrt(var + p.epsilon));
    r.inv_std[c] = istd;
    const T m = static_cast<T>(mean);
    for (std::size_t n = 0; n < N; ++n) {
      const T* src = x.plane(n, c);
      T* xh = r.normalized.plane(n, c);
      T* dst = r.out.plane(n, c);
      for (std::size_t i = 0; i < HW; ++i) {
        xh[i] = (src[i] - m) * istd;
        dst[i] = gamma[c] * xh[i] + beta[c];
      }
    }
  }
  return r;
}

template <class T>
void bn_update_running(BnParams<T>& p, const BnForward<T>& f, std::size_t count) {
  const double m = p.momentum;
  for (std::size_t c = 0; c < p.channels(); ++c) {
    const double unbiased = count > 1 ? f.batch_var[c] * double(count) / double(count - 1) : f.batch_var[c];
    p.running_mean[c] = static_cast<T>((1 - m) * p.running_mean[c] + m * f.batch_mean[c]);
    p.running_var[c] = static_cast<T>((1 - m) * p.running_var[c] + m * unbiased);
  }
}

template <class T>
Var<T> bn_record(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BnForward<T> f,
                 bool training) {
  auto out = std::move(f.out);
  return tape.record(
      std::move(out), {x, gamma, beta},
      [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(f.normalized),
       istd = std::move(f.inv_std), training](Node<T>& self) {
        auto g = self.value.grad();
        auto gx = adjoint(xn);
        auto gg = adjoint(gn);
        auto gb = adjoint(bn);
        const Shape s = xhat.shape();
        const std::size_t HW = s.h * s.w;
        const T count = T(s.n * HW);
        for (std::size_t c = 0; c < s.c; ++c) {
          T sum_g = 0, sum_gx = 0;
          for (std::size_t n = 0; n < s.n; ++n) {
            const std::size_t base = (n * s.c + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sum_g += g[base + i];
              sum_gx += g[base + i] * xhat[base + i];
            }
          }
          if (!gg.empty()) gg[c] += sum_gx;
          if (!gb.empty()) gb[c] += sum_g;
          if (gx.empty()) continue;
          const T gam = gn->value[c];
          const T k = gam * istd[c];
          for (std::size_t n = 0; n < s.n; ++n) {
            const std::size_t base = (n * s.c + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              if (training) {
                gx[base + i] += k * (g[base + i] - sum_g / count - xhat[base + i] * sum_gx / count);
              } else {
                gx[base + i] += k * g[base + i];
              }
            }
          }
        }
      });
}

}  // namespace detail

/// Inference mode uses running statistics; training mode normalizes by batch
/// statistics over (N, H, W) and leaves `p` untouched.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const BnParams<T>& p, bool training) {
  detail::check_bn(x.shape(), p);
  return detail::bn_forward(x, p.gamma, p.beta, p, training).out;
}

/// Training mode also folds the batch statistics into the running averages.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, BnParams<T>& p, bool training) {
  detail::check_bn(x.shape(), p);
  auto f = detail::bn_forward(x, p.gamma, p.beta, p, training);
  if (training) detail::bn_update_running(p, f, x.n() * x.h() * x.w());
  return std::move(f.out);
}

template <class T>
Var<T> batch_norm(Tape<T>& tape, const Var<T>& x, const BnParams<T>& p, bool training) {
  detail::check_bn(x.shape(), p);
  auto f = detail::bn_forward(x.value(), p.gamma, p.beta, p, training);
  return detail::bn_record(tape, x, tape.param(p.gamma), tape.param(p.beta), std::move(f), training);
}

template <class T>
Var<T> batch_norm(Tape<T>& tape, const Var<T>& x, BnParams<T>& p, bool training) {
  detail::check_bn(x.shape(), p);
  auto f = detail::bn_forward(x.value(), p.gamma, p.beta, p, training);
  if (training) detail::bn_update_running(p, f, x.shape().n * x.shape().h * x.shape().w);
  return detail::bn_record(tape, x, tape.param(p.gamma), tape.param(p.beta), std::move(f), training);
}

/// Absorbs inference-mode batch norm into the preceding convolution.
template <class T>
ConvParams<T> fold_bn_into_conv(const ConvParams<T>& conv, const BnParams<T>& bn) {
  if (bn.channels() != conv.out_channels()) {
    throw ShapeError("fold_bn_into_conv: batch norm has " + std::to_string(bn.channels()) +
                     " channels, convolution produces " + std::to_string(conv.out_channels()));
  }
  ConvParams<T> out = conv;
  const std::size_t per_out = conv.in_channels() * conv.kernel() * conv.kernel();
  for (std::size_t o = 0; o < conv.out_channels(); ++o) {
    const double s = double(bn.gamma[o]) / std::sqrt(double(bn.running_var[o]) + bn.epsilon);
    for (std::size_t j = 0; j < per_out; ++j) {
      out.weight[o * per_out + j] = static_cast<T>(double(conv.weight[o * per_out + j]) * s);
    }
    out.bias[o] = static_cast<T>((double(conv.bias[o]) - double(bn.running_mean[o])) * s + double(bn.beta[o]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax over the last axis (W) of every row

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x, T scale = T(1)) {
  Tensor<T> out(x.shape());
  const std::size_t cols = x.w();
  const std::size_t rows = cols == 0 ? 0 : x.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.ptr() + r * cols;
    T* dst = out.ptr() + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, scale * src[j]);
    T s = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      dst[j] = std::exp(scale * src[j] - mx);
      s += dst[j];
    }
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < cols; ++j) dst[j] *= inv;
  }
  return out;
}

template <class T>
Var<T> softmax_rows(Tape<T>& tape, const Var<T>& x, T scale = T(1)) {
  return tape.record(softmax_rows(x.value(), scale), {x}, [xn = x.node(), scale](Node<T>& self) {
    auto gx = adjoint(xn);
    auto g = self.value.grad();
    const Tensor<T>& y = self.value;
    const std::size_t cols = y.w();
    const std::size_t rows = y.size() / cols;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * cols;
      T dot = 0;
      for (std::size_t j = 0; j < cols; ++j) dot += g[base + j] * y[base + j];
      for (std::size_t j = 0; j < cols; ++j) gx[base + j] += scale * y[base + j] * (g[base + j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// batched matrix product on (B, 1, rows, cols) tensors

enum class Transpose { none, second };

namespace detail {

// c[b] (+)= a[b] * op(b[b]); op is identity or transpose.
template <class T>
void gemm_batch(const T* a, const T* b, T* c, std::size_t B, std::size_t m, std::size_t k, std::size_t n,
                bool b_transposed, bool accumulate) {
  for (std::size_t bi = 0; bi < B; ++bi) {
    const T* A = a + bi * m * k;
    const T* Bm = b + bi * k * n;
    T* Cm = c + bi * m * n;
    if (!accumulate) std::fill(Cm, Cm + m * n, T(0));
    if (b_transposed) {
      // B stored as (n, k)
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          T s = 0;
          for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * Bm[j * k + p];
          Cm[i * n + j] += s;
        }
      }
    } else {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const T av = A[i * k + p];
          const T* brow = Bm + p * n;
          T* crow = Cm + i * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, Transpose tb = Transpose::none) {
  const bool tr = tb == Transpose::second;
  const std::size_t B = a.n(), m = a.h(), k = a.w();
  const std::size_t bk = tr ? b.w() : b.h();
  const std::size_t n = tr ? b.h() : b.w();
  if (a.c() != 1 || b.c() != 1 || b.n() != B || bk != k) {
    throw ShapeError("batched_matmul: incompatible shapes " + a.shape().str() + " and " + b.shape().str() +
                     (tr ? " (second transposed)" : ""));
  }
  Tensor<T> out(B, 1, m, n);
  detail::gemm_batch(a.ptr(), b.ptr(), out.ptr(), B, m, k, n, tr, false);
  detail::count_matmul_macs(std::uint64_t(B) * m * k * n);
  return out;
}

template <class T>
Var<T> batched_matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b, Transpose tb = Transpose::none) {
  auto out = batched_matmul(a.value(), b.value(), tb);
  return tape.record(std::move(out), {a, b}, [an = a.node(), bn = b.node(), tb](Node<T>& self) {
    const Tensor<T>& A = an->value;
    const Tensor<T>& Bt = bn->value;
    const std::size_t B = A.n(), m = A.h(), k = A.w();
    const bool tr = tb == Transpose::second;
    const std::size_t n = tr ? Bt.h() : Bt.w();
    auto g = self.value.grad();
    auto ga = adjoint(an);
    auto gb = adjoint(bn);
    for (std::size_t bi = 0; bi < B; ++bi) {
      const T* G = g.data() + bi * m * n;
      const T* Am = A.ptr() + bi * m * k;
      const T* Bm = Bt.ptr() + bi * k * n;
      if (!ga.empty()) {
        T* GA = ga.data() + bi * m * k;
        // dA = G * op(B)^T
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const T gv = G[i * n + j];
            if (tr) {
              for (std::size_t p = 0; p < k; ++p) GA[i * k + p] += gv * Bm[j * k + p];
            } else {
              for (std::size_t p = 0; p < k; ++p) GA[i * k + p] += gv * Bm[p * n + j];
            }
          }
        }
      }
      if (!gb.empty()) {
        T* GB = gb.data() + bi * k * n;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const T gv = G[i * n + j];
            if (tr) {
              // C = A B^T, B is (n, k): dB[j, p] += G[i, j] A[i, p]
              for (std::size_t p = 0; p < k; ++p) GB[j * k + p] += gv * Am[i * k + p];
            } else {
              for (std::size_t p = 0; p < k; ++p) GB[p * n + j] += gv * Am[i * k + p];
            }
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Index-map ops. out[i] = in[map[i]], or 0 where map[i] < 0. Backward scatters.

using IndexMap = std::vector<std::ptrdiff_t>;

template <class T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape, const IndexMap& map) {
  detail::require(map.size() == out_shape.size(), "gather: index map does not match output shape");
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = map[i] < 0 ? T(0) : x[std::size_t(map[i])];
  return out;
}

template <class T>
Var<T> gather(Tape<T>& tape, const Var<T>& x, Shape out_shape, IndexMap map) {
  auto out = gather(x.value(), out_shape, map);
  return tape.record(std::move(out), {x}, [xn = x.node(), map = std::move(map)](Node<T>& self) {
    auto gx = adjoint(xn);
    auto g = self.value.grad();
    for (std::size_t i = 0; i < map.size(); ++i) {
      if (map[i] >= 0) gx[std::size_t(map[i])] += g[i];
    }
  });
}

/// Channel range [begin, begin + count).
inline IndexMap channel_slice_map(const Shape& s, std::size_t begin, std::size_t count) {
  detail::require(begin + count <= s.c, "channel slice out of range for shape " + s.str());
  IndexMap map;
  map.reserve(s.n * count * s.plane());
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = begin; c < begin + count; ++c) {
      const std::size_t base = (n * s.c + c) * s.plane();
      for (std::size_t i = 0; i < s.plane(); ++i) map.push_back(std::ptrdiff_t(base + i));
    }
  }
  return map;
}

template <class T>
Var<T> channel_slice(Tape<T>& tape, const Var<T>& x, std::size_t begin, std::size_t count) {
  const Shape s = x.shape();
  return gather(tape, x, Shape{s.n, count, s.h, s.w}, channel_slice_map(s, begin, count));
}

template <class T>
Var<T> concat_channels(Tape<T>& tape, const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_channels: no inputs");
  Shape s = parts.front().shape();
  s.c = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require(p.shape().n == s.n && p.shape().h == s.h && p.shape().w == s.w,
                    "concat_channels: incompatible shape " + p.shape().str());
    s.c += p.shape().c;
    rg = rg || p.requires_grad();
  }
  Tensor<T> out(s);
  std::vector<std::shared_ptr<Node<T>>> nodes;
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    for (std::size_t n = 0; n < s.n; ++n) {
      std::copy_n(p.value().plane(n, 0), p.shape().c * s.plane(), out.plane(n, c0));
    }
    c0 += p.shape().c;
    nodes.push_back(p.node());
  }
  return tape.record_if(std::move(out), rg, [nodes = std::move(nodes)](Node<T>& self) {
    const Shape s = self.value.shape();
    auto g = self.value.grad();
    std::size_t c0 = 0;
    for (const auto& node : nodes) {
      const std::size_t pc = node->value.c();
      auto gp = adjoint(node);
      if (!gp.empty()) {
        for (std::size_t n = 0; n < s.n; ++n) {
          const T* src = g.data() + (n * s.c + c0) * s.plane();
          T* dst = gp.data() + n * pc * s.plane();
          for (std::size_t i = 0; i < pc * s.plane(); ++i) dst[i] += src[i];
        }
      }
      c0 += pc;
    }
  });
}

// ---------------------------------------------------------------------------
// pixel shuffle: (N, C*r*r, H, W) -> (N, C, H*r, W*r)

inline IndexMap pixel_shuffle_map(const Shape& in, std::size_t r) {
  if (r == 0 || in.c % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: channel count " + std::to_string(in.c) + " is not divisible by r^2 = " +
                     std::to_string(r * r));
  }
  const std::size_t C = in.c / (r * r), Ho = in.h * r, Wo = in.w * r;
  IndexMap map(in.size());
  std::size_t i = 0;
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t x = 0; x < Wo; ++x) {
          const std::size_t ic = c * r * r + (y % r) * r + (x % r);
          map[i++] = std::ptrdiff_t(((n * in.c + ic) * in.h + y / r) * in.w + x / r);
        }
  return map;
}

inline Shape pixel_shuffle_shape(const Shape& in, std::size_t r) {
  return Shape{in.n, in.c / (r * r), in.h * r, in.w * r};
}

template <class T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
  auto map = pixel_shuffle_map(x.shape(), r);
  return gather(x, pixel_shuffle_shape(x.shape(), r), map);
}

/// Exact inverse of pixel_shuffle.
template <class T>
Tensor<T> pixel_unshuffle(const Tensor<T>& y, std::size_t r) {
  if (r == 0 || y.h() % r != 0 || y.w() % r != 0) throw ShapeError("pixel_unshuffle: extent not divisible by r");
  const Shape in{y.n(), y.c() * r * r, y.h() / r, y.w() / r};
  auto map = pixel_shuffle_map(in, r);
  Tensor<T> out(in);
  for (std::size_t i = 0; i < map.size(); ++i) out[std::size_t(map[i])] = y[i];
  return out;
}

template <class T>
Var<T> pixel_shuffle(Tape<T>& tape, const Var<T>& x, std::size_t r) {
  return gather(tape, x, pixel_shuffle_shape(x.shape(), r), pixel_shuffle_map(x.shape(), r));
}

}  // namespace elan
