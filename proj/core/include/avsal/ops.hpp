// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <utility>

#include "avsal/tensor.hpp"

// Differentiable tensor primitives. Forward functions validate shapes, raise
// std::invalid_argument on contract violations, and refuse non-finite
// outputs. When a Graph<T> is active and an input requires grad, the matching
// backward closure is recorded; gradient accumulation is always additive.

namespace avsal {

enum class Pad { same, valid };

namespace detail {

template <typename T, typename Fn>
inline void record(const Tensor<T>& out, Fn&& fn) {
  if (out.requires_grad()) {
    if (auto* g = Graph<T>::active()) g->record(std::forward<Fn>(fn));
  }
}

// Output length and low padding for one convolution axis.
inline std::pair<std::int64_t, std::int64_t> conv_dim(std::int64_t in, std::int64_t k,
                                                      std::int64_t s, Pad pad,
                                                      const char* op) {
  require(s >= 1, std::string(op) + ": stride must be >= 1");
  require(k >= 1, std::string(op) + ": kernel dim must be >= 1");
  if (pad == Pad::valid) {
    require(in >= k, std::string(op) + ": kernel larger than input");
    return {(in - k) / s + 1, 0};
  }
  const std::int64_t out = (in + s - 1) / s;
  const std::int64_t total = std::max<std::int64_t>((out - 1) * s + k - in, 0);
  return {out, total / 2};
}

// Range [lo, hi) of output indices o with 0 <= o*s + off < limit.
inline std::pair<std::int64_t, std::int64_t> out_range(std::int64_t limit, std::int64_t s,
                                                       std::int64_t off, std::int64_t out_dim) {
  std::int64_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  std::int64_t hi = (limit - 1 - off) >= 0 ? (limit - 1 - off) / s + 1 : 0;
  hi = std::min(hi, out_dim);
  if (hi < lo) hi = lo;
  return {lo, hi};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape(), a.requires_grad() || b.requires_grad());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  detail::check_finite(out, "add");
  detail::record(out, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    const auto& gy = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape(), a.requires_grad() || b.requires_grad());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  detail::check_finite(out, "sub");
  detail::record(out, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    const auto& gy = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape(), a.requires_grad() || b.requires_grad());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  detail::check_finite(out, "mul");
  detail::record(out, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    const auto& gy = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * a.data()[i];
    }
  });
  return out;
}

/// Multiply by a compile-time-known constant (the scalar case of elementwise).
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape(), a.requires_grad());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  detail::check_finite(out, "scale");
  detail::record(out, [a, out, c]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const auto& gy = out.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * c;
  });
  return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  Tensor<T> out(a.shape(), a.requires_grad());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    detail::require(a.data()[i] > T(0), "log: non-positive input");
    out.data()[i] = std::log(a.data()[i]);
  }
  detail::check_finite(out, "log");
  detail::record(out, [a, out]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const auto& gy = out.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] / a.data()[i];
  });
  return out;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  Tensor<T> out(a.shape(), a.requires_grad());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = std::exp(a.data()[i]);
  detail::check_finite(out, "exp");
  detail::record(out, [a, out]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const auto& gy = out.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * out.data()[i];
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out(a.shape(), a.requires_grad());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  detail::record(out, [a, out]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const auto& gy = out.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < gy.size(); ++i)
      if (a.data()[i] > T(0)) ga[i] += gy[i];
  });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Tensor<T> out(a.shape(), a.requires_grad());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const T x = a.data()[i];
    if (x >= T(0)) {
      out.data()[i] = T(1) / (T(1) + std::exp(-x));
    } else {
      const T e = std::exp(x);
      out.data()[i] = e / (T(1) + e);
    }
  }
  detail::check_finite(out, "sigmoid");
  detail::record(out, [a, out]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const auto& gy = out.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < gy.size(); ++i) {
      const T y = out.data()[i];
      ga[i] += gy[i] * y * (T(1) - y);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last axis, with max subtraction for stability.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  detail::require(a.rank() >= 1, "softmax: rank must be >= 1");
  const std::int64_t cols = a.shape().back();
  const std::int64_t rows = a.numel() / cols;
  Tensor<T> out(a.shape(), a.requires_grad());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = a.data() + r * cols;
    T* yr = out.data() + r * cols;
    T mx = xr[0];
    for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    T sum = T(0);
    for (std::int64_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      sum += yr[c];
    }
    for (std::int64_t c = 0; c < cols; ++c) yr[c] /= sum;
  }
  detail::check_finite(out, "softmax");
  detail::record(out, [a, out, rows, cols]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const auto& gy = out.grad();
    auto& ga = a.grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* yr = out.data() + r * cols;
      const T* gr = gy.data() + r * cols;
      T dot = T(0);
      for (std::int64_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
      for (std::int64_t c = 0; c < cols; ++c) ga[r * cols + c] += yr[c] * (gr[c] - dot);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Gradient reversal: identity forward, -lambda scaling of the gradient.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> grad_reversal(const Tensor<T>& a, T lambda) {
  detail::require(lambda >= T(0), "grad_reversal: negative lambda");
  Tensor<T> out(a.shape(), a.requires_grad());
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  detail::record(out, [a, out, lambda]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const auto& gy = out.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += -lambda * gy[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be 2-D");
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  detail::require(b.dim(0) == k,
                  "matmul: inner dims disagree " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(Shape{m, n}, a.requires_grad() || b.requires_grad());
  for (std::int64_t i = 0; i < m; ++i) {
    T* yrow = out.data() + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = a.data()[i * k + p];
      const T* brow = b.data() + p * n;
      for (std::int64_t j = 0; j < n; ++j) yrow[j] += av * brow[j];
    }
  }
  detail::check_finite(out, "matmul");
  detail::record(out, [a, b, out, m, k, n]() mutable {
    if (!out.has_grad()) return;
    const auto& gy = out.grad();
    if (a.requires_grad()) {  // dA = dY . B^T
      auto& ga = a.grad();
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
          T acc = T(0);
          const T* gr = gy.data() + i * n;
          const T* br = b.data() + p * n;
          for (std::int64_t j = 0; j < n; ++j) acc += gr[j] * br[j];
          ga[i * k + p] += acc;
        }
    }
    if (b.requires_grad()) {  // dB = A^T . dY
      auto& gb = b.grad();
      for (std::int64_t p = 0; p < k; ++p)
        for (std::int64_t i = 0; i < m; ++i) {
          const T av = a.data()[i * k + p];
          const T* gr = gy.data() + i * n;
          T* gbr = gb.data() + p * n;
          for (std::int64_t j = 0; j < n; ++j) gbr[j] += av * gr[j];
        }
    }
  });
  return out;
}

/// x[M,K] . W[K,N] + b[N] (b optional).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b = {}) {
  detail::require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(0),
                  "linear: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  const std::int64_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  bool rg = x.requires_grad() || w.requires_grad();
  if (b) {
    detail::require(b->rank() == 1 && b->dim(0) == n, "linear: bias shape mismatch");
    rg = rg || b->requires_grad();
  }
  Tensor<T> out(Shape{m, n}, rg);
  for (std::int64_t i = 0; i < m; ++i) {
    T* yrow = out.data() + i * n;
    if (b) std::copy(b->data(), b->data() + n, yrow);
    for (std::int64_t p = 0; p < k; ++p) {
      const T xv = x.data()[i * k + p];
      const T* wrow = w.data() + p * n;
      for (std::int64_t j = 0; j < n; ++j) yrow[j] += xv * wrow[j];
    }
  }
  detail::check_finite(out, "linear");
  detail::record(out, [x, w, b, out, m, k, n]() mutable {
    if (!out.has_grad()) return;
    const auto& gy = out.grad();
    if (x.requires_grad()) {
      auto& gx = x.grad();
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
          T acc = T(0);
          const T* gr = gy.data() + i * n;
          const T* wr = w.data() + p * n;
          for (std::int64_t j = 0; j < n; ++j) acc += gr[j] * wr[j];
          gx[i * k + p] += acc;
        }
    }
    if (w.requires_grad()) {
      auto& gw = w.grad();
      for (std::int64_t p = 0; p < k; ++p)
        for (std::int64_t i = 0; i < m; ++i) {
          const T xv = x.data()[i * k + p];
          const T* gr = gy.data() + i * n;
          T* gwr = gw.data() + p * n;
          for (std::int64_t j = 0; j < n; ++j) gwr[j] += xv * gr[j];
        }
    }
    if (b && b->requires_grad()) {
      auto& gb = b->grad();
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) gb[j] += gy[i * n + j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return linear(x, w, std::optional<Tensor<T>>(b));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require(a.rank() == 2, "transpose: operand must be 2-D");
  const std::int64_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out(Shape{n, m}, a.requires_grad());
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
  detail::record(out, [a, out, m, n]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const auto& gy = out.grad();
    auto& ga = a.grad();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) ga[i * n + j] += gy[j * m + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require(shape_numel(shape) == a.numel(),
                  "reshape: cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  Tensor<T> out(std::move(shape), a.requires_grad());
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  detail::record(out, [a, out]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const auto& gy = out.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
  });
  return out;
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& a) {
  return reshape(a, Shape{a.numel()});
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  detail::require(a.rank() == b.rank() && axis < a.rank(), "concat: rank/axis mismatch");
  for (std::size_t i = 0; i < a.rank(); ++i)
    detail::require(i == axis || a.shape()[i] == b.shape()[i],
                    "concat: shapes differ off-axis " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  Shape os = a.shape();
  os[axis] += b.shape()[axis];
  // view both operands as [outer, axis_len, inner]
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
  const std::int64_t la = a.shape()[axis] * inner, lb = b.shape()[axis] * inner;
  Tensor<T> out(os, a.requires_grad() || b.requires_grad());
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy(a.data() + o * la, a.data() + (o + 1) * la, out.data() + o * (la + lb));
    std::copy(b.data() + o * lb, b.data() + (o + 1) * lb, out.data() + o * (la + lb) + la);
  }
  detail::record(out, [a, b, out, outer, la, lb]() mutable {
    if (!out.has_grad()) return;
    const auto& gy = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < la; ++i) ga[o * la + i] += gy[o * (la + lb) + i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < lb; ++i) gb[o * lb + i] += gy[o * (la + lb) + la + i];
    }
  });
  return out;
}

/// Mean over every axis but the first: [C, ...] -> [C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& a) {
  detail::require(a.rank() >= 2, "global_avg_pool: rank must be >= 2");
  const std::int64_t c = a.dim(0);
  const std::int64_t inner = a.numel() / c;
  Tensor<T> out(Shape{c}, a.requires_grad());
  for (std::int64_t i = 0; i < c; ++i) {
    T acc = T(0);
    const T* row = a.data() + i * inner;
    for (std::int64_t j = 0; j < inner; ++j) acc += row[j];
    out.data()[i] = acc / static_cast<T>(inner);
  }
  detail::check_finite(out, "global_avg_pool");
  detail::record(out, [a, out, c, inner]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const auto& gy = out.grad();
    auto& ga = a.grad();
    for (std::int64_t i = 0; i < c; ++i) {
      const T g = gy[i] / static_cast<T>(inner);
      for (std::int64_t j = 0; j < inner; ++j) ga[i * inner + j] += g;
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out(Shape{1}, a.requires_grad());
  T acc = T(0);
  for (const T v : a.values()) acc += v;
  out.data()[0] = acc;
  detail::check_finite(out, "sum");
  detail::record(out, [a, out]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const T g = out.grad()[0];
    auto& ga = a.grad();
    for (auto& v : ga) v += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const T inv = T(1) / static_cast<T>(a.numel());
  return scale(sum(a), inv);
}

/// x[C,H,W] replicated over a new frame axis: -> [C,F,H,W].
template <typename T>
Tensor<T> broadcast_frames(const Tensor<T>& a, std::int64_t frames) {
  detail::require(a.rank() == 3 && frames >= 1, "broadcast_frames: want [C,H,W] and frames >= 1");
  const std::int64_t c = a.dim(0), hw = a.dim(1) * a.dim(2);
  Tensor<T> out(Shape{c, frames, a.dim(1), a.dim(2)}, a.requires_grad());
  for (std::int64_t i = 0; i < c; ++i)
    for (std::int64_t f = 0; f < frames; ++f)
      std::copy(a.data() + i * hw, a.data() + (i + 1) * hw, out.data() + (i * frames + f) * hw);
  detail::record(out, [a, out, c, frames, hw]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const auto& gy = out.grad();
    auto& ga = a.grad();
    for (std::int64_t i = 0; i < c; ++i)
      for (std::int64_t f = 0; f < frames; ++f)
        for (std::int64_t j = 0; j < hw; ++j) ga[i * hw + j] += gy[(i * frames + f) * hw + j];
  });
  return out;
}

/// v[C] replicated to [C,F,H,W].
template <typename T>
Tensor<T> broadcast_volume(const Tensor<T>& v, std::int64_t f, std::int64_t h, std::int64_t w) {
  detail::require(v.rank() == 1, "broadcast_volume: want [C]");
  const std::int64_t c = v.dim(0), inner = f * h * w;
  Tensor<T> out(Shape{c, f, h, w}, v.requires_grad());
  for (std::int64_t i = 0; i < c; ++i)
    std::fill(out.data() + i * inner, out.data() + (i + 1) * inner, v.data()[i]);
  detail::record(out, [v, out, c, inner]() mutable {
    if (!out.has_grad() || !v.requires_grad()) return;
    const auto& gy = out.grad();
    auto& gv = v.grad();
    for (std::int64_t i = 0; i < c; ++i) {
      T acc = T(0);
      for (std::int64_t j = 0; j < inner; ++j) acc += gy[i * inner + j];
      gv[i] += acc;
    }
  });
  return out;
}

/// Per-channel gate: out[c,...] = x[c,...] * g[c].
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& g) {
  detail::require(x.rank() >= 2 && g.rank() == 1 && g.dim(0) == x.dim(0),
                  "channel_scale: gate must be [C] matching x channel dim");
  const std::int64_t c = x.dim(0), inner = x.numel() / c;
  Tensor<T> out(x.shape(), x.requires_grad() || g.requires_grad());
  for (std::int64_t i = 0; i < c; ++i) {
    const T gv = g.data()[i];
    for (std::int64_t j = 0; j < inner; ++j) out.data()[i * inner + j] = x.data()[i * inner + j] * gv;
  }
  detail::check_finite(out, "channel_scale");
  detail::record(out, [x, g, out, c, inner]() mutable {
    if (!out.has_grad()) return;
    const auto& gy = out.grad();
    if (x.requires_grad()) {
      auto& gx = x.grad();
      for (std::int64_t i = 0; i < c; ++i) {
        const T gv = g.data()[i];
        for (std::int64_t j = 0; j < inner; ++j) gx[i * inner + j] += gy[i * inner + j] * gv;
      }
    }
    if (g.requires_grad()) {
      auto& gg = g.grad();
      for (std::int64_t i = 0; i < c; ++i) {
        T acc = T(0);
        for (std::int64_t j = 0; j < inner; ++j) acc += gy[i * inner + j] * x.data()[i * inner + j];
        gg[i] += acc;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions (cross-correlation convention, no kernel flip)
// ---------------------------------------------------------------------------

/// x[C,T] * k[C2,C,kw] -> [C2,T'].
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& k, std::int64_t stride, Pad pad,
                 const std::optional<Tensor<T>>& bias = {}) {
  detail::require(x.rank() == 2 && k.rank() == 3, "conv1d: want x[C,T], k[C2,C,kw]");
  const std::int64_t c = x.dim(0), t = x.dim(1);
  const std::int64_t c2 = k.dim(0), kw = k.dim(2);
  detail::require(k.dim(1) == c, "conv1d: channel mismatch");
  const auto [ot, pw] = detail::conv_dim(t, kw, stride, pad, "conv1d");
  bool rg = x.requires_grad() || k.requires_grad();
  if (bias) {
    detail::require(bias->rank() == 1 && bias->dim(0) == c2, "conv1d: bias shape mismatch");
    rg = rg || bias->requires_grad();
  }
  Tensor<T> out(Shape{c2, ot}, rg);
  for (std::int64_t oc = 0; oc < c2; ++oc) {
    T* yrow = out.data() + oc * ot;
    if (bias) std::fill(yrow, yrow + ot, bias->data()[oc]);
    for (std::int64_t ic = 0; ic < c; ++ic) {
      const T* xrow = x.data() + ic * t;
      for (std::int64_t l = 0; l < kw; ++l) {
        const T wv = k.data()[(oc * c + ic) * kw + l];
        const auto [lo, hi] = detail::out_range(t, stride, l - pw, ot);
        const T* xs = xrow + (l - pw);
        for (std::int64_t o = lo; o < hi; ++o) yrow[o] += wv * xs[o * stride];
      }
    }
  }
  detail::check_finite(out, "conv1d");
  detail::record(out, [x, k, bias, out, c, t, c2, kw, ot, stride, pw]() mutable {
    if (!out.has_grad()) return;
    const auto& gy = out.grad();
    if (bias && bias->requires_grad()) {
      auto& gb = bias->grad();
      for (std::int64_t oc = 0; oc < c2; ++oc) {
        T acc = T(0);
        for (std::int64_t o = 0; o < ot; ++o) acc += gy[oc * ot + o];
        gb[oc] += acc;
      }
    }
    for (std::int64_t oc = 0; oc < c2; ++oc) {
      const T* grow = gy.data() + oc * ot;
      for (std::int64_t ic = 0; ic < c; ++ic) {
        for (std::int64_t l = 0; l < kw; ++l) {
          const auto [lo, hi] = detail::out_range(t, stride, l - pw, ot);
          if (k.requires_grad()) {
            const T* xs = x.data() + ic * t + (l - pw);
            T acc = T(0);
            for (std::int64_t o = lo; o < hi; ++o) acc += grow[o] * xs[o * stride];
            k.grad()[(oc * c + ic) * kw + l] += acc;
          }
          if (x.requires_grad()) {
            const T wv = k.data()[(oc * c + ic) * kw + l];
            T* gxs = x.grad().data() + ic * t + (l - pw);
            for (std::int64_t o = lo; o < hi; ++o) gxs[o * stride] += grow[o] * wv;
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& k, std::int64_t stride, Pad pad,
                 const Tensor<T>& bias) {
  return conv1d(x, k, stride, pad, std::optional<Tensor<T>>(bias));
}

/// x[C,F,H,W] * k[C2,C,kf,kh,kw] -> [C2,F',H',W'].
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& k, std::array<std::int64_t, 3> stride,
                 Pad pad, const std::optional<Tensor<T>>& bias = {}) {
  detail::require(x.rank() == 4 && k.rank() == 5, "conv3d: want x[C,F,H,W], k[C2,C,kf,kh,kw]");
  const std::int64_t c = x.dim(0), f = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t c2 = k.dim(0), kf = k.dim(2), kh = k.dim(3), kw = k.dim(4);
  detail::require(k.dim(1) == c, "conv3d: channel mismatch");
  const auto [of, pf] = detail::conv_dim(f, kf, stride[0], pad, "conv3d");
  const auto [oh, ph] = detail::conv_dim(h, kh, stride[1], pad, "conv3d");
  const auto [ow, pw] = detail::conv_dim(w, kw, stride[2], pad, "conv3d");
  bool rg = x.requires_grad() || k.requires_grad();
  if (bias) {
    detail::require(bias->rank() == 1 && bias->dim(0) == c2, "conv3d: bias shape mismatch");
    rg = rg || bias->requires_grad();
  }
  Tensor<T> out(Shape{c2, of, oh, ow}, rg);
  const std::int64_t sf = stride[0], sh = stride[1], sw = stride[2];
  for (std::int64_t oc = 0; oc < c2; ++oc) {
    T* yplane = out.data() + oc * of * oh * ow;
    if (bias) std::fill(yplane, yplane + of * oh * ow, bias->data()[oc]);
    for (std::int64_t ic = 0; ic < c; ++ic) {
      const T* xch = x.data() + ic * f * h * w;
      for (std::int64_t i = 0; i < kf; ++i) {
        const auto [flo, fhi] = detail::out_range(f, sf, i - pf, of);
        for (std::int64_t j = 0; j < kh; ++j) {
          const auto [hlo, hhi] = detail::out_range(h, sh, j - ph, oh);
          for (std::int64_t l = 0; l < kw; ++l) {
            const T wv = k.data()[(((oc * c + ic) * kf + i) * kh + j) * kw + l];
            const auto [wlo, whi] = detail::out_range(w, sw, l - pw, ow);
            for (std::int64_t a = flo; a < fhi; ++a) {
              const T* xf = xch + (a * sf + i - pf) * h * w;
              T* yf = yplane + a * oh * ow;
              for (std::int64_t b = hlo; b < hhi; ++b) {
                const T* xrow = xf + (b * sh + j - ph) * w + (l - pw);
                T* yrow = yf + b * ow;
                for (std::int64_t d = wlo; d < whi; ++d) yrow[d] += wv * xrow[d * sw];
              }
            }
          }
        }
      }
    }
  }
  detail::check_finite(out, "conv3d");
  detail::record(out, [x, k, bias, out, c, f, h, w, c2, kf, kh, kw, of, oh, ow, sf, sh, sw, pf, ph,
                       pw]() mutable {
    if (!out.has_grad()) return;
    const auto& gy = out.grad();
    if (bias && bias->requires_grad()) {
      auto& gb = bias->grad();
      for (std::int64_t oc = 0; oc < c2; ++oc) {
        T acc = T(0);
        const T* gplane = gy.data() + oc * of * oh * ow;
        for (std::int64_t i = 0; i < of * oh * ow; ++i) acc += gplane[i];
        gb[oc] += acc;
      }
    }
    const bool need_gx = x.requires_grad();
    const bool need_gk = k.requires_grad();
    if (!need_gx && !need_gk) return;
    for (std::int64_t oc = 0; oc < c2; ++oc) {
      const T* gplane = gy.data() + oc * of * oh * ow;
      for (std::int64_t ic = 0; ic < c; ++ic) {
        const T* xch = x.data() + ic * f * h * w;
        T* gxch = need_gx ? x.grad().data() + ic * f * h * w : nullptr;
        for (std::int64_t i = 0; i < kf; ++i) {
          const auto [flo, fhi] = detail::out_range(f, sf, i - pf, of);
          for (std::int64_t j = 0; j < kh; ++j) {
            const auto [hlo, hhi] = detail::out_range(h, sh, j - ph, oh);
            for (std::int64_t l = 0; l < kw; ++l) {
              const auto [wlo, whi] = detail::out_range(w, sw, l - pw, ow);
              const std::int64_t kidx = (((oc * c + ic) * kf + i) * kh + j) * kw + l;
              const T wv = k.data()[kidx];
              T wacc = T(0);
              for (std::int64_t a = flo; a < fhi; ++a) {
                const std::int64_t fi = a * sf + i - pf;
                const T* gf = gplane + a * oh * ow;
                const T* xf = xch + fi * h * w;
                T* gxf = need_gx ? gxch + fi * h * w : nullptr;
                for (std::int64_t b = hlo; b < hhi; ++b) {
                  const std::int64_t hi2 = b * sh + j - ph;
                  const T* grow = gf + b * ow;
                  const T* xrow = xf + hi2 * w + (l - pw);
                  if (need_gk) {
                    T acc = T(0);
                    for (std::int64_t d = wlo; d < whi; ++d) acc += grow[d] * xrow[d * sw];
                    wacc += acc;
                  }
                  if (need_gx) {
                    T* gxrow = gxf + hi2 * w + (l - pw);
                    for (std::int64_t d = wlo; d < whi; ++d) gxrow[d * sw] += grow[d] * wv;
                  }
                }
              }
              if (need_gk) k.grad()[kidx] += wacc;
            }
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& k, std::array<std::int64_t, 3> stride,
                 Pad pad, const Tensor<T>& bias) {
  return conv3d(x, k, stride, pad, std::optional<Tensor<T>>(bias));
}

// ---------------------------------------------------------------------------
// Pooling and interpolation
// ---------------------------------------------------------------------------

/// Max over the frame axis: [C,F,H,W] -> [C,H,W]. Gradient routes to the
/// first maximal frame per location.
template <typename T>
Tensor<T> maxpool_temporal(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "maxpool_temporal: want [C,F,H,W]");
  const std::int64_t c = x.dim(0), f = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{c, x.dim(2), x.dim(3)}, x.requires_grad());
  std::vector<std::int32_t> arg(static_cast<std::size_t>(c * hw), 0);
  for (std::int64_t i = 0; i < c; ++i) {
    const T* xch = x.data() + i * f * hw;
    for (std::int64_t j = 0; j < hw; ++j) {
      T best = xch[j];
      std::int32_t bi = 0;
      for (std::int64_t a = 1; a < f; ++a) {
        const T v = xch[a * hw + j];
        if (v > best) {
          best = v;
          bi = static_cast<std::int32_t>(a);
        }
      }
      out.data()[i * hw + j] = best;
      arg[static_cast<std::size_t>(i * hw + j)] = bi;
    }
  }
  detail::record(out, [x, out, arg = std::move(arg), c, hw]() mutable {
    if (!out.has_grad() || !x.requires_grad()) return;
    const auto& gy = out.grad();
    auto& gx = x.grad();
    const std::int64_t f = x.dim(1);
    for (std::int64_t i = 0; i < c; ++i)
      for (std::int64_t j = 0; j < hw; ++j)
        gx[(i * f + arg[static_cast<std::size_t>(i * hw + j)]) * hw + j] += gy[i * hw + j];
  });
  return out;
}

namespace detail {
template <typename T>
struct LerpTap {
  std::int64_t i0, i1;
  T w1;  // out = (1-w1)*v[i0] + w1*v[i1]
};

template <typename T>
std::vector<LerpTap<T>> lerp_taps(std::int64_t in, std::int64_t out) {
  std::vector<LerpTap<T>> taps(static_cast<std::size_t>(out));
  const double r = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * r - 0.5;  // half-pixel centers
    if (src < 0.0) src = 0.0;
    if (src > static_cast<double>(in - 1)) src = static_cast<double>(in - 1);
    const auto i0 = static_cast<std::int64_t>(src);
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, static_cast<T>(src - static_cast<double>(i0))};
  }
  return taps;
}
}  // namespace detail

/// Trilinear interpolation of [C,F,H,W] to [C,F2,H2,W2], half-pixel centers
/// (align-corners = false). Target dims must not shrink.
template <typename T>
Tensor<T> trilinear_upsample(const Tensor<T>& x, std::array<std::int64_t, 3> target) {
  detail::require(x.rank() == 4, "trilinear_upsample: want [C,F,H,W]");
  const std::int64_t c = x.dim(0), f = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t f2 = target[0], h2 = target[1], w2 = target[2];
  detail::require(f2 >= f && h2 >= h && w2 >= w,
                  "trilinear_upsample: target smaller than source");
  const auto tf = detail::lerp_taps<T>(f, f2);
  const auto th = detail::lerp_taps<T>(h, h2);
  const auto tw = detail::lerp_taps<T>(w, w2);
  Tensor<T> out(Shape{c, f2, h2, w2}, x.requires_grad());
  for (std::int64_t i = 0; i < c; ++i) {
    const T* xch = x.data() + i * f * h * w;
    T* ych = out.data() + i * f2 * h2 * w2;
    for (std::int64_t a = 0; a < f2; ++a) {
      const auto& ta = tf[static_cast<std::size_t>(a)];
      for (std::int64_t b = 0; b < h2; ++b) {
        const auto& tb = th[static_cast<std::size_t>(b)];
        const T* p00 = xch + (ta.i0 * h + tb.i0) * w;
        const T* p01 = xch + (ta.i0 * h + tb.i1) * w;
        const T* p10 = xch + (ta.i1 * h + tb.i0) * w;
        const T* p11 = xch + (ta.i1 * h + tb.i1) * w;
        T* yrow = ych + (a * h2 + b) * w2;
        for (std::int64_t d = 0; d < w2; ++d) {
          const auto& td = tw[static_cast<std::size_t>(d)];
          const T v00 = p00[td.i0] * (T(1) - td.w1) + p00[td.i1] * td.w1;
          const T v01 = p01[td.i0] * (T(1) - td.w1) + p01[td.i1] * td.w1;
          const T v10 = p10[td.i0] * (T(1) - td.w1) + p10[td.i1] * td.w1;
          const T v11 = p11[td.i0] * (T(1) - td.w1) + p11[td.i1] * td.w1;
          const T v0 = v00 * (T(1) - tb.w1) + v01 * tb.w1;
          const T v1 = v10 * (T(1) - tb.w1) + v11 * tb.w1;
          yrow[d] = v0 * (T(1) - ta.w1) + v1 * ta.w1;
        }
      }
    }
  }
  detail::check_finite(out, "trilinear_upsample");
  detail::record(out, [x, out, tf, th, tw, c, f, h, w, f2, h2, w2]() mutable {
    if (!out.has_grad() || !x.requires_grad()) return;
    const auto& gy = out.grad();
    auto& gx = x.grad();
    for (std::int64_t i = 0; i < c; ++i) {
      T* gxch = gx.data() + i * f * h * w;
      const T* gych = gy.data() + i * f2 * h2 * w2;
      for (std::int64_t a = 0; a < f2; ++a) {
        const auto& ta = tf[static_cast<std::size_t>(a)];
        for (std::int64_t b = 0; b < h2; ++b) {
          const auto& tb = th[static_cast<std::size_t>(b)];
          const T* grow = gych + (a * h2 + b) * w2;
          for (std::int64_t d = 0; d < w2; ++d) {
            const auto& td = tw[static_cast<std::size_t>(d)];
            const T g = grow[d];
            for (const auto& [fi, wf] :
                 {std::pair{ta.i0, T(1) - ta.w1}, std::pair{ta.i1, ta.w1}}) {
              if (wf == T(0)) continue;
              for (const auto& [hi2, wh] :
                   {std::pair{tb.i0, T(1) - tb.w1}, std::pair{tb.i1, tb.w1}}) {
                if (wh == T(0)) continue;
                T* gr = gxch + (fi * h + hi2) * w;
                const T gfh = g * wf * wh;
                if (td.w1 != T(0)) gr[td.i1] += gfh * td.w1;
                if (td.w1 != T(1)) gr[td.i0] += gfh * (T(1) - td.w1);
              }
            }
          }
        }
      }
    }
  });
  return out;
}

}  // namespace avsal
