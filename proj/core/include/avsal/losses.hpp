// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "avsal/ops.hpp"

// Training objectives: the saliency KL divergence, the adversarial domain
// classification loss, and their weighted sum.

namespace avsal {

struct LossWeights {
  double saliency = 1.0;
  double audio = 1.0;
  double audio_visual = 1.0;
};

struct LossConfig {
  double epsilon = 1e-7;
  LossWeights weights;

  void validate() const {
    detail::require(epsilon >= 0.0, "LossConfig: epsilon must be >= 0");
    detail::require(weights.saliency >= 0 && weights.audio >= 0 && weights.audio_visual >= 0,
                    "LossConfig: weights must be >= 0");
  }
};

/// KL divergence between the ground-truth map g (already normalized to sum 1,
/// treated as constant) and the prediction p, which is renormalized to sum 1
/// internally:
///
///   L = sum_i g_i * log(eps + g_i / (p_i / sum(p) + eps))
///
/// Terms with g_i == 0 contribute nothing, which keeps eps = 0 well defined.
/// Differentiable w.r.t. p only.
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& p, const Tensor<T>& g, T eps) {
  detail::require(eps >= T(0), "kl_divergence: epsilon must be >= 0");
  detail::require(p.shape() == g.shape(), "kl_divergence: shape mismatch");
  detail::require(!g.requires_grad(), "kl_divergence: ground truth must not require grad");
  const std::int64_t n = p.numel();
  T psum = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    detail::require(p.data()[i] > T(0), "kl_divergence: prediction must be strictly positive");
    psum += p.data()[i];
  }
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    const T gi = g.data()[i];
    if (gi <= T(0)) continue;
    const T u = p.data()[i] / psum + eps;
    acc += gi * std::log(eps + gi / u);
  }
  Tensor<T> out = Tensor<T>::scalar(acc, p.requires_grad());
  detail::check_finite(out, "kl_divergence");
  detail::record(out, [p, g, out, psum, eps, n]() mutable {
    if (!out.has_grad() || !p.requires_grad()) return;
    const T gy = out.grad()[0];
    // dL/dp_j = q_j / S - (sum_i q_i p_i) / S^2, with
    // q_i = dL/d(pn_i) = -g_i^2 / (r_i * u_i^2), u_i = pn_i + eps, r_i = eps + g_i/u_i.
    std::vector<T> q(static_cast<std::size_t>(n), T(0));
    T qdotp = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
      const T gi = g.data()[i];
      if (gi <= T(0)) continue;
      const T u = p.data()[i] / psum + eps;
      const T r = eps + gi / u;
      q[static_cast<std::size_t>(i)] = -gi * gi / (r * u * u);
      qdotp += q[static_cast<std::size_t>(i)] * p.data()[i];
    }
    auto& gp = p.grad();
    for (std::int64_t i = 0; i < n; ++i)
      gp[i] += gy * (q[static_cast<std::size_t>(i)] / psum - qdotp / (psum * psum));
  });
  return out;
}

/// Adversarial domain classification loss for one (source, target) score
/// pair: -log(d_s) - log(1 - d_t). Scores are clamped 1e-7 away from the
/// boundaries of (0,1); the gradient is zero in the clamped region.
namespace detail {
template <typename T>
constexpr T score_clamp_bound() {
  return T(1e-7);
}
template <typename T>
T clamp_score(T v) {
  constexpr T b = score_clamp_bound<T>();
  return std::min(std::max(v, b), T(1) - b);
}
}  // namespace detail

template <typename T>
Tensor<T> domain_loss(const Tensor<T>& d_source, const Tensor<T>& d_target) {
  detail::require(d_source.numel() == 1 && d_target.numel() == 1,
                  "domain_loss: scores must be scalar");
  const T ds = detail::clamp_score(d_source.item());
  const T dt = detail::clamp_score(d_target.item());
  Tensor<T> out = Tensor<T>::scalar(-std::log(ds) - std::log(T(1) - dt),
                                    d_source.requires_grad() || d_target.requires_grad());
  detail::check_finite(out, "domain_loss");
  detail::record(out, [d_source, d_target, out]() mutable {
    if (!out.has_grad()) return;
    constexpr T b = detail::score_clamp_bound<T>();
    const T gy = out.grad()[0];
    if (d_source.requires_grad()) {
      const T raw = d_source.item();
      if (raw > b && raw < T(1) - b) d_source.grad()[0] += gy * (-T(1) / raw);
    }
    if (d_target.requires_grad()) {
      const T raw = d_target.item();
      if (raw > b && raw < T(1) - b) d_target.grad()[0] += gy * (T(1) / (T(1) - raw));
    }
  });
  return out;
}

/// w_s*L_s + w_A*L_A + w_AV*L_AV. Pass undefined tensors for dropped terms
/// (e.g. L_AV when only the audio discriminator is active).
template <typename T>
Tensor<T> total_loss(const Tensor<T>& l_s, const Tensor<T>& l_a, const Tensor<T>& l_av,
                     const LossWeights& w = {}) {
  Tensor<T> total = scale(l_s, static_cast<T>(w.saliency));
  if (l_a.defined()) total = add(total, scale(l_a, static_cast<T>(w.audio)));
  if (l_av.defined()) total = add(total, scale(l_av, static_cast<T>(w.audio_visual)));
  return total;
}

}  // namespace avsal
