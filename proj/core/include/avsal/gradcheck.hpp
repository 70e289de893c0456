// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "avsal/losses.hpp"
#include "avsal/ops.hpp"
#include "avsal/rng.hpp"

// Central finite-difference verification of backward passes, always in f64.

namespace avsal {

using LossFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

struct GradCheckResult {
  std::string op;
  double max_rel_err = 0.0;
  int trials = 0;
  bool pass(double tol = 1e-4) const { return max_rel_err <= tol; }
};

/// Compares the graph-computed gradient of fn(inputs) against central finite
/// differences over every element of every input, and returns the largest
/// relative error. fn must be a pure function of the input values.
inline double fd_max_rel_err(const LossFn& fn, const std::vector<Tensor<double>>& inputs,
                             double h = 1e-5) {
  for (const auto& t : inputs) detail::require(t.requires_grad(), "fd_max_rel_err: inputs must require grad");
  std::vector<std::vector<double>> analytic;
  {
    for (auto t : inputs) t.zero_grad();
    Graph<double> graph;
    Tensor<double> loss = fn(inputs);
    detail::require(loss.numel() == 1, "fd_max_rel_err: fn must return a scalar");
    graph.backward(loss);
    for (Tensor<double> t : inputs) {
      if (t.has_grad())
        analytic.push_back(t.grad());
      else
        analytic.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    }
  }
  double worst = 0.0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor<double> t = inputs[ti];
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const double saved = t.data()[i];
      t.data()[i] = saved + h;
      const double fplus = fn(inputs).item();
      t.data()[i] = saved - h;
      const double fminus = fn(inputs).item();
      t.data()[i] = saved;
      const double fd = (fplus - fminus) / (2.0 * h);
      const double an = analytic[ti][static_cast<std::size_t>(i)];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

namespace detail {

inline Tensor<double> rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                                  bool rg = true) {
  Tensor<double> t(std::move(shape), rg);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Fixed random probe weights so the scalarized loss exercises every output.
inline Tensor<double> probe_like(const Tensor<double>& out, Rng& rng) {
  Tensor<double> w(out.shape(), false);
  for (auto& v : w.values()) v = rng.uniform(-1.0, 1.0);
  return w;
}

inline Tensor<double> probe_sum(const Tensor<double>& out, const Tensor<double>& probe) {
  return sum(mul(out, probe));
}

}  // namespace detail

/// One seeded finite-difference trial for a named primitive. Shapes are
/// drawn small so a trial costs milliseconds. Throws on unknown names.
inline double gradcheck_trial(const std::string& op, Rng& rng) {
  using detail::probe_like;
  using detail::probe_sum;
  using detail::rand_tensor;

  const auto dim = [&](std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  };

  if (op == "add" || op == "sub" || op == "mul") {
    Shape s{dim(1, 4), dim(1, 5)};
    auto a = rand_tensor(s, rng);
    auto b = rand_tensor(s, rng);
    Tensor<double> probe;
    {
      Tensor<double> tmp(s, false);
      probe = probe_like(tmp, rng);
    }
    return fd_max_rel_err(
        [&](const std::vector<Tensor<double>>& in) {
          if (op == "add") return probe_sum(add(in[0], in[1]), probe);
          if (op == "sub") return probe_sum(sub(in[0], in[1]), probe);
          return probe_sum(mul(in[0], in[1]), probe);
        },
        {a, b});
  }
  if (op == "scale") {
    auto a = rand_tensor({dim(2, 6)}, rng);
    const double c = rng.uniform(-2.0, 2.0);
    Tensor<double> probe;
    {
      Tensor<double> tmp(a.shape(), false);
      probe = probe_like(tmp, rng);
    }
    return fd_max_rel_err(
        [&](const std::vector<Tensor<double>>& in) { return probe_sum(scale(in[0], c), probe); },
        {a});
  }
  if (op == "log") {
    auto a = rand_tensor({dim(2, 6)}, rng, 0.5, 2.0);
    Tensor<double> probe;
    {
      Tensor<double> tmp(a.shape(), false);
      probe = probe_like(tmp, rng);
    }
    return fd_max_rel_err(
        [&](const std::vector<Tensor<double>>& in) { return probe_sum(log(in[0]), probe); }, {a});
  }
  if (op == "exp" || op == "sigmoid" || op == "relu") {
    auto a = rand_tensor({dim(2, 8)}, rng);
    if (op == "relu") {  // keep away from the kink
      for (auto& v : a.values())
        if (std::abs(v) < 0.05) v = v < 0 ? v - 0.1 : v + 0.1;
    }
    Tensor<double> probe;
    {
      Tensor<double> tmp(a.shape(), false);
      probe = probe_like(tmp, rng);
    }
    return fd_max_rel_err(
        [&](const std::vector<Tensor<double>>& in) {
          if (op == "exp") return probe_sum(exp(in[0]), probe);
          if (op == "sigmoid") return probe_sum(sigmoid(in[0]), probe);
          return probe_sum(relu(in[0]), probe);
        },
        {a});
  }
  if (op == "softmax") {
    Shape s{dim(1, 3), dim(2, 5)};
    auto a = rand_tensor(s, rng, -2.0, 2.0);
    Tensor<double> probe;
    {
      Tensor<double> tmp(s, false);
      probe = probe_like(tmp, rng);
    }
    return fd_max_rel_err(
        [&](const std::vector<Tensor<double>>& in) { return probe_sum(softmax(in[0]), probe); },
        {a});
  }
  if (op == "matmul") {
    const std::int64_t m = dim(1, 4), k = dim(1, 4), n = dim(1, 4);
    auto a = rand_tensor({m, k}, rng);
    auto b = rand_tensor({k, n}, rng);
    Tensor<double> probe;
    {
      Tensor<double> tmp({m, n}, false);
      probe = probe_like(tmp, rng);
    }
    return fd_max_rel_err(
        [&](const std::vector<Tensor<double>>& in) { return probe_sum(matmul(in[0], in[1]), probe); },
        {a, b});
  }
  if (op == "linear") {
    const std::int64_t m = dim(1, 4), k = dim(1, 4), n = dim(1, 4);
    auto x = rand_tensor({m, k}, rng);
    auto w = rand_tensor({k, n}, rng);
    auto b = rand_tensor({n}, rng);
    Tensor<double> probe;
    {
      Tensor<double> tmp({m, n}, false);
      probe = probe_like(tmp, rng);
    }
    return fd_max_rel_err(
        [&](const std::vector<Tensor<double>>& in) {
          return probe_sum(linear(in[0], in[1], in[2]), probe);
        },
        {x, w, b});
  }
  if (op == "conv1d") {
    const std::int64_t c = dim(1, 3), t = dim(5, 9), c2 = dim(1, 3), kw = dim(1, 3);
    const std::int64_t stride = dim(1, 2);
    const Pad pad = rng.below(2) ? Pad::same : Pad::valid;
    auto x = rand_tensor({c, t}, rng);
    auto k = rand_tensor({c2, c, kw}, rng);
    auto b = rand_tensor({c2}, rng);
    Tensor<double> probe;
    return fd_max_rel_err(
        [&, pad, stride](const std::vector<Tensor<double>>& in) mutable {
          auto y = conv1d(in[0], in[1], stride, pad, in[2]);
          if (!probe.defined()) {
            Rng prng(rng.next_u64());
            probe = probe_like(y, prng);
          }
          return probe_sum(y, probe);
        },
        {x, k, b});
  }
  if (op == "conv3d") {
    const std::int64_t c = dim(1, 2), f = dim(2, 4), h = dim(3, 5), w = dim(3, 5);
    const std::int64_t c2 = dim(1, 2);
    const std::int64_t kf = dim(1, 2), kh = dim(1, 3), kw = dim(1, 3);
    const std::array<std::int64_t, 3> stride{dim(1, 2), dim(1, 2), dim(1, 2)};
    const Pad pad = rng.below(2) ? Pad::same : Pad::valid;
    auto x = rand_tensor({c, f, h, w}, rng);
    auto k = rand_tensor({c2, c, kf, kh, kw}, rng);
    auto b = rand_tensor({c2}, rng);
    Tensor<double> probe;
    return fd_max_rel_err(
        [&, pad, stride](const std::vector<Tensor<double>>& in) mutable {
          auto y = conv3d(in[0], in[1], stride, pad, in[2]);
          if (!probe.defined()) {
            Rng prng(rng.next_u64());
            probe = probe_like(y, prng);
          }
          return probe_sum(y, probe);
        },
        {x, k, b});
  }
  if (op == "maxpool") {
    const std::int64_t c = dim(1, 2), f = dim(2, 4), h = dim(2, 3), w = dim(2, 3);
    auto x = rand_tensor({c, f, h, w}, rng);
    // separate competitors so finite differences cannot flip the argmax
    const std::int64_t hw = h * w;
    for (std::int64_t i = 0; i < c; ++i)
      for (std::int64_t j = 0; j < hw; ++j)
        for (std::int64_t a = 0; a < f; ++a) x.data()[(i * f + a) * hw + j] += 0.5 * double(a % 3);
    Tensor<double> probe;
    {
      Tensor<double> tmp({c, h, w}, false);
      probe = probe_like(tmp, rng);
    }
    return fd_max_rel_err(
        [&](const std::vector<Tensor<double>>& in) {
          return probe_sum(maxpool_temporal(in[0]), probe);
        },
        {x});
  }
  if (op == "upsample") {
    const std::int64_t c = dim(1, 2), f = dim(1, 3), h = dim(2, 3), w = dim(2, 3);
    const std::array<std::int64_t, 3> target{f + dim(0, 3), h + dim(0, 3), w + dim(0, 3)};
    auto x = rand_tensor({c, f, h, w}, rng);
    Tensor<double> probe;
    {
      Tensor<double> tmp({c, target[0], target[1], target[2]}, false);
      probe = probe_like(tmp, rng);
    }
    return fd_max_rel_err(
        [&, target](const std::vector<Tensor<double>>& in) {
          return probe_sum(trilinear_upsample(in[0], target), probe);
        },
        {x});
  }
  if (op == "grl") {
    auto x = rand_tensor({dim(2, 5)}, rng);
    const double lambda = rng.uniform(0.0, 2.0);
    Tensor<double> probe;
    {
      Tensor<double> tmp(x.shape(), false);
      probe = probe_like(tmp, rng);
    }
    // d/dx of sum(grl(x) * probe) should be -lambda * probe; validate against
    // the analytically scaled finite difference of the non-reversed graph.
    for (auto t : std::vector<Tensor<double>>{x}) t.zero_grad();
    std::vector<Tensor<double>> in{x};
    double worst = 0.0;
    {
      Graph<double> graph;
      auto loss = detail::probe_sum(grad_reversal(in[0], lambda), probe);
      graph.backward(loss);
      for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double an = x.grad()[static_cast<std::size_t>(i)];
        const double expect = -lambda * probe.data()[i];
        const double denom = std::max({std::abs(an), std::abs(expect), 1e-3});
        worst = std::max(worst, std::abs(an - expect) / denom);
      }
    }
    return worst;
  }
  if (op == "kl") {
    const std::int64_t n = dim(4, 10);
    auto p = rand_tensor({n}, rng, 0.1, 1.0);
    Tensor<double> g({n}, false);
    double gsum = 0.0;
    for (auto& v : g.values()) {
      v = rng.below(4) == 0 ? 0.0 : rng.uniform(0.05, 1.0);  // include zero-mass cells
      gsum += v;
    }
    if (gsum == 0.0) {
      g.data()[0] = 1.0;
      gsum = 1.0;
    }
    for (auto& v : g.values()) v /= gsum;
    const double eps = rng.below(2) ? 1e-7 : 1e-3;
    return fd_max_rel_err(
        [&, eps](const std::vector<Tensor<double>>& in) { return kl_divergence(in[0], g, eps); },
        {p});
  }
  if (op == "domain") {
    auto ds = Tensor<double>::scalar(rng.uniform(0.05, 0.95), true);
    auto dt = Tensor<double>::scalar(rng.uniform(0.05, 0.95), true);
    return fd_max_rel_err(
        [&](const std::vector<Tensor<double>>& in) { return domain_loss(in[0], in[1]); },
        {ds, dt});
  }
  throw std::invalid_argument("gradcheck_trial: unknown op '" + op + "'");
}

inline const std::vector<std::string>& gradcheck_op_names() {
  static const std::vector<std::string> names{
      "add",  "sub",     "mul",    "scale",  "log",      "exp",     "relu",
      "sigmoid", "softmax", "matmul", "linear", "conv1d",   "conv3d",  "maxpool",
      "upsample", "grl",   "kl",     "domain"};
  return names;
}

/// Runs `trials` seeded random trials for each selected op ("all" or a name).
inline std::vector<GradCheckResult> run_gradcheck(const std::string& filter = "all",
                                                  int trials = 20, std::uint64_t seed = 20240501) {
  std::vector<GradCheckResult> results;
  for (const auto& name : gradcheck_op_names()) {
    if (filter != "all" && filter != name) continue;
    GradCheckResult r{name, 0.0, trials};
    Rng rng(seed ^ std::hash<std::string>{}(name));
    for (int t = 0; t < trials; ++t) r.max_rel_err = std::max(r.max_rel_err, gradcheck_trial(name, rng));
    results.push_back(r);
  }
  if (results.empty())
    throw std::invalid_argument("run_gradcheck: unknown op filter '" + filter + "'");
  return results;
}

}  // namespace avsal
