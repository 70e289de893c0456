// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "avsal/rng.hpp"

namespace avsal {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
};
}  // namespace detail

/// N-dimensional row-major array participating in a reverse-mode graph.
/// A Tensor is a cheap handle: copies share the underlying buffer. Use
/// clone() for an independent copy. No implicit broadcasting anywhere;
/// every shape change is an explicit op.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : s_(std::make_shared<detail::Storage<T>>()) {
    for (auto d : shape) {
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive dim in " + shape_str(shape));
    }
    s_->shape = std::move(shape);
    s_->values.assign(static_cast<std::size_t>(shape_numel(s_->shape)), T(0));
    s_->requires_grad = requires_grad;
  }

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    if (static_cast<std::int64_t>(data.size()) != t.numel())
      throw std::invalid_argument("Tensor::from_data: buffer length does not match shape");
    t.s_->values = std::move(data);
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    Tensor t(Shape{1}, requires_grad);
    t.s_->values[0] = v;
    return t;
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.s_->values.begin(), t.s_->values.end(), v);
    return t;
  }

  /// Uniform in [-bound, bound), consuming one rng draw per element.
  static Tensor uniform(Shape shape, T bound, Rng& rng, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    for (auto& v : t.s_->values) v = static_cast<T>(rng.uniform(-double(bound), double(bound)));
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::int64_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t rank() const { return s_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(s_->values.size()); }

  // Constness of the handle is shallow (shared_ptr semantics): accessors
  // return mutable views of the shared storage.
  std::vector<T>& values() const { return s_->values; }
  T* data() const { return s_->values.data(); }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor is not scalar");
    return s_->values[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool rg) const { s_->requires_grad = rg; }

  bool has_grad() const { return !s_->grad.empty(); }
  /// Gradient buffer, allocated to zeros on first use.
  std::vector<T>& grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->values.size(), T(0));
    return s_->grad;
  }
  void zero_grad() const {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }

  /// Identity of this tensor's node within a computation graph.
  const void* node_id() const { return s_.get(); }
  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

  Tensor clone() const {
    Tensor t;
    t.s_ = std::make_shared<detail::Storage<T>>(*s_);
    return t;
  }

 private:
  std::shared_ptr<detail::Storage<T>> s_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Ordered record of executed ops. Constructing a Graph makes it the active
/// tape for the current thread; ops whose output requires grad append their
/// backward closure. backward() replays the closures in exact reverse
/// execution order, accumulating additively into .grad buffers. The graph is
/// meant to live for one forward/backward pass and is confined to the thread
/// that built it.
template <typename T>
class Graph {
 public:
  Graph() : prev_(active_) { active_ = this; }
  ~Graph() { active_ = prev_; }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* active() { return active_; }

  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

  std::size_t op_count() const { return ops_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates. Repeated calls without
  /// zeroing grads accumulate.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("Graph::backward: loss must be scalar");
    loss.grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  inline static thread_local Graph* active_ = nullptr;
  Graph* prev_;
  std::vector<std::function<void()>> ops_;
};

namespace detail {

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  for (const T v : t.values()) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string(op) + ": produced non-finite value");
  }
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

}  // namespace avsal
