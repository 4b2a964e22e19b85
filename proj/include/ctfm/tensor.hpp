#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctfm/error.hpp"
#include "ctfm/rng.hpp"

namespace ctfm {

/// Extents, outermost first. Activations are (batch, channels, height, width).
using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty when no gradient has been populated
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major array with an optional gradient buffer.
///
/// A Tensor is a handle: copies share storage, which is what lets a layer's
/// weight be referenced by the layer, the tape and the optimizer at once.
/// Use clone() for an independent deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : impl_(std::make_shared<detail::TensorStorage<T>>()) {
    impl_->data.assign(ctfm::numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values)
      : impl_(std::make_shared<detail::TensorStorage<T>>()) {
    require(values.size() == ctfm::numel(shape), ErrorKind::ShapeMismatch,
            "tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                to_string(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, value); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }

  static Tensor randn(Shape shape, SplitMix64& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.impl_->data) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
  }

  static Tensor uniform(Shape shape, SplitMix64& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.impl_->data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const {
    require(axis < rank(), ErrorKind::ShapeMismatch,
            "tensor: axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
    return impl_->shape[axis];
  }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T* raw() { return impl_->data.data(); }
  const T* raw() const { return impl_->data.data(); }

  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  /// Multi-index access, outermost axis first.
  T& at(std::initializer_list<std::size_t> index) { return impl_->data[offset(index)]; }
  const T& at(std::initializer_list<std::size_t> index) const {
    return impl_->data[offset(index)];
  }

  T item() const {
    require(numel() == 1, ErrorKind::ShapeMismatch,
            "tensor: item() needs exactly one element, shape is " + to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }

  /// Gradient buffer, allocated as zeros on first use.
  std::span<T> ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(numel(), T(0));
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }
  void clear_grad() { impl_->grad.clear(); }

  /// Independent copy of the values; no gradient, not tracked.
  Tensor clone() const { return Tensor(shape(), impl_->data); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> values(impl_->data.begin(), impl_->data.end());
    return Tensor<U>(shape(), std::move(values));
  }

  /// Same storage (not merely equal values).
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const void* id() const { return impl_.get(); }

  bool all_finite() const {
    return std::all_of(impl_->data.begin(), impl_->data.end(),
                       [](T v) { return std::isfinite(v); });
  }

  void fill(T value) { std::fill(impl_->data.begin(), impl_->data.end(), value); }

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const {
    require(index.size() == rank(), ErrorKind::ShapeMismatch,
            "tensor: index rank " + std::to_string(index.size()) + " vs tensor rank " +
                std::to_string(rank()));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
      require(i < impl_->shape[axis], ErrorKind::ShapeMismatch,
              "tensor: index " + std::to_string(i) + " out of range on axis " +
                  std::to_string(axis));
      off = off * impl_->shape[axis] + i;
      ++axis;
    }
    return off;
  }

  std::shared_ptr<detail::TensorStorage<T>> impl_;
};

}  // namespace ctfm
