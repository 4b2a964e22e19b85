#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ctfm/autograd.hpp"
#include "ctfm/error.hpp"
#include "ctfm/tensor.hpp"

// Elementwise, broadcasting and layout primitives.
namespace ctfm {

namespace detail {

inline std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

/// Broadcast shape of two same-rank shapes (each extent equal or 1).
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  require(a.size() == b.size(), ErrorKind::ShapeMismatch,
          std::string(op) + ": rank mismatch " + to_string(a) + " vs " + to_string(b));
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    require(a[i] == b[i] || a[i] == 1 || b[i] == 1, ErrorKind::ShapeMismatch,
            std::string(op) + ": dimension " + std::to_string(i) + " mismatch " + to_string(a) +
                " vs " + to_string(b));
    out[i] = std::max(a[i], b[i]);
  }
  return out;
}

/// Strides of `in` viewed inside `out`; broadcast axes get stride 0.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  auto strides = contiguous_strides(in);
  for (std::size_t i = 0; i < in.size(); ++i)
    if (in[i] == 1 && out[i] != 1) strides[i] = 0;
  return strides;
}

/// Calls fn(out_index, a_index, b_index) for every element of `out`.
template <typename Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t rank = out.size();
  const std::size_t total = numel(out);
  if (rank == 0) {
    if (total) fn(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out[rank - 1];
  const std::size_t ia_step = sa[rank - 1];
  const std::size_t ib_step = sb[rank - 1];
  std::vector<std::size_t> index(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t base = 0; base < total; base += inner) {
    for (std::size_t j = 0; j < inner; ++j) fn(base + j, ia + j * ia_step, ib + j * ib_step);
    // Advance the outer multi-index.
    for (std::size_t axis = rank - 1; axis-- > 0;) {
      ++index[axis];
      ia += sa[axis];
      ib += sb[axis];
      if (index[axis] < out[axis]) break;
      ia -= sa[axis] * index[axis];
      ib -= sb[axis] * index[axis];
      index[axis] = 0;
    }
  }
}

template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> broadcast_binary(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd,
                           Da da, Db db) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  Tensor<T> out(out_shape);
  const T* pa = a.raw();
  const T* pb = b.raw();
  T* po = out.raw();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = fwd(pa[i], pb[i]);
  } else {
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb,
                       [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = fwd(pa[i], pb[j]); });
  }
  record<T>({a, b}, out, [a, b, out_shape, da, db](std::span<const T> g) mutable {
    T* ga = grad_sink(a);
    T* gb = grad_sink(b);
    const T* va = a.raw();
    const T* vb = b.raw();
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
      if (ga) ga[i] += da(va[i], vb[j], g[o]);
      if (gb) gb[j] += db(va[i], vb[j], g[o]);
    });
  });
  return out;
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  Tensor<T> out(x.shape());
  const T* px = x.raw();
  T* po = out.raw();
  for (std::size_t i = 0; i < x.numel(); ++i) po[i] = fwd(px[i]);
  record<T>({x}, out, [x, out, deriv](std::span<const T> g) mutable {
    T* gx = grad_sink(x);
    if (!gx) return;
    const T* px = x.raw();
    const T* py = out.raw();
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * deriv(px[i], py[i]);
  });
  return out;
}

}  // namespace detail

/// Elementwise a + b with same-rank broadcasting (extents equal or 1).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; },
      [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; },
      [](T, T, T g) { return -g; });
}

/// Elementwise a * b with same-rank broadcasting; used for the attention gates.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
      [](T x, T, T g) { return g * x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary<T>(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return detail::unary<T>(
      x, [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

/// min(max(x, 0), 6); the derivative is 1 strictly inside (0, 6).
template <typename T>
Tensor<T> relu6(const Tensor<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return std::min(std::max(v, T(0)), T(6)); },
      [](T v, T) { return (v > T(0) && v < T(6)) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      x,
      [](T v) {
        // Split on sign so exp never overflows.
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

/// Same values, new extents. Copies, so the result never aliases `x`.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(numel(shape) == x.numel(), ErrorKind::ShapeMismatch,
          "reshape: " + to_string(x.shape()) + " cannot become " + to_string(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  detail::record<T>({x}, out, [x](std::span<const T> g) mutable {
    T* gx = detail::grad_sink(x);
    if (!gx) return;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

/// Reorders axes: out.shape[i] = x.shape[axes[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  require(axes.size() == rank, ErrorKind::ShapeMismatch,
          "permute: " + std::to_string(axes.size()) + " axes for rank " + std::to_string(rank));
  std::vector<bool> seen(rank, false);
  for (std::size_t a : axes) {
    require(a < rank && !seen[a], ErrorKind::InvalidParameter, "permute: axes are not a permutation");
    seen[a] = true;
  }
  Shape out_shape(rank);
  const auto in_strides = detail::contiguous_strides(x.shape());
  std::vector<std::size_t> gather(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = x.shape()[axes[i]];
    gather[i] = in_strides[axes[i]];
  }
  Tensor<T> out(out_shape);
  const std::vector<std::size_t> zero(rank, 0);
  {
    const T* px = x.raw();
    T* po = out.raw();
    detail::for_each_broadcast(out_shape, gather, zero,
                               [&](std::size_t o, std::size_t i, std::size_t) { po[o] = px[i]; });
  }
  detail::record<T>({x}, out, [x, out_shape, gather, zero](std::span<const T> g) mutable {
    T* gx = detail::grad_sink(x);
    if (!gx) return;
    detail::for_each_broadcast(out_shape, gather, zero,
                               [&](std::size_t o, std::size_t i, std::size_t) { gx[i] += g[o]; });
  });
  return out;
}

/// Repeats size-1 axes up to `shape` (same rank).
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  const Shape out_shape = detail::broadcast_shape(x.shape(), shape, "broadcast_to");
  require(out_shape == shape, ErrorKind::ShapeMismatch,
          "broadcast_to: " + to_string(x.shape()) + " cannot expand to " + to_string(shape));
  Tensor<T> out(shape);
  const auto sx = detail::broadcast_strides(x.shape(), shape);
  const std::vector<std::size_t> zero(shape.size(), 0);
  {
    const T* px = x.raw();
    T* po = out.raw();
    detail::for_each_broadcast(shape, sx, zero,
                               [&](std::size_t o, std::size_t i, std::size_t) { po[o] = px[i]; });
  }
  detail::record<T>({x}, out, [x, shape, sx, zero](std::span<const T> g) mutable {
    T* gx = detail::grad_sink(x);
    if (!gx) return;
    detail::for_each_broadcast(shape, sx, zero,
                               [&](std::size_t o, std::size_t i, std::size_t) { gx[i] += g[o]; });
  });
  return out;
}

/// Joins tensors along `axis`; all other extents must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  require(!parts.empty(), ErrorKind::InvalidParameter, "concat: no inputs");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), ErrorKind::ShapeMismatch,
          "concat: axis " + std::to_string(axis) + " out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.rank() == first.size(), ErrorKind::ShapeMismatch, "concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i)
      require(i == axis || p.shape()[i] == first[i], ErrorKind::ShapeMismatch,
              "concat: dimension " + std::to_string(i) + " mismatch " + to_string(p.shape()) +
                  " vs " + to_string(first));
    out_shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_row = out_shape[axis] * inner;

  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t row = p.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.raw() + o * row, row, out.raw() + o * out_row + offset);
    offset += row;
  }
  detail::record<T>(std::vector<Tensor<T>>(parts), out,
                    [parts, axis, outer, inner, out_row](std::span<const T> g) mutable {
                      std::size_t offset = 0;
                      for (auto& p : parts) {
                        const std::size_t row = p.shape()[axis] * inner;
                        if (T* gp = detail::grad_sink(p)) {
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t j = 0; j < row; ++j)
                              gp[o * row + j] += g[o * out_row + offset + j];
                        }
                        offset += row;
                      }
                    });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  detail::record<T>({x}, out, [x](std::span<const T> g) mutable {
    T* gx = detail::grad_sink(x);
    if (!gx) return;
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[0];
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  require(x.numel() > 0, ErrorKind::DegenerateOutput, "mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

}  // namespace ctfm
