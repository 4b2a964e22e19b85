#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <type_traits>
#include <string>
#include <vector>

#include "ctfm/autograd.hpp"
#include "ctfm/detail/gemm.hpp"
#include "ctfm/error.hpp"
#include "ctfm/ops/basic.hpp"
#include "ctfm/tensor.hpp"

namespace ctfm {

/// Batched matrix product over matching leading axes:
/// a[..., m, k] * b[..., k, n] (or b[..., n, k] when transpose_b).
/// Rank-2 inputs are the plain matrix product.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  require(a.rank() >= 2 && a.rank() == b.rank(), ErrorKind::ShapeMismatch,
          "matmul: incompatible ranks " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t rank = a.rank();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < rank; ++i) {
    require(a.shape()[i] == b.shape()[i], ErrorKind::ShapeMismatch,
            "matmul: batch dimension " + std::to_string(i) + " mismatch " + to_string(a.shape()) +
                " vs " + to_string(b.shape()));
    batch *= a.shape()[i];
  }
  const std::size_t m = a.shape()[rank - 2];
  const std::size_t k = a.shape()[rank - 1];
  const std::size_t bk = transpose_b ? b.shape()[rank - 1] : b.shape()[rank - 2];
  const std::size_t n = transpose_b ? b.shape()[rank - 2] : b.shape()[rank - 1];
  require(k == bk, ErrorKind::ShapeMismatch,
          "matmul: inner dimension mismatch " + to_string(a.shape()) + " vs " +
              to_string(b.shape()) + (transpose_b ? " (b transposed)" : ""));

  Shape out_shape = a.shape();
  out_shape[rank - 1] = n;
  Tensor<T> out(out_shape);
  for (std::size_t s = 0; s < batch; ++s) {
    const T* pa = a.raw() + s * m * k;
    const T* pb = b.raw() + s * k * n;
    T* po = out.raw() + s * m * n;
    if (transpose_b)
      detail::gemm_nt(m, n, k, pa, pb, po);
    else
      detail::gemm_nn(m, n, k, pa, pb, po);
  }
  detail::record<T>({a, b}, out, [a, b, batch, m, n, k, transpose_b](std::span<const T> g) mutable {
    T* ga = detail::grad_sink(a);
    T* gb = detail::grad_sink(b);
    for (std::size_t s = 0; s < batch; ++s) {
      const T* pa = a.raw() + s * m * k;
      const T* pb = b.raw() + s * k * n;
      const T* pg = g.data() + s * m * n;
      if (ga) {
        // dA = G * B^T  (or G * B when b was transposed)
        if (transpose_b)
          detail::gemm_nn(m, k, n, pg, pb, ga + s * m * k);
        else
          detail::gemm_nt(m, k, n, pg, pb, ga + s * m * k);
      }
      if (gb) {
        // dB = A^T * G  (or G^T * A when b was transposed)
        if (transpose_b)
          detail::gemm_tn(n, k, m, pg, pa, gb + s * k * n);
        else
          detail::gemm_tn(k, n, m, pa, pg, gb + s * k * n);
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2, ErrorKind::ShapeMismatch,
          "matmul: expected matrices, got " + to_string(a.shape()) + " and " +
              to_string(b.shape()));
  return bmm(a, b);
}

/// x[..., in] * W^T + bias with W stored [out, in].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const std::optional<std::type_identity_t<Tensor<T>>>& bias = std::nullopt) {
  require(x.rank() >= 1 && weight.rank() == 2, ErrorKind::ShapeMismatch,
          "linear: bad operand ranks " + to_string(x.shape()) + " and " +
              to_string(weight.shape()));
  const std::size_t in = weight.shape()[1];
  const std::size_t out_features = weight.shape()[0];
  require(x.shape().back() == in, ErrorKind::ShapeMismatch,
          "linear: input features " + std::to_string(x.shape().back()) + " but weight expects " +
              std::to_string(in));
  const std::size_t rows = x.numel() / in;
  Tensor<T> flat = reshape(x, Shape{rows, in});
  Tensor<T> y = bmm(flat, weight, /*transpose_b=*/true);
  if (bias) {
    require(bias->numel() == out_features, ErrorKind::ShapeMismatch,
            "linear: bias has " + std::to_string(bias->numel()) + " values for " +
                std::to_string(out_features) + " outputs");
    y = add(y, reshape(*bias, Shape{1, out_features}));
  }
  Shape out_shape = x.shape();
  out_shape.back() = out_features;
  return reshape(y, out_shape);
}

/// Softmax along `axis`, computed with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  require(axis < x.rank(), ErrorKind::ShapeMismatch,
          "softmax: axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
  require(x.all_finite(), ErrorKind::NonFinite, "softmax: non-finite input");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t len = x.shape()[axis];

  Tensor<T> out(x.shape());
  const T* px = x.raw();
  T* py = out.raw();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      T peak = px[base];
      for (std::size_t j = 1; j < len; ++j) peak = std::max(peak, px[base + j * inner]);
      T total = T(0);
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(px[base + j * inner] - peak);
        py[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) py[base + j * inner] /= total;
    }
  }
  detail::record<T>({x}, out, [x, out, outer, inner, len](std::span<const T> g) mutable {
    T* gx = detail::grad_sink(x);
    if (!gx) return;
    const T* py = out.raw();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        T dot = T(0);
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * py[base + j * inner];
        for (std::size_t j = 0; j < len; ++j)
          gx[base + j * inner] += py[base + j * inner] * (g[base + j * inner] - dot);
      }
    }
  });
  return out;
}

}  // namespace ctfm
