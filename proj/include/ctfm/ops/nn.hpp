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

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t groups = 1;
  std::size_t padding = 0;
};

/// floor((in + 2*pad - dilation*(k-1) - 1) / stride) + 1, or 0 when the
/// dilated kernel does not fit.
inline std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                    std::size_t dilation, std::size_t padding) {
  const std::size_t span = dilation * (kernel - 1) + 1;
  if (in + 2 * padding < span) return 0;
  return (in + 2 * padding - span) / stride + 1;
}

/// "Same" padding for odd kernels at stride 1.
inline std::size_t same_padding(std::size_t kernel, std::size_t dilation) {
  return dilation * (kernel - 1) / 2;
}

namespace detail {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, k, ho, wo, groups, cin_g, cout_g;
  Conv2dOptions opt;
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, const Conv2dOptions& opt) {
  require(x.size() == 4, ErrorKind::ShapeMismatch,
          "conv2d: input must be [N,C,H,W], got " + to_string(x));
  require(w.size() == 4 && w[2] == w[3], ErrorKind::ShapeMismatch,
          "conv2d: weight must be [Cout,Cin/groups,k,k], got " + to_string(w));
  require(opt.stride >= 1 && opt.dilation >= 1 && opt.groups >= 1, ErrorKind::InvalidParameter,
          "conv2d: stride, dilation and groups must be >= 1");
  ConvGeometry g{};
  g.n = x[0];
  g.cin = x[1];
  g.h = x[2];
  g.w = x[3];
  g.cout = w[0];
  g.k = w[2];
  g.groups = opt.groups;
  g.opt = opt;
  require(g.cin % g.groups == 0, ErrorKind::ShapeMismatch,
          "conv2d: input channels " + std::to_string(g.cin) + " not divisible by groups " +
              std::to_string(g.groups));
  require(g.cout % g.groups == 0, ErrorKind::ShapeMismatch,
          "conv2d: output channels " + std::to_string(g.cout) + " not divisible by groups " +
              std::to_string(g.groups));
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  require(w[1] == g.cin_g, ErrorKind::ShapeMismatch,
          "conv2d: weight expects " + std::to_string(w[1]) + " channels per group, input has " +
              std::to_string(g.cin_g));
  g.ho = conv_output_size(g.h, g.k, opt.stride, opt.dilation, opt.padding);
  g.wo = conv_output_size(g.w, g.k, opt.stride, opt.dilation, opt.padding);
  require(g.ho >= 1 && g.wo >= 1, ErrorKind::DegenerateOutput,
          "conv2d: degenerate output for input " + to_string(x) + " kernel " +
              std::to_string(g.k) + " dilation " + std::to_string(opt.dilation) + " padding " +
              std::to_string(opt.padding));
  return g;
}

// col[(c*k + kh)*k + kw][oh*wo + ow] = x[c][ih][iw] (zero outside the image)
template <typename T>
void im2col(const T* x, const ConvGeometry& g, std::size_t channels, T* col) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* xc = x + c * g.h * g.w;
    for (std::size_t kh = 0; kh < g.k; ++kh) {
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        T* row = col + ((c * g.k + kh) * g.k + kw) * hw;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.opt.stride + kh * g.opt.dilation) -
                          static_cast<long>(g.opt.padding);
          T* dst = row + oh * g.wo;
          if (ih < 0 || ih >= static_cast<long>(g.h)) {
            std::fill_n(dst, g.wo, T(0));
            continue;
          }
          const T* src = xc + ih * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.opt.stride + kw * g.opt.dilation) -
                            static_cast<long>(g.opt.padding);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(g.w)) ? T(0) : src[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, std::size_t channels, T* dx) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < channels; ++c) {
    T* xc = dx + c * g.h * g.w;
    for (std::size_t kh = 0; kh < g.k; ++kh) {
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        const T* row = col + ((c * g.k + kh) * g.k + kw) * hw;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.opt.stride + kh * g.opt.dilation) -
                          static_cast<long>(g.opt.padding);
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          T* dst = xc + ih * g.w;
          const T* src = row + oh * g.wo;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.opt.stride + kw * g.opt.dilation) -
                            static_cast<long>(g.opt.padding);
            if (iw >= 0 && iw < static_cast<long>(g.w)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

inline bool is_pointwise_identity(const ConvGeometry& g) {
  return g.k == 1 && g.opt.stride == 1 && g.opt.padding == 0;
}

inline bool is_depthwise(const ConvGeometry& g) {
  return g.groups == g.cin && g.cin_g == 1 && g.cout_g == 1;
}

// Direct depthwise kernel; `acc(out_index, in_index, weight_index)` is called
// for every in-bounds tap so forward and backward share the loop nest.
template <typename Fn>
void depthwise_taps(const ConvGeometry& g, Fn&& acc) {
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t c = 0; c < g.cin; ++c) {
      const std::size_t xbase = (n * g.cin + c) * g.h * g.w;
      const std::size_t obase = (n * g.cin + c) * g.ho * g.wo;
      const std::size_t wbase = c * g.k * g.k;
      for (std::size_t kh = 0; kh < g.k; ++kh) {
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.opt.stride + kh * g.opt.dilation) -
                          static_cast<long>(g.opt.padding);
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          for (std::size_t kw = 0; kw < g.k; ++kw) {
            for (std::size_t ow = 0; ow < g.wo; ++ow) {
              const long iw = static_cast<long>(ow * g.opt.stride + kw * g.opt.dilation) -
                              static_cast<long>(g.opt.padding);
              if (iw < 0 || iw >= static_cast<long>(g.w)) continue;
              acc(obase + oh * g.wo + ow, xbase + ih * g.w + iw, wbase + kh * g.k + kw);
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation over [N,C,H,W] with stride, dilation, groups and
/// symmetric zero padding. Weight is [Cout, Cin/groups, k, k].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const std::optional<std::type_identity_t<Tensor<T>>>& bias, const Conv2dOptions& opt) {
  const auto g = detail::conv_geometry(x.shape(), weight.shape(), opt);
  if (bias)
    require(bias->numel() == g.cout, ErrorKind::ShapeMismatch,
            "conv2d: bias has " + std::to_string(bias->numel()) + " values for " +
                std::to_string(g.cout) + " output channels");
  Tensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
  const std::size_t hw = g.ho * g.wo;
  const std::size_t kk = g.cin_g * g.k * g.k;

  if (detail::is_depthwise(g)) {
    const T* px = x.raw();
    const T* pw = weight.raw();
    T* po = out.raw();
    detail::depthwise_taps(g, [&](std::size_t o, std::size_t i, std::size_t w) { po[o] += px[i] * pw[w]; });
  } else {
    std::vector<T> col(detail::is_pointwise_identity(g) ? 0 : kk * hw);
    for (std::size_t n = 0; n < g.n; ++n) {
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        const T* xin = x.raw() + (n * g.cin + grp * g.cin_g) * g.h * g.w;
        const T* cols = xin;
        if (!col.empty()) {
          detail::im2col(xin, g, g.cin_g, col.data());
          cols = col.data();
        }
        detail::gemm_nn(g.cout_g, hw, kk, weight.raw() + grp * g.cout_g * kk, cols,
                        out.raw() + (n * g.cout + grp * g.cout_g) * hw);
      }
    }
  }
  if (bias) {
    T* po = out.raw();
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t c = 0; c < g.cout; ++c) {
        const T b = (*bias)[c];
        T* plane = po + (n * g.cout + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) plane[i] += b;
      }
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  Tensor<T> b = bias ? *bias : Tensor<T>();
  detail::record<T>(std::move(inputs), out, [x, weight, b, g](std::span<const T> grad) mutable {
    T* gx = detail::grad_sink(x);
    T* gw = detail::grad_sink(weight);
    const std::size_t hw = g.ho * g.wo;
    const std::size_t kk = g.cin_g * g.k * g.k;
    if (b.defined()) {
      if (T* gb = detail::grad_sink(b)) {
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t c = 0; c < g.cout; ++c) {
            const T* plane = grad.data() + (n * g.cout + c) * hw;
            T acc = T(0);
            for (std::size_t i = 0; i < hw; ++i) acc += plane[i];
            gb[c] += acc;
          }
      }
    }
    if (detail::is_depthwise(g)) {
      const T* px = x.raw();
      const T* pw = weight.raw();
      const T* pg = grad.data();
      detail::depthwise_taps(g, [&](std::size_t o, std::size_t i, std::size_t w) {
        if (gx) gx[i] += pg[o] * pw[w];
        if (gw) gw[w] += pg[o] * px[i];
      });
      return;
    }
    const bool direct = detail::is_pointwise_identity(g);
    std::vector<T> col(direct ? 0 : kk * hw);
    std::vector<T> dcol(gx && !direct ? kk * hw : 0);
    for (std::size_t n = 0; n < g.n; ++n) {
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        const std::size_t xoff = (n * g.cin + grp * g.cin_g) * g.h * g.w;
        const T* gout = grad.data() + (n * g.cout + grp * g.cout_g) * hw;
        const T* wg = weight.raw() + grp * g.cout_g * kk;
        if (gw) {
          const T* cols = x.raw() + xoff;
          if (!direct) {
            detail::im2col(x.raw() + xoff, g, g.cin_g, col.data());
            cols = col.data();
          }
          detail::gemm_nt(g.cout_g, kk, hw, gout, cols, gw + grp * g.cout_g * kk);
        }
        if (gx) {
          if (direct) {
            detail::gemm_tn(kk, hw, g.cout_g, wg, gout, gx + xoff);
          } else {
            std::fill(dcol.begin(), dcol.end(), T(0));
            detail::gemm_tn(kk, hw, g.cout_g, wg, gout, dcol.data());
            detail::col2im(dcol.data(), g, g.cin_g, gx + xoff);
          }
        }
      }
    }
  });
  return out;
}

/// Mean over H and W, keeping [N,C,1,1].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require(x.rank() == 4, ErrorKind::ShapeMismatch,
          "global_avg_pool: expected [N,C,H,W], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(hw >= 1, ErrorKind::DegenerateOutput, "global_avg_pool: empty spatial extent");
  Tensor<T> out(Shape{n, c, 1, 1});
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc = T(0);
    for (std::size_t j = 0; j < hw; ++j) acc += x[i * hw + j];
    out[i] = acc / static_cast<T>(hw);
  }
  detail::record<T>({x}, out, [x, n, c, hw](std::span<const T> g) mutable {
    T* gx = detail::grad_sink(x);
    if (!gx) return;
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t i = 0; i < n * c; ++i)
      for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += g[i] * inv;
  });
  return out;
}

/// Max pooling without padding; the gradient goes to the first maximal tap.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
  require(x.rank() == 4, ErrorKind::ShapeMismatch,
          "max_pool2d: expected [N,C,H,W], got " + to_string(x.shape()));
  require(kernel >= 1 && stride >= 1, ErrorKind::InvalidParameter,
          "max_pool2d: kernel and stride must be >= 1");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = conv_output_size(h, kernel, stride, 1, 0);
  const std::size_t wo = conv_output_size(w, kernel, stride, 1, 0);
  require(ho >= 1 && wo >= 1, ErrorKind::DegenerateOutput,
          "max_pool2d: degenerate output for input " + to_string(x.shape()));
  Tensor<T> out(Shape{n, c, ho, wo});
  std::vector<std::size_t> argmax(out.numel());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* px = x.raw() + plane * h * w;
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow) {
        std::size_t best = (oh * stride) * w + ow * stride;
        for (std::size_t kh = 0; kh < kernel; ++kh)
          for (std::size_t kw = 0; kw < kernel; ++kw) {
            const std::size_t idx = (oh * stride + kh) * w + ow * stride + kw;
            if (px[idx] > px[best]) best = idx;
          }
        const std::size_t o = (plane * ho + oh) * wo + ow;
        out[o] = px[best];
        argmax[o] = plane * h * w + best;
      }
  }
  detail::record<T>({x}, out, [x, argmax](std::span<const T> g) mutable {
    T* gx = detail::grad_sink(x);
    if (!gx) return;
    for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += g[o];
  });
  return out;
}

/// Bilinear x2 upsampling with half-pixel centers (align_corners = false).
template <typename T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& x) {
  require(x.rank() == 4, ErrorKind::ShapeMismatch,
          "upsample: expected [N,C,H,W], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = 2 * h, wo = 2 * w;

  struct Tap {
    std::size_t lo, hi;
    T frac;
  };
  auto taps = [](std::size_t out_size, std::size_t in_size) {
    std::vector<Tap> result(out_size);
    for (std::size_t o = 0; o < out_size; ++o) {
      T src = (static_cast<T>(o) + T(0.5)) / T(2) - T(0.5);
      if (src < T(0)) src = T(0);
      const auto lo = std::min(static_cast<std::size_t>(src), in_size - 1);
      const std::size_t hi = std::min(lo + 1, in_size - 1);
      result[o] = Tap{lo, hi, src - static_cast<T>(lo)};
    }
    return result;
  };
  const auto ty = taps(ho, h);
  const auto tx = taps(wo, w);

  Tensor<T> out(Shape{n, c, ho, wo});
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* px = x.raw() + plane * h * w;
    T* po = out.raw() + plane * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const Tap& a = ty[oy];
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const Tap& b = tx[ox];
        const T top = px[a.lo * w + b.lo] * (T(1) - b.frac) + px[a.lo * w + b.hi] * b.frac;
        const T bottom = px[a.hi * w + b.lo] * (T(1) - b.frac) + px[a.hi * w + b.hi] * b.frac;
        po[oy * wo + ox] = top * (T(1) - a.frac) + bottom * a.frac;
      }
    }
  }
  detail::record<T>({x}, out, [x, ty, tx, n, c, h, w, ho, wo](std::span<const T> g) mutable {
    T* gx = detail::grad_sink(x);
    if (!gx) return;
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      T* dx = gx + plane * h * w;
      const T* pg = g.data() + plane * ho * wo;
      for (std::size_t oy = 0; oy < ho; ++oy) {
        const Tap& a = ty[oy];
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const Tap& b = tx[ox];
          const T v = pg[oy * wo + ox];
          dx[a.lo * w + b.lo] += v * (T(1) - a.frac) * (T(1) - b.frac);
          dx[a.lo * w + b.hi] += v * (T(1) - a.frac) * b.frac;
          dx[a.hi * w + b.lo] += v * a.frac * (T(1) - b.frac);
          dx[a.hi * w + b.hi] += v * a.frac * b.frac;
        }
      }
    }
  });
  return out;
}

/// Batch normalization over (N, H, W) per channel.
///
/// In training mode the batch statistics normalize the input and the running
/// estimates move by `momentum` (unbiased variance). In inference mode the
/// running estimates are used; a fresh layer has mean 0, variance 1.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                      T momentum, T eps = T(1e-5)) {
  require(x.rank() == 4, ErrorKind::ShapeMismatch,
          "batchnorm2d: expected [N,C,H,W], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(gamma.numel() == c && beta.numel() == c && running_mean.numel() == c &&
              running_var.numel() == c,
          ErrorKind::ShapeMismatch,
          "batchnorm2d: parameters sized for " + std::to_string(gamma.numel()) +
              " channels, input has " + std::to_string(c));
  const std::size_t m = n * hw;
  std::vector<T> mu(c), inv_std(c);
  if (training) {
    require(m >= 1, ErrorKind::DegenerateOutput, "batchnorm2d: empty batch");
    for (std::size_t ch = 0; ch < c; ++ch) {
      T acc = T(0);
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.raw() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += p[i];
      }
      const T mean_v = acc / static_cast<T>(m);
      T var = T(0);
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.raw() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) var += (p[i] - mean_v) * (p[i] - mean_v);
      }
      var /= static_cast<T>(m);
      mu[ch] = mean_v;
      inv_std[ch] = T(1) / std::sqrt(var + eps);
      const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
      running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * mean_v;
      running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(running_var[ch] + eps);
    }
  }

  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T v = (x[base + i] - mu[ch]) * inv_std[ch];
        xhat[base + i] = v;
        out[base + i] = gamma[ch] * v + beta[ch];
      }
    }

  detail::record<T>({x, gamma, beta}, out,
                    [x, gamma, beta, xhat, inv_std, training, n, c, hw, m](std::span<const T> g) mutable {
                      T* gx = detail::grad_sink(x);
                      T* gg = detail::grad_sink(gamma);
                      T* gb = detail::grad_sink(beta);
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        T sum_g = T(0), sum_gx = T(0);
                        for (std::size_t b = 0; b < n; ++b) {
                          const std::size_t base = (b * c + ch) * hw;
                          for (std::size_t i = 0; i < hw; ++i) {
                            sum_g += g[base + i];
                            sum_gx += g[base + i] * xhat[base + i];
                          }
                        }
                        if (gg) gg[ch] += sum_gx;
                        if (gb) gb[ch] += sum_g;
                        if (!gx) continue;
                        const T scale_c = gamma[ch] * inv_std[ch];
                        for (std::size_t b = 0; b < n; ++b) {
                          const std::size_t base = (b * c + ch) * hw;
                          for (std::size_t i = 0; i < hw; ++i) {
                            if (training) {
                              gx[base + i] += scale_c / static_cast<T>(m) *
                                              (static_cast<T>(m) * g[base + i] - sum_g -
                                               xhat[base + i] * sum_gx);
                            } else {
                              gx[base + i] += scale_c * g[base + i];
                            }
                          }
                        }
                      }
                    });
  return out;
}

/// Layer normalization over the last axis with affine gamma/beta.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    T eps = T(1e-5)) {
  require(x.rank() >= 1, ErrorKind::ShapeMismatch, "layernorm: scalar input");
  const std::size_t d = x.shape().back();
  require(gamma.numel() == d && beta.numel() == d, ErrorKind::ShapeMismatch,
          "layernorm: affine sized " + std::to_string(gamma.numel()) + " for feature size " +
              std::to_string(d));
  const std::size_t rows = x.numel() / d;
  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = x.raw() + r * d;
    T acc = T(0);
    for (std::size_t i = 0; i < d; ++i) acc += p[i];
    const T mean_v = acc / static_cast<T>(d);
    T var = T(0);
    for (std::size_t i = 0; i < d; ++i) var += (p[i] - mean_v) * (p[i] - mean_v);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      const T v = (p[i] - mean_v) * inv_std[r];
      xhat[r * d + i] = v;
      out[r * d + i] = gamma[i] * v + beta[i];
    }
  }
  detail::record<T>({x, gamma, beta}, out,
                    [x, gamma, beta, xhat, inv_std, rows, d](std::span<const T> g) mutable {
                      T* gx = detail::grad_sink(x);
                      T* gg = detail::grad_sink(gamma);
                      T* gb = detail::grad_sink(beta);
                      std::vector<T> dxhat(d);
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T* pg = g.data() + r * d;
                        const T* ph = xhat.raw() + r * d;
                        T sum_d = T(0), sum_dx = T(0);
                        for (std::size_t i = 0; i < d; ++i) {
                          if (gg) gg[i] += pg[i] * ph[i];
                          if (gb) gb[i] += pg[i];
                          dxhat[i] = pg[i] * gamma[i];
                          sum_d += dxhat[i];
                          sum_dx += dxhat[i] * ph[i];
                        }
                        if (!gx) continue;
                        const T inv_d = T(1) / static_cast<T>(d);
                        for (std::size_t i = 0; i < d; ++i)
                          gx[r * d + i] += inv_std[r] * (dxhat[i] - inv_d * sum_d - ph[i] * inv_d * sum_dx);
                      }
                    });
  return out;
}

/// Generalized mean pooling (mean over `axes` of |x|^p)^(1/p), keeping the
/// reduced axes as extent 1. `axes` must be a contiguous, increasing range.
/// p = 1 is average pooling on non-negative input; p -> inf approaches max.
template <typename T>
Tensor<T> lp_pool(const Tensor<T>& x, double p, const std::vector<std::size_t>& axes) {
  require(p >= 1.0 && std::isfinite(p), ErrorKind::InvalidParameter,
          "lp_pool: p must be a finite value >= 1, got " + std::to_string(p));
  require(!axes.empty(), ErrorKind::InvalidParameter, "lp_pool: no reduction axes");
  for (std::size_t i = 0; i < axes.size(); ++i) {
    require(axes[i] < x.rank(), ErrorKind::InvalidParameter,
            "lp_pool: axis " + std::to_string(axes[i]) + " out of range for " + to_string(x.shape()));
    require(i == 0 || axes[i] == axes[i - 1] + 1, ErrorKind::InvalidParameter,
            "lp_pool: reduction axes must be contiguous");
  }
  std::size_t outer = 1, red = 1, inner = 1;
  Shape out_shape = x.shape();
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i < axes.front())
      outer *= x.shape()[i];
    else if (i <= axes.back()) {
      red *= x.shape()[i];
      out_shape[i] = 1;
    } else
      inner *= x.shape()[i];
  }
  require(red >= 1, ErrorKind::DegenerateOutput, "lp_pool: empty reduction");

  const T pw = static_cast<T>(p);
  const bool is_mean = (p == 1.0);
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * red * inner + i;
      T result;
      if (is_mean) {
        T acc = T(0);
        for (std::size_t r = 0; r < red; ++r) acc += std::abs(x[base + r * inner]);
        result = acc / static_cast<T>(red);
      } else {
        // Scale by the peak so |x|^p cannot overflow for large p.
        T peak = T(0);
        for (std::size_t r = 0; r < red; ++r) peak = std::max(peak, std::abs(x[base + r * inner]));
        if (peak == T(0)) {
          result = T(0);
        } else {
          T acc = T(0);
          for (std::size_t r = 0; r < red; ++r) acc += std::pow(std::abs(x[base + r * inner]) / peak, pw);
          result = peak * std::pow(acc / static_cast<T>(red), T(1) / pw);
        }
      }
      out[o * inner + i] = result;
    }

  detail::record<T>({x}, out, [x, out, pw, is_mean, outer, red, inner](std::span<const T> g) mutable {
    T* gx = detail::grad_sink(x);
    if (!gx) return;
    const T inv_red = T(1) / static_cast<T>(red);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * red * inner + i;
        const T y = out[o * inner + i];
        const T go = g[o * inner + i];
        for (std::size_t r = 0; r < red; ++r) {
          const T v = x[base + r * inner];
          const T sgn = v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
          if (is_mean) {
            gx[base + r * inner] += go * inv_red * sgn;
          } else if (y > T(0)) {
            // d/dx_i = (1/n) (|x_i| / y)^(p-1) sign(x_i)
            gx[base + r * inner] += go * inv_red * std::pow(std::abs(v) / y, pw - T(1)) * sgn;
          }
        }
      }
  });
  return out;
}

}  // namespace ctfm
