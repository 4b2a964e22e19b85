#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>

#include "ctfm/autograd.hpp"
#include "ctfm/error.hpp"
#include "ctfm/tensor.hpp"

namespace ctfm {

/// Dice + binary cross-entropy with equal weights, on probabilities clamped to
/// [eps, 1 - eps]:
///   dice = 1 - 2 sum(y p) / (sum(y^2) + sum(p^2))
///   bce  = -mean(y log p + (1 - y) log(1 - p))
struct LossTerms {
  double dice = 0.0;
  double bce = 0.0;
  double total() const { return dice + bce; }
};

inline constexpr double kProbabilityEps = 1e-7;

template <typename T>
Tensor<T> dice_bce_loss(const Tensor<T>& pred, const Tensor<T>& target, LossTerms* terms = nullptr) {
  require(pred.shape() == target.shape(), ErrorKind::ShapeMismatch,
          "loss: prediction " + to_string(pred.shape()) + " vs target " + to_string(target.shape()));
  require(pred.numel() > 0, ErrorKind::DegenerateOutput, "loss: empty prediction");
  const std::size_t n = pred.numel();
  const double lo = kProbabilityEps, hi = 1.0 - kProbabilityEps;
  double yp = 0.0, yy = 0.0, pp = 0.0, bce = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = static_cast<double>(target[i]);
    require(y == 0.0 || y == 1.0, ErrorKind::InvalidParameter, "loss: target values must be 0 or 1");
    const double p = std::clamp(static_cast<double>(pred[i]), lo, hi);
    yp += y * p;
    yy += y * y;
    pp += p * p;
    bce -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  const double denom = yy + pp;
  const double dice = 1.0 - 2.0 * yp / denom;
  bce /= static_cast<double>(n);
  if (terms) *terms = LossTerms{dice, bce};

  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(dice + bce));
  detail::record<T>({pred}, out, [pred, target, yp, denom, n, lo, hi](std::span<const T> g) mutable {
    T* gp = detail::grad_sink(pred);
    if (!gp) return;
    const double scale = static_cast<double>(g[0]);
    for (std::size_t i = 0; i < n; ++i) {
      const double raw = static_cast<double>(pred[i]);
      if (raw < lo || raw > hi) continue;  // clamped: flat
      const double y = static_cast<double>(target[i]);
      const double d_dice = -2.0 * (y * denom - yp * 2.0 * raw) / (denom * denom);
      const double d_bce = (-y / raw + (1.0 - y) / (1.0 - raw)) / static_cast<double>(n);
      gp[i] += static_cast<T>(scale * (d_dice + d_bce));
    }
  });
  return out;
}

/// Pixel counts with cloud (1) as the positive class.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) { return a += b; }
  bool operator==(const ConfusionCounts&) const = default;
};

template <typename T>
ConfusionCounts confusion(const Tensor<T>& pred_mask, const Tensor<T>& target_mask) {
  require(pred_mask.shape() == target_mask.shape(), ErrorKind::ShapeMismatch,
          "confusion: prediction " + to_string(pred_mask.shape()) + " vs target " +
              to_string(target_mask.shape()));
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred_mask.numel(); ++i) {
    const T p = pred_mask[i], t = target_mask[i];
    require((p == T(0) || p == T(1)) && (t == T(0) || t == T(1)), ErrorKind::InvalidParameter,
            "confusion: masks must be binary");
    if (p == T(1)) {
      ++(t == T(1) ? c.tp : c.fp);
    } else {
      ++(t == T(1) ? c.fn : c.tn);
    }
  }
  return c;
}

/// Undefined metrics (zero denominator) are empty, never 0.
struct Metrics {
  std::optional<double> miou;  // cloud-class IoU: tp / (tp + fn + fp)
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
  std::optional<double> oa;
  std::optional<double> two_class_miou;  // mean of cloud and clear IoU, for comparison only
};

namespace detail {

inline std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace detail

inline Metrics metrics(const ConfusionCounts& c) {
  Metrics m;
  m.miou = detail::ratio(c.tp, c.tp + c.fn + c.fp);
  m.precision = detail::ratio(c.tp, c.tp + c.fp);
  m.recall = detail::ratio(c.tp, c.tp + c.fn);
  m.f1 = detail::ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  m.oa = detail::ratio(c.tp + c.tn, c.total());
  const auto clear = detail::ratio(c.tn, c.tn + c.fn + c.fp);
  if (m.miou && clear) m.two_class_miou = (*m.miou + *clear) / 2.0;
  return m;
}

/// Percent with two decimals, or "NA".
inline std::string format_percent(const std::optional<double>& v) {
  if (!v) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v * 100.0);
  return buf;
}

}  // namespace ctfm
