#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ctfm/autograd.hpp"
#include "ctfm/backbone.hpp"
#include "ctfm/lwam.hpp"
#include "ctfm/lwfpm.hpp"
#include "ctfm/metrics.hpp"
#include "ctfm/model.hpp"
#include "ctfm/ops.hpp"

namespace ctfm {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Denominator floor of the relative error, so entries whose true gradient
  /// is ~0 are judged on absolute error instead.
  double floor = 1e-3;
  /// Entries probed per tensor (0: all). Probes are spread with a fixed stride.
  std::size_t max_probes = 0;
  /// A probe whose error exceeds this is repeated with a 10x smaller step and
  /// the smaller error kept. A step straddling a relu6 or |x| kink gives an
  /// error that shrinks with the step; a wrong gradient does not.
  double refine_above = 1e-6;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor>[index]"
  std::size_t probes = 0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares tape gradients of the scalar `loss()` with central differences
/// for every listed tensor.
inline GradCheckResult check_gradients(const std::function<Tensor<double>()>& loss,
                                       std::vector<NamedTensor<double>> inputs, const GradCheckOptions& opt = {}) {
  for (auto& in : inputs) {
    in.tensor.set_requires_grad(true);
    in.tensor.clear_grad();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(loss());
  }
  GradCheckResult result;
  NoGradScope<double> no_grad;
  for (auto& in : inputs) {
    Tensor<double>& t = in.tensor;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    const std::size_t n = t.numel();
    const std::size_t stride = opt.max_probes == 0 || n <= opt.max_probes ? 1 : n / opt.max_probes;
    auto central = [&](std::size_t i, double eps) {
      const double saved = t[i];
      t[i] = saved + eps;
      const double up = loss().item();
      t[i] = saved - eps;
      const double down = loss().item();
      t[i] = saved;
      return (up - down) / (2.0 * eps);
    };
    for (std::size_t i = 0; i < n; i += stride) {
      double err = relative_error(analytic[i], central(i, opt.eps), opt.floor);
      if (err > opt.refine_above)
        err = std::min(err, relative_error(analytic[i], central(i, opt.eps * 0.1), opt.floor));
      ++result.probes;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = in.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

/// Projects an output onto fixed random weights so every element contributes
/// to a scalar loss with a distinct gradient.
inline Tensor<double> probe_loss(const Tensor<double>& y, std::uint64_t seed = 99) {
  SplitMix64 rng(seed);
  return sum(mul(y, Tensor<double>::randn(y.shape(), rng)));
}

struct BlockReport {
  std::string block;
  GradCheckResult result;
  double tolerance = 0.0;
  bool passed() const { return result.max_rel_error < tolerance; }
};

/// Finite-difference suite over the composite blocks of a (small) model
/// configuration, in double precision.
inline std::vector<BlockReport> gradcheck_blocks(const ModelConfig& config, const GradCheckOptions& opt = {}) {
  config.validate();
  std::vector<BlockReport> reports;
  const double tol = 1e-4;
  SplitMix64 rng(config.seed + 1);

  {
    const TokenConfig& tc = config.tokens;
    const std::size_t c = config.stages.front().channels;
    MobileFormerBlock<double> block("mobile_former", c, c, 1, config.stages.front().expansion, tc,
                                    config.bn_momentum, rng);
    Tensor<double> x = Tensor<double>::randn({2, c, 6, 6}, rng);
    Tensor<double> z = Tensor<double>::randn({2, tc.count, tc.dim}, rng);
    auto inputs = block.parameters();
    inputs.push_back({"x", x});
    inputs.push_back({"z", z});
    auto loss = [&] {
      auto [y, z2] = block.forward(x, z);
      return add(probe_loss(y), probe_loss(z2, 7));
    };
    reports.push_back({"mobile_former_block", check_gradients(loss, inputs, opt), tol});
  }
  {
    const std::size_t c = config.stages.back().channels, inner = config.fpm.inner_width;
    struct Holder : Module<double> {
      Holder(std::string n, std::size_t inner, SplitMix64& rng) : Module<double>(std::move(n)) {
        sc = &add_module<Conv2d<double>>("sc", inner, inner, ConvSpec{.kernel = 3}, rng);
      }
      Conv2d<double>* sc;
    } holder("holder", inner, rng);
    SdBlock<double> block("sd", c, inner, config.fpm.dilation_rates.front(), *holder.sc, config.bn_momentum, rng);
    Tensor<double> x = Tensor<double>::randn({2, c, 6, 6}, rng);
    auto inputs = block.parameters();
    for (const auto& p : holder.parameters()) inputs.push_back(p);
    inputs.push_back({"x", x});
    reports.push_back({"sd_block", check_gradients([&] { return probe_loss(block.forward(x)); }, inputs, opt), tol});
  }
  {
    const std::size_t c = config.stages.back().channels;
    Lwfpm<double> fpm("lwfpm", c, config.fpm, config.bn_momentum, rng);
    Tensor<double> x = Tensor<double>::randn({2, c, 6, 6}, rng);
    auto inputs = fpm.parameters();
    inputs.push_back({"x", x});
    reports.push_back({"lwfpm", check_gradients([&] { return probe_loss(fpm.forward(x)); }, inputs, opt), tol});
  }
  {
    const std::size_t c = config.stages.front().channels;
    Lwam<double> gate("lwam", c, config.lwam, rng);
    // Strictly positive input keeps LP-pooling away from the |x| kink.
    Tensor<double> x = Tensor<double>::uniform({2, c, 5, 5}, rng, 0.1, 1.0);
    auto inputs = gate.parameters();
    inputs.push_back({"x", x});
    reports.push_back({"lwam", check_gradients([&] { return probe_loss(gate.forward(x)); }, inputs, opt), tol});
  }
  {
    CdCtfm<double> model(config);
    const std::size_t s = std::max<std::size_t>(32, config.output_stride());
    Tensor<double> x = Tensor<double>::uniform({2, config.bands, s, s}, rng, 0.0, 1.0);
    Tensor<double> target({2, 1, s, s});
    for (std::size_t i = 0; i < target.numel(); ++i) target[i] = rng.below(2) ? 1.0 : 0.0;
    auto inputs = model.parameters();
    inputs.push_back({"x", x});
    reports.push_back(
        {"cd_ctfm", check_gradients([&] { return dice_bce_loss(model.forward(x), target); }, inputs, opt), tol});
  }
  return reports;
}

}  // namespace ctfm
