#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "ctfm/config.hpp"
#include "ctfm/layers.hpp"
#include "ctfm/module.hpp"
#include "ctfm/ops.hpp"

namespace ctfm {

/// Shared-and-dilation block: pointwise reduction, the pyramid-wide shared 3x3
/// conv, then a dilated 3x3 conv; the post-PW tensor is added back.
///
/// The shared conv is owned by the enclosing pyramid. Each block keeps its own
/// batchnorm after it since the three inputs have different statistics.
template <typename T>
class SdBlock : public Module<T> {
 public:
  using Module<T>::forward;

  SdBlock(std::string name, std::size_t in_channels, std::size_t inner, std::size_t rate,
          Conv2d<T>& shared_conv, double bn_momentum, SplitMix64& rng)
      : Module<T>(std::move(name)), shared_(&shared_conv), rate_(rate) {
    require(shared_conv.in_channels() == inner && shared_conv.out_channels() == inner,
            ErrorKind::ShapeMismatch, this->name() + ": shared conv width does not match inner width");
    pw_ = &this->template add_module<ConvBnAct<T>>("pw", in_channels, inner, ConvSpec{.kernel = 1}, true,
                                                   bn_momentum, rng);
    sc_bn_ = &this->template add_module<BatchNorm2d<T>>("sc_bn", inner, bn_momentum);
    dc_ = &this->template add_module<ConvBnAct<T>>("dc", inner, inner, ConvSpec{.kernel = 3, .dilation = rate},
                                                   true, bn_momentum, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> reduced = pw_->forward(x);
    Tensor<T> shared = relu6(sc_bn_->forward(shared_->forward(reduced)));
    return add(dc_->forward(shared), reduced);
  }

  Shape trace(const Shape& in, CostReport& report) const override {
    const Shape reduced = pw_->trace(in, report);
    const Shape shared = sc_bn_->trace(shared_->trace(reduced, report), report);
    return dc_->trace(shared, report);
  }

  std::size_t rate() const { return rate_; }
  ConvBnAct<T>& pointwise() { return *pw_; }
  ConvBnAct<T>& dilated() { return *dc_; }

 private:
  Conv2d<T>* shared_;
  std::size_t rate_;
  ConvBnAct<T>* pw_;
  BatchNorm2d<T>* sc_bn_;
  ConvBnAct<T>* dc_;
};

/// Lightweight feature pyramid over the deepest encoder features.
///
/// Five parallel paths: global average pooling (1x1 conv, broadcast back to
/// the grid), a pointwise conv, and one SdBlock per dilation rate. The
/// dilated outputs are fused hierarchically (F_k = F_{k-1} + D_k), which adds
/// no parameters, then everything is concatenated and mixed by a pointwise conv.
template <typename T>
class Lwfpm : public Module<T> {
 public:
  using Module<T>::forward;

  Lwfpm(std::string name, std::size_t in_channels, const FpmConfig& config, double bn_momentum,
        SplitMix64& rng)
      : Module<T>(std::move(name)), in_(in_channels), config_(config) {
    const std::size_t inner = config.inner_width;
    gap_conv_ = &this->template add_module<Conv2d<T>>("gap", in_channels, inner,
                                                       ConvSpec{.kernel = 1, .bias = true}, rng);
    pw_ = &this->template add_module<ConvBnAct<T>>("pw", in_channels, inner, ConvSpec{.kernel = 1}, true,
                                                   bn_momentum, rng);
    shared_ = &this->template add_module<Conv2d<T>>("sc", inner, inner, ConvSpec{.kernel = 3}, rng);
    for (std::size_t rate : config.dilation_rates)
      blocks_.push_back(&this->template add_module<SdBlock<T>>("sd" + std::to_string(rate), in_channels, inner,
                                                               rate, *shared_, bn_momentum, rng));
    fuse_ = &this->template add_module<ConvBnAct<T>>("fuse", fused_channels(), config.out_channels,
                                                     ConvSpec{.kernel = 1}, true, bn_momentum, rng);
  }

  /// Channels entering the fuse conv: GAP + PW + one per dilation rate.
  std::size_t fused_channels() const { return (2 + config_.dilation_rates.size()) * config_.inner_width; }

  Tensor<T> forward(const Tensor<T>& x) override {
    require(x.rank() == 4 && x.dim(1) == in_, ErrorKind::ShapeMismatch,
            this->name() + ": expected " + std::to_string(in_) + " channels, got " + to_string(x.shape()));
    require(x.dim(2) >= 1 && x.dim(3) >= 1, ErrorKind::DegenerateOutput,
            this->name() + ": input smaller than 1x1");
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);

    std::vector<Tensor<T>> paths;
    Tensor<T> pooled = relu6(gap_conv_->forward(global_avg_pool(x)));
    paths.push_back(broadcast_to(pooled, Shape{n, config_.inner_width, h, w}));
    paths.push_back(pw_->forward(x));
    Tensor<T> fused;
    for (auto* block : blocks_) {
      Tensor<T> d = block->forward(x);
      if (config_.hierarchical_fusion) fused = fused.defined() ? add(fused, d) : d;
      paths.push_back(config_.hierarchical_fusion ? fused : d);
    }
    return fuse_->forward(concat(paths, 1));
  }

  Shape trace(const Shape& in, CostReport& report) const override {
    require(in.size() == 4 && in[1] == in_, ErrorKind::ShapeMismatch,
            this->name() + ": expected " + std::to_string(in_) + " channels, got " + to_string(in));
    require(in[2] >= 1 && in[3] >= 1, ErrorKind::DegenerateOutput, this->name() + ": input smaller than 1x1");
    gap_conv_->trace(Shape{in[0], in[1], 1, 1}, report);
    pw_->trace(in, report);
    for (const auto* block : blocks_) block->trace(in, report);
    return fuse_->trace(Shape{in[0], fused_channels(), in[2], in[3]}, report);
  }

  Conv2d<T>& shared_conv() { return *shared_; }
  const std::vector<SdBlock<T>*>& blocks() const { return blocks_; }
  ConvBnAct<T>& fuse() { return *fuse_; }

 private:
  std::size_t in_;
  FpmConfig config_;
  Conv2d<T>* gap_conv_;
  ConvBnAct<T>* pw_;
  Conv2d<T>* shared_;
  std::vector<SdBlock<T>*> blocks_;
  ConvBnAct<T>* fuse_;
};

}  // namespace ctfm
