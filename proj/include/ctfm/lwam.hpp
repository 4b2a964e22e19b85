#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "ctfm/config.hpp"
#include "ctfm/layers.hpp"
#include "ctfm/module.hpp"
#include "ctfm/ops.hpp"

namespace ctfm {

/// Channel gate: LP-pool over H,W for each configured p, push each pooled
/// vector through one shared MLP (C -> C/r -> C), sum, sigmoid. [N,C,H,W] -> [N,C,1,1].
template <typename T>
class ChannelAttention : public Module<T> {
 public:
  using Module<T>::forward;

  ChannelAttention(std::string name, std::size_t channels, const LwamConfig& config, SplitMix64& rng)
      : Module<T>(std::move(name)), channels_(channels), ps_(config.pooling_ps) {
    const std::size_t hidden = std::max<std::size_t>(1, channels / config.mlp_reduction);
    fc1_ = &this->template add_module<Linear<T>>("mlp.fc1", channels, hidden, rng);
    fc2_ = &this->template add_module<Linear<T>>("mlp.fc2", hidden, channels, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    require(x.rank() == 4 && x.dim(1) == channels_, ErrorKind::ShapeMismatch,
            this->name() + ": expected " + std::to_string(channels_) + " channels, got " + to_string(x.shape()));
    const std::size_t n = x.dim(0);
    Tensor<T> logits;
    for (double p : ps_) {
      Tensor<T> pooled = reshape(lp_pool(x, p, {2, 3}), Shape{n, channels_});
      Tensor<T> score = fc2_->forward(relu6(fc1_->forward(pooled)));
      logits = logits.defined() ? add(logits, score) : score;
    }
    return reshape(sigmoid(logits), Shape{n, channels_, 1, 1});
  }

  Shape trace(const Shape& in, CostReport& report) const override {
    require(in.size() == 4 && in[1] == channels_, ErrorKind::ShapeMismatch,
            this->name() + ": expected " + std::to_string(channels_) + " channels, got " + to_string(in));
    // One shared MLP, evaluated once per pooling path.
    const Shape pooled{in[0] * ps_.size(), channels_};
    fc2_->trace(fc1_->trace(pooled, report), report);
    return Shape{in[0], channels_, 1, 1};
  }

  Linear<T>& fc1() { return *fc1_; }
  Linear<T>& fc2() { return *fc2_; }

 private:
  std::size_t channels_;
  std::vector<double> ps_;
  Linear<T>* fc1_;
  Linear<T>* fc2_;
};

/// Spatial gate: LP-pool across channels for each p, concat, 3x3 conv to one
/// map, sigmoid. [N,C,H,W] -> [N,1,H,W].
template <typename T>
class SpatialAttention : public Module<T> {
 public:
  using Module<T>::forward;

  SpatialAttention(std::string name, const LwamConfig& config, SplitMix64& rng)
      : Module<T>(std::move(name)), ps_(config.pooling_ps) {
    conv_ = &this->template add_module<Conv2d<T>>("conv", ps_.size(), 1, ConvSpec{.kernel = 3, .bias = true}, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    require(x.rank() == 4 && x.dim(1) >= 1, ErrorKind::ShapeMismatch,
            this->name() + ": expected [N,C,H,W], got " + to_string(x.shape()));
    std::vector<Tensor<T>> maps;
    for (double p : ps_) maps.push_back(lp_pool(x, p, {1}));
    return sigmoid(conv_->forward(concat(maps, 1)));
  }

  Shape trace(const Shape& in, CostReport& report) const override {
    require(in.size() == 4, ErrorKind::ShapeMismatch, this->name() + ": expected [N,C,H,W], got " + to_string(in));
    return conv_->trace(Shape{in[0], ps_.size(), in[2], in[3]}, report);
  }

  Conv2d<T>& conv() { return *conv_; }

 private:
  std::vector<double> ps_;
  Conv2d<T>* conv_;
};

/// Channel gate then spatial gate, the latter computed on the channel-gated
/// tensor. Output has the input's shape and never exceeds it in magnitude.
template <typename T>
class Lwam : public Module<T> {
 public:
  using Module<T>::forward;

  Lwam(std::string name, std::size_t channels, const LwamConfig& config, SplitMix64& rng)
      : Module<T>(std::move(name)) {
    require(config.pooling_ps.size() == 2, ErrorKind::InvalidParameter,
            this->name() + ": exactly two pooling paths are supported");
    cam_ = &this->template add_module<ChannelAttention<T>>("cam", channels, config, rng);
    sam_ = &this->template add_module<SpatialAttention<T>>("sam", config, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> gated = mul(x, cam_->forward(x));
    return mul(gated, sam_->forward(gated));
  }

  Shape trace(const Shape& in, CostReport& report) const override {
    cam_->trace(in, report);
    sam_->trace(in, report);
    return in;
  }

  ChannelAttention<T>& channel() { return *cam_; }
  SpatialAttention<T>& spatial() { return *sam_; }

 private:
  ChannelAttention<T>* cam_;
  SpatialAttention<T>* sam_;
};

}  // namespace ctfm
