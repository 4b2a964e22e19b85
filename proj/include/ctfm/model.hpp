#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ctfm/autograd.hpp"
#include "ctfm/backbone.hpp"
#include "ctfm/config.hpp"
#include "ctfm/layers.hpp"
#include "ctfm/lwam.hpp"
#include "ctfm/lwfpm.hpp"
#include "ctfm/module.hpp"
#include "ctfm/ops.hpp"

namespace ctfm {

/// One decoder level: upsample x2, concatenate the (gated) skip, two DSCs.
template <typename T>
class DecoderLevel : public Module<T> {
 public:
  using Module<T>::forward;

  DecoderLevel(std::string name, std::size_t in_channels, std::size_t skip_channels, std::size_t out_channels,
               const ModelConfig& config, SplitMix64& rng)
      : Module<T>(std::move(name)), in_(in_channels), skip_(skip_channels) {
    if (config.lwam.enabled) gate_ = &this->template add_module<Lwam<T>>("lwam", skip_channels, config.lwam, rng);
    dsc1_ = &this->template add_module<Dsc<T>>("dsc1", in_channels + skip_channels, out_channels, 1,
                                               config.bn_momentum, rng);
    dsc2_ = &this->template add_module<Dsc<T>>("dsc2", out_channels, out_channels, 1, config.bn_momentum, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& skip) {
    Tensor<T> up = upsample_bilinear2x(x);
    require(up.dim(2) == skip.dim(2) && up.dim(3) == skip.dim(3), ErrorKind::ShapeMismatch,
            this->name() + ": skip " + to_string(skip.shape()) + " does not match upsampled " +
                to_string(up.shape()));
    Tensor<T> gated = gate_ ? gate_->forward(skip) : skip;
    return dsc2_->forward(dsc1_->forward(concat(std::vector<Tensor<T>>{up, gated}, 1)));
  }

  Shape trace(const Shape& x, const Shape& skip, CostReport& report) const {
    require(x.size() == 4 && x[1] == in_ && skip.size() == 4 && skip[1] == skip_, ErrorKind::ShapeMismatch,
            this->name() + ": unexpected inputs " + to_string(x) + " and " + to_string(skip));
    require(x[2] * 2 == skip[2] && x[3] * 2 == skip[3], ErrorKind::ShapeMismatch,
            this->name() + ": skip " + to_string(skip) + " does not match upsampled " + to_string(x));
    if (gate_) gate_->trace(skip, report);
    const Shape cat{x[0], in_ + skip_, skip[2], skip[3]};
    return dsc2_->trace(dsc1_->trace(cat, report), report);
  }

  Lwam<T>* gate() { return gate_; }

 private:
  std::size_t in_;
  std::size_t skip_;
  Lwam<T>* gate_ = nullptr;
  Dsc<T>* dsc1_;
  Dsc<T>* dsc2_;
};

/// The full segmentation network: backbone, pyramid over the deepest
/// features, one decoder level per stage with gated skips, and a 1-channel
/// head. Produces cloud probabilities at input resolution.
template <typename T>
class CdCtfm : public Module<T> {
 public:
  using Module<T>::forward;

  explicit CdCtfm(const ModelConfig& config, std::string name = "")
      : CdCtfm(config, std::move(name), config.seed) {}

  const ModelConfig& config() const { return config_; }

  /// Pre-sigmoid scores at input resolution.
  Tensor<T> logits(const Tensor<T>& x) {
    BackboneOutput<T> enc = encoder_->encode(x);
    Tensor<T> y = neck_->forward(enc.features.rbegin()->second);
    std::size_t stride = config_.output_stride();
    for (auto* level : decoder_) {
      stride /= 2;
      y = level->forward(y, enc.features.at(stride));
    }
    return upsample_bilinear2x(head_->forward(y));
  }

  Tensor<T> forward(const Tensor<T>& x) override { return sigmoid(logits(x)); }

  Shape trace(const Shape& in, CostReport& report) const override {
    auto features = encoder_->trace_features(in, report);
    Shape y = neck_->trace(features.rbegin()->second, report);
    std::size_t stride = config_.output_stride();
    for (const auto* level : decoder_) {
      stride /= 2;
      y = level->trace(y, features.at(stride), report);
    }
    y = head_->trace(y, report);
    return Shape{y[0], y[1], y[2] * 2, y[3] * 2};
  }

  /// Inference-mode probabilities, no recording.
  Tensor<T> predict(const Tensor<T>& x) {
    const bool was_training = this->training();
    this->eval();
    NoGradScope<T> no_grad;
    Tensor<T> out = forward(x);
    this->train(was_training);
    return out;
  }

  /// Binary mask: probability >= threshold.
  Tensor<T> predict_mask(const Tensor<T>& x, double threshold) {
    require(threshold > 0.0 && threshold < 1.0, ErrorKind::InvalidParameter,
            "predict_mask: threshold must lie in (0, 1)");
    return binarize(predict(x), threshold);
  }
  Tensor<T> predict_mask(const Tensor<T>& x) { return predict_mask(x, config_.threshold); }

  static Tensor<T> binarize(const Tensor<T>& probabilities, double threshold) {
    Tensor<T> mask(probabilities.shape());
    for (std::size_t i = 0; i < mask.numel(); ++i)
      mask[i] = static_cast<double>(probabilities[i]) >= threshold ? T(1) : T(0);
    return mask;
  }

  Backbone<T>& encoder() { return *encoder_; }
  Lwfpm<T>* pyramid() { return pyramid_; }
  const std::vector<DecoderLevel<T>*>& decoder() const { return decoder_; }
  Conv2d<T>& head() { return *head_; }

 private:
  CdCtfm(const ModelConfig& config, std::string name, std::uint64_t seed)
      : Module<T>(std::move(name)), config_(validated(config)) {
    SplitMix64 rng(seed);
    encoder_ = &this->template add_module<Backbone<T>>("encoder", config_, rng);
    const std::size_t deep = config_.stages.back().channels;
    if (config_.fpm.enabled) {
      pyramid_ = &this->template add_module<Lwfpm<T>>("lwfpm", deep, config_.fpm, config_.bn_momentum, rng);
      neck_ = pyramid_;
    } else {
      neck_ = &this->template add_module<ConvBnAct<T>>("neck", deep, config_.fpm.out_channels,
                                                       ConvSpec{.kernel = 1}, true, config_.bn_momentum, rng);
    }
    std::size_t in = config_.fpm.out_channels;
    const std::size_t levels = config_.stages.size();
    for (std::size_t i = 0; i < levels; ++i) {
      // Level i consumes the skip one stage shallower; the last level uses the stem.
      const std::size_t tap = levels - 1 - i;
      const std::size_t skip = tap == 0 ? config_.stem_channels : config_.stages[tap - 1].channels;
      decoder_.push_back(&this->template add_module<DecoderLevel<T>>(
          "decoder.level" + std::to_string(i + 1), in, skip, config_.decoder_channels[i], config_, rng));
      in = config_.decoder_channels[i];
    }
    head_ = &this->template add_module<Conv2d<T>>("head", in, 1, ConvSpec{.kernel = 1, .bias = true}, rng);
  }

  static const ModelConfig& validated(const ModelConfig& config) {
    config.validate();
    return config;
  }

  ModelConfig config_;
  Backbone<T>* encoder_;
  Lwfpm<T>* pyramid_ = nullptr;
  Module<T>* neck_;
  std::vector<DecoderLevel<T>*> decoder_;
  Conv2d<T>* head_;
};

template <typename T>
std::unique_ptr<CdCtfm<T>> make_model(const ModelConfig& config) {
  return std::make_unique<CdCtfm<T>>(config);
}

/// The four structural variants profiled side by side.
struct AblationRow {
  std::string method;
  ModelConfig config;
};

inline std::vector<AblationRow> ablation_rows(const ModelConfig& base) {
  return {{"Backbone", base.with_modules(false, false)},
          {"Backbone+LWFPM", base.with_modules(true, false)},
          {"Backbone+LWAM", base.with_modules(false, true)},
          {"Backbone+LWFPM+LWAM", base.with_modules(true, true)}};
}

}  // namespace ctfm
