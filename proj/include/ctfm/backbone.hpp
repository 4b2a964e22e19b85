#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ctfm/config.hpp"
#include "ctfm/layers.hpp"
#include "ctfm/module.hpp"
#include "ctfm/ops.hpp"

namespace ctfm {

/// Attention maps of one block, filled on request for invariant checks.
template <typename T>
struct BlockAttention {
  Tensor<T> mobile_to_former;  // [N, heads, M, HW_in]
  Tensor<T> former;            // [N, heads, M, M]
  Tensor<T> former_to_mobile;  // [N, heads, HW_out, M]
};

/// One Mobile-Former block: a bottleneck CNN branch over the feature map and a
/// transformer branch over M global tokens, bridged both ways by lightweight
/// cross attention.
///
/// Order: Mobile2Former updates the tokens from the input pixels, the Former
/// refines the tokens, the Mobile bottleneck transforms the pixels, and
/// Former2Mobile adds token context back to the new pixels.
template <typename T>
class MobileFormerBlock : public Module<T> {
 public:
  using Module<T>::forward;
  using Module<T>::trace;

  MobileFormerBlock(std::string name, std::size_t in_channels, std::size_t out_channels,
                    std::size_t stride, std::size_t expansion, const TokenConfig& tokens,
                    double bn_momentum, SplitMix64& rng)
      : Module<T>(std::move(name)),
        in_(in_channels),
        out_(out_channels),
        stride_(stride),
        tokens_(tokens) {
    require(stride == 1 || stride == 2, ErrorKind::InvalidParameter, this->name() + ": stride must be 1 or 2");
    const std::size_t d = tokens.dim;
    // Mobile2Former: queries are projected tokens, keys/values the raw pixels.
    m2f_ = &this->template add_module<MultiHeadAttention<T>>(
        "m2f", AttentionSpec{.query_dim = d, .kv_dim = in_, .dim = in_, .heads = tokens.heads,
                             .project_q = true, .project_kv = false, .project_out = true, .out_dim = d},
        rng);
    // Former: pre-norm self attention and feed-forward over the tokens.
    ln_attn_ = &this->template add_module<LayerNorm<T>>("former.ln1", d);
    self_attn_ = &this->template add_module<MultiHeadAttention<T>>(
        "former.attn", AttentionSpec{.query_dim = d, .kv_dim = d, .dim = d, .heads = tokens.heads}, rng);
    ln_ffn_ = &this->template add_module<LayerNorm<T>>("former.ln2", d);
    ffn_in_ = &this->template add_module<Linear<T>>("former.ffn1", d, d * tokens.ffn_expansion, rng);
    ffn_out_ = &this->template add_module<Linear<T>>("former.ffn2", d * tokens.ffn_expansion, d, rng);
    // Mobile: inverted bottleneck.
    const std::size_t hidden = in_ * expansion;
    if (expansion != 1)
      expand_ = &this->template add_module<ConvBnAct<T>>("mobile.expand", in_, hidden, ConvSpec{.kernel = 1},
                                                         true, bn_momentum, rng);
    dw_ = &this->template add_module<ConvBnAct<T>>(
        "mobile.dw", hidden, hidden, ConvSpec{.kernel = 3, .stride = stride, .groups = hidden}, true,
        bn_momentum, rng);
    project_ = &this->template add_module<ConvBnAct<T>>("mobile.project", hidden, out_, ConvSpec{.kernel = 1},
                                                        false, bn_momentum, rng);
    // Former2Mobile: queries are the raw pixels, keys/values projected tokens.
    // The value projection is the last linear map before the residual add.
    f2m_ = &this->template add_module<MultiHeadAttention<T>>(
        "f2m", AttentionSpec{.query_dim = out_, .kv_dim = d, .dim = out_, .heads = tokens.heads,
                             .project_q = false, .project_kv = true, .project_out = false},
        rng);
  }

  /// x [N, in, H, W], tokens [N, M, d] -> (x' [N, out, H/s, W/s], tokens' [N, M, d])
  std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& x, const Tensor<T>& tokens,
                                          BlockAttention<T>* attention = nullptr) {
    require(x.rank() == 4 && x.dim(1) == in_, ErrorKind::ShapeMismatch,
            this->name() + ": expected " + std::to_string(in_) + " input channels, got " +
                to_string(x.shape()));
    require(tokens.rank() == 3 && tokens.dim(0) == x.dim(0) && tokens.dim(1) == tokens_.count &&
                tokens.dim(2) == tokens_.dim,
            ErrorKind::ShapeMismatch,
            this->name() + ": tokens must be [N," + std::to_string(tokens_.count) + "," +
                std::to_string(tokens_.dim) + "], got " + to_string(tokens.shape()));
    const std::size_t n = x.dim(0);

    Tensor<T> pixels_in = as_sequence(x);
    Tensor<T> z = add(tokens, m2f_->forward(tokens, pixels_in, attention ? &attention->mobile_to_former : nullptr));

    z = former(z, attention ? &attention->former : nullptr);
    Tensor<T> y = mobile(x);

    const std::size_t ho = y.dim(2), wo = y.dim(3);
    Tensor<T> context = f2m_->forward(as_sequence(y), z, attention ? &attention->former_to_mobile : nullptr);
    y = add(y, reshape(permute(context, {0, 2, 1}), Shape{n, out_, ho, wo}));
    return {y, z};
  }

  /// Traces with tokens of the configured shape.
  Shape trace(const Shape& in, CostReport& report) const override {
    require(in.size() == 4, ErrorKind::ShapeMismatch, this->name() + ": expected [N,C,H,W], got " + to_string(in));
    return trace(in, Shape{in[0], tokens_.count, tokens_.dim}, report);
  }

  Shape trace(const Shape& in, const Shape& tokens, CostReport& report) const {
    require(in.size() == 4 && in[1] == in_, ErrorKind::ShapeMismatch,
            this->name() + ": expected " + std::to_string(in_) + " input channels, got " + to_string(in));
    const Shape pixels_in{in[0], in[2] * in[3], in[1]};
    m2f_->trace(tokens, pixels_in, report);
    ln_attn_->trace(tokens, report);
    self_attn_->trace(tokens, tokens, report);
    ln_ffn_->trace(tokens, report);
    ffn_out_->trace(ffn_in_->trace(tokens, report), report);
    Shape y = expand_ ? expand_->trace(in, report) : in;
    y = project_->trace(dw_->trace(y, report), report);
    f2m_->trace(Shape{y[0], y[2] * y[3], y[1]}, tokens, report);
    return y;
  }

  /// Token branch alone: pre-norm self attention then FFN, both residual.
  Tensor<T> former(const Tensor<T>& tokens, Tensor<T>* weights = nullptr) {
    const Tensor<T> normed = ln_attn_->forward(tokens);
    Tensor<T> z = add(tokens, self_attn_->forward(normed, normed, weights));
    return add(z, ffn_out_->forward(relu6(ffn_in_->forward(ln_ffn_->forward(z)))));
  }

  /// Pixel branch alone: the inverted bottleneck, with its residual when shapes allow.
  Tensor<T> mobile(const Tensor<T>& x) {
    Tensor<T> y = expand_ ? expand_->forward(x) : x;
    y = project_->forward(dw_->forward(y));
    return has_residual() ? add(y, x) : y;
  }

  bool has_residual() const { return stride_ == 1 && in_ == out_; }
  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }

  MultiHeadAttention<T>& mobile_to_former() { return *m2f_; }
  MultiHeadAttention<T>& former_to_mobile() { return *f2m_; }

 private:
  /// [N, C, H, W] -> [N, H*W, C]
  static Tensor<T> as_sequence(const Tensor<T>& x) {
    return permute(reshape(x, Shape{x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), {0, 2, 1});
  }

  std::size_t in_, out_, stride_;
  TokenConfig tokens_;
  MultiHeadAttention<T>* m2f_;
  LayerNorm<T>* ln_attn_;
  MultiHeadAttention<T>* self_attn_;
  LayerNorm<T>* ln_ffn_;
  Linear<T>* ffn_in_;
  Linear<T>* ffn_out_;
  ConvBnAct<T>* expand_ = nullptr;
  ConvBnAct<T>* dw_;
  ConvBnAct<T>* project_;
  MultiHeadAttention<T>* f2m_;
};

template <typename T>
struct BackboneOutput {
  std::map<std::size_t, Tensor<T>> features;  // keyed by output stride
  Tensor<T> tokens;                           // [N, M, d]
};

/// Stem convolution followed by stages of Mobile-Former blocks. Each stage
/// opens with a stride-2 block, so features exist at strides 2, 4, ...,
/// 2^(stages+1).
template <typename T>
class Backbone : public Module<T> {
 public:
  using Module<T>::forward;

  Backbone(std::string name, const ModelConfig& config, SplitMix64& rng)
      : Module<T>(std::move(name)), config_(config) {
    stem_ = &this->template add_module<ConvBnAct<T>>(
        "stem", config.bands, config.stem_channels, ConvSpec{.kernel = 3, .stride = 2}, true,
        config.bn_momentum, rng);
    tokens_ = this->add_parameter(
        "tokens", Tensor<T>::randn({1, config.tokens.count, config.tokens.dim}, rng, 0.02));
    std::size_t in = config.stem_channels;
    for (std::size_t s = 0; s < config.stages.size(); ++s) {
      const auto& stage = config.stages[s];
      for (std::size_t b = 0; b < stage.blocks; ++b) {
        const std::string local = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
        blocks_.push_back(&this->template add_module<MobileFormerBlock<T>>(
            local, in, stage.channels, b == 0 ? 2 : 1, stage.expansion, config.tokens,
            config.bn_momentum, rng));
        in = stage.channels;
      }
      stage_ends_.push_back(blocks_.size());
    }
  }

  void check_input(const Shape& in) const {
    const std::size_t stride = config_.output_stride();
    require(in.size() == 4, ErrorKind::ShapeMismatch, this->name() + ": expected [N,B,H,W], got " + to_string(in));
    require(in[1] == config_.bands, ErrorKind::ShapeMismatch,
            this->name() + ": expected " + std::to_string(config_.bands) + " bands, got " + to_string(in));
    require(in[2] % stride == 0 && in[3] % stride == 0 && in[2] > 0 && in[3] > 0, ErrorKind::ShapeMismatch,
            this->name() + ": spatial size " + std::to_string(in[2]) + "x" + std::to_string(in[3]) +
                " must be divisible by the output stride " + std::to_string(stride) +
                "; pad the input upstream");
  }

  Tensor<T> stem(const Tensor<T>& x) {
    check_input(x.shape());
    return stem_->forward(x);
  }

  BackboneOutput<T> encode(const Tensor<T>& x, std::vector<BlockAttention<T>>* attention = nullptr) {
    BackboneOutput<T> out;
    Tensor<T> y = stem(x);
    std::size_t stride = 2;
    out.features[stride] = y;
    Tensor<T> z = broadcast_to(tokens_, Shape{x.dim(0), config_.tokens.count, config_.tokens.dim});
    if (attention) attention->assign(blocks_.size(), BlockAttention<T>{});
    std::size_t stage = 0;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      auto [y2, z2] = blocks_[i]->forward(y, z, attention ? &(*attention)[i] : nullptr);
      y = y2;
      z = z2;
      if (i + 1 == stage_ends_[stage]) {
        stride *= 2;
        out.features[stride] = y;
        ++stage;
      }
    }
    out.tokens = z;
    return out;
  }

  /// Deepest feature map.
  Tensor<T> forward(const Tensor<T>& x) override { return encode(x).features.rbegin()->second; }

  /// Traces all features; returns the shape at every stride.
  std::map<std::size_t, Shape> trace_features(const Shape& in, CostReport& report) const {
    check_input(in);
    std::map<std::size_t, Shape> shapes;
    Shape y = stem_->trace(in, report);
    report.add(join_path(this->name(), "tokens"), this->claim_own_parameters(report), 0);
    std::size_t stride = 2;
    shapes[stride] = y;
    const Shape tokens{in[0], config_.tokens.count, config_.tokens.dim};
    std::size_t stage = 0;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      y = blocks_[i]->trace(y, tokens, report);
      if (i + 1 == stage_ends_[stage]) {
        stride *= 2;
        shapes[stride] = y;
        ++stage;
      }
    }
    return shapes;
  }

  Shape trace(const Shape& in, CostReport& report) const override {
    return trace_features(in, report).rbegin()->second;
  }

  const std::vector<MobileFormerBlock<T>*>& blocks() const { return blocks_; }
  Tensor<T>& tokens() { return tokens_; }

 private:
  ModelConfig config_;
  ConvBnAct<T>* stem_;
  Tensor<T> tokens_;
  std::vector<MobileFormerBlock<T>*> blocks_;
  std::vector<std::size_t> stage_ends_;
};

}  // namespace ctfm
