#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>

#include "ctfm/cost.hpp"
#include "ctfm/error.hpp"
#include "ctfm/module.hpp"
#include "ctfm/ops.hpp"
#include "ctfm/rng.hpp"
#include "ctfm/tensor.hpp"

// Parameterized building blocks shared by the encoder, pyramid, attention
// gates and decoder.
namespace ctfm {

struct ConvSpec {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t groups = 1;
  bool bias = false;
  std::optional<std::size_t> padding{};  // "same" (dilation*(k-1)/2) when unset
};

/// Closed-form multiply-accumulate count of one conv forward pass.
inline std::uint64_t conv_macs(std::size_t n, std::size_t cin, std::size_t cout, std::size_t kernel,
                               std::size_t groups, std::size_t ho, std::size_t wo) {
  return static_cast<std::uint64_t>(n) * cout * ho * wo * (cin / groups) * kernel * kernel;
}

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, ConvSpec spec,
         SplitMix64& rng)
      : Module<T>(std::move(name)), in_(in_channels), out_(out_channels), spec_(spec) {
    require(in_ >= 1 && out_ >= 1 && spec_.kernel >= 1, ErrorKind::InvalidParameter,
            this->name() + ": channels and kernel must be >= 1");
    require(in_ % spec_.groups == 0 && out_ % spec_.groups == 0, ErrorKind::InvalidParameter,
            this->name() + ": channels not divisible by groups " + std::to_string(spec_.groups));
    // Kaiming fan-in scaling.
    const double fan_in = static_cast<double>(in_ / spec_.groups * spec_.kernel * spec_.kernel);
    weight_ = this->add_parameter(
        "weight", Tensor<T>::randn({out_, in_ / spec_.groups, spec_.kernel, spec_.kernel}, rng,
                                   std::sqrt(2.0 / fan_in)));
    if (spec_.bias) bias_ = this->add_parameter("bias", Tensor<T>::zeros({out_}));
  }

  Tensor<T> forward(const Tensor<T>& x) override { return conv2d(x, weight_, bias_, options()); }

  Shape trace(const Shape& in, CostReport& report) const override {
    Shape out;
    try {
      const auto g = detail::conv_geometry(in, weight_.shape(), options());
      out = Shape{g.n, g.cout, g.ho, g.wo};
      report.add(this->name(), this->claim_own_parameters(report),
                 conv_macs(g.n, g.cin, g.cout, g.k, g.groups, g.ho, g.wo));
    } catch (const Error& e) {
      throw Error(e.kind(), this->name() + ": " + e.what());
    }
    return out;
  }

  Conv2dOptions options() const {
    return Conv2dOptions{spec_.stride, spec_.dilation, spec_.groups,
                         spec_.padding.value_or(same_padding(spec_.kernel, spec_.dilation))};
  }

  Tensor<T>& weight() { return weight_; }
  const Tensor<T>& weight() const { return weight_; }
  std::optional<Tensor<T>>& bias() { return bias_; }
  const ConvSpec& spec() const { return spec_; }
  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }

 private:
  std::size_t in_, out_;
  ConvSpec spec_;
  Tensor<T> weight_;
  std::optional<Tensor<T>> bias_;
};

template <typename T>
class BatchNorm2d : public Module<T> {
 public:
  BatchNorm2d(std::string name, std::size_t channels, double momentum, double eps = 1e-5)
      : Module<T>(std::move(name)), channels_(channels), momentum_(momentum), eps_(eps) {
    gamma_ = this->add_parameter("weight", Tensor<T>::ones({channels}));
    beta_ = this->add_parameter("bias", Tensor<T>::zeros({channels}));
    running_mean_ = this->add_buffer("running_mean", Tensor<T>::zeros({channels}));
    running_var_ = this->add_buffer("running_var", Tensor<T>::ones({channels}));
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    return batchnorm2d(x, gamma_, beta_, running_mean_, running_var_, this->training(),
                       static_cast<T>(momentum_), static_cast<T>(eps_));
  }

  Shape trace(const Shape& in, CostReport& report) const override {
    require(in.size() == 4 && in[1] == channels_, ErrorKind::ShapeMismatch,
            this->name() + ": expected " + std::to_string(channels_) + " channels, got " +
                to_string(in));
    report.add(this->name(), this->claim_own_parameters(report), 0);
    return in;
  }

  Tensor<T>& gamma() { return gamma_; }
  Tensor<T>& beta() { return beta_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }

 private:
  std::size_t channels_;
  double momentum_, eps_;
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear(std::string name, std::size_t in_features, std::size_t out_features, SplitMix64& rng,
         bool bias = true, double stddev = 0.02)
      : Module<T>(std::move(name)), in_(in_features), out_(out_features) {
    require(in_ >= 1 && out_ >= 1, ErrorKind::InvalidParameter,
            this->name() + ": features must be >= 1");
    weight_ = this->add_parameter("weight", Tensor<T>::randn({out_, in_}, rng, stddev));
    if (bias) bias_ = this->add_parameter("bias", Tensor<T>::zeros({out_}));
  }

  Tensor<T> forward(const Tensor<T>& x) override { return linear(x, weight_, bias_); }

  Shape trace(const Shape& in, CostReport& report) const override {
    require(!in.empty() && in.back() == in_, ErrorKind::ShapeMismatch,
            this->name() + ": expected trailing extent " + std::to_string(in_) + ", got " +
                to_string(in));
    const std::uint64_t rows = numel(in) / in_;
    report.add(this->name(), this->claim_own_parameters(report), rows * in_ * out_);
    Shape out = in;
    out.back() = out_;
    return out;
  }

  Tensor<T>& weight() { return weight_; }
  std::optional<Tensor<T>>& bias() { return bias_; }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

 private:
  std::size_t in_, out_;
  Tensor<T> weight_;
  std::optional<Tensor<T>> bias_;
};

template <typename T>
class LayerNorm : public Module<T> {
 public:
  LayerNorm(std::string name, std::size_t features) : Module<T>(std::move(name)), features_(features) {
    gamma_ = this->add_parameter("weight", Tensor<T>::ones({features}));
    beta_ = this->add_parameter("bias", Tensor<T>::zeros({features}));
  }

  Tensor<T> forward(const Tensor<T>& x) override { return layernorm(x, gamma_, beta_); }

  Shape trace(const Shape& in, CostReport& report) const override {
    require(!in.empty() && in.back() == features_, ErrorKind::ShapeMismatch,
            this->name() + ": expected trailing extent " + std::to_string(features_) + ", got " +
                to_string(in));
    report.add(this->name(), this->claim_own_parameters(report), 0);
    return in;
  }

 private:
  std::size_t features_;
  Tensor<T> gamma_, beta_;
};

/// conv -> batchnorm -> optional relu6
template <typename T>
class ConvBnAct : public Module<T> {
 public:
  ConvBnAct(std::string name, std::size_t in_channels, std::size_t out_channels, ConvSpec spec,
            bool activation, double bn_momentum, SplitMix64& rng)
      : Module<T>(std::move(name)), activation_(activation) {
    conv_ = &this->template add_module<Conv2d<T>>("conv", in_channels, out_channels, spec, rng);
    bn_ = &this->template add_module<BatchNorm2d<T>>("bn", out_channels, bn_momentum);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> y = bn_->forward(conv_->forward(x));
    return activation_ ? relu6(y) : y;
  }

  Shape trace(const Shape& in, CostReport& report) const override {
    return bn_->trace(conv_->trace(in, report), report);
  }

  Conv2d<T>& conv() { return *conv_; }
  BatchNorm2d<T>& bn() { return *bn_; }

 private:
  bool activation_;
  Conv2d<T>* conv_;
  BatchNorm2d<T>* bn_;
};

/// Depthwise separable convolution: depthwise 3x3 -> BN -> relu6 -> pointwise
/// 1x1 -> BN -> relu6.
template <typename T>
class Dsc : public Module<T> {
 public:
  Dsc(std::string name, std::size_t in_channels, std::size_t out_channels, std::size_t stride,
      double bn_momentum, SplitMix64& rng)
      : Module<T>(std::move(name)) {
    dw_ = &this->template add_module<ConvBnAct<T>>(
        "dw", in_channels, in_channels, ConvSpec{.kernel = 3, .stride = stride, .groups = in_channels},
        true, bn_momentum, rng);
    pw_ = &this->template add_module<ConvBnAct<T>>("pw", in_channels, out_channels,
                                                   ConvSpec{.kernel = 1}, true, bn_momentum, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override { return pw_->forward(dw_->forward(x)); }

  Shape trace(const Shape& in, CostReport& report) const override {
    return pw_->trace(dw_->trace(in, report), report);
  }

 private:
  ConvBnAct<T>* dw_;
  ConvBnAct<T>* pw_;
};

struct AttentionSpec {
  std::size_t query_dim = 0;  // feature size of the query sequence
  std::size_t kv_dim = 0;     // feature size of the key/value sequence
  std::size_t dim = 0;        // attention width, split across heads
  std::size_t heads = 1;
  bool project_q = true;
  bool project_kv = true;
  bool project_out = true;
  std::size_t out_dim = 0;  // defaults to `dim`
};

/// Scaled dot-product multi-head attention, scale 1/sqrt(dim/heads).
///
/// Any projection can be dropped: an unprojected side must already have
/// feature size `dim`. Dropping the key/value projection is the lightweight
/// cross attention used between the feature map and the global tokens.
template <typename T>
class MultiHeadAttention : public Module<T> {
 public:
  using Module<T>::forward;
  using Module<T>::trace;

  MultiHeadAttention(std::string name, AttentionSpec spec, SplitMix64& rng)
      : Module<T>(std::move(name)), spec_(spec) {
    if (spec_.out_dim == 0) spec_.out_dim = spec_.dim;
    require(spec_.dim >= 1 && spec_.heads >= 1 && spec_.dim % spec_.heads == 0,
            ErrorKind::InvalidParameter,
            this->name() + ": attention width " + std::to_string(spec_.dim) +
                " not divisible by heads " + std::to_string(spec_.heads));
    require(spec_.project_q || spec_.query_dim == spec_.dim, ErrorKind::InvalidParameter,
            this->name() + ": unprojected queries must have width " + std::to_string(spec_.dim));
    require(spec_.project_kv || spec_.kv_dim == spec_.dim, ErrorKind::InvalidParameter,
            this->name() + ": unprojected keys/values must have width " + std::to_string(spec_.dim));
    require(spec_.project_out || spec_.out_dim == spec_.dim, ErrorKind::InvalidParameter,
            this->name() + ": without an output projection out_dim must equal dim");
    if (spec_.project_q) to_q_ = &this->template add_module<Linear<T>>("to_q", spec_.query_dim, spec_.dim, rng);
    if (spec_.project_kv) {
      to_k_ = &this->template add_module<Linear<T>>("to_k", spec_.kv_dim, spec_.dim, rng);
      to_v_ = &this->template add_module<Linear<T>>("to_v", spec_.kv_dim, spec_.dim, rng);
    }
    if (spec_.project_out) proj_ = &this->template add_module<Linear<T>>("proj", spec_.dim, spec_.out_dim, rng);
  }

  /// queries [N, Lq, query_dim], keys/values [N, Lk, kv_dim] -> [N, Lq, out_dim].
  /// When `weights` is given it receives the attention map [N, heads, Lq, Lk].
  Tensor<T> forward(const Tensor<T>& queries, const Tensor<T>& keys_values,
                    Tensor<T>* weights = nullptr) {
    require(queries.rank() == 3 && keys_values.rank() == 3 &&
                queries.dim(0) == keys_values.dim(0),
            ErrorKind::ShapeMismatch,
            this->name() + ": expected [N,L,D] inputs, got " + to_string(queries.shape()) + " and " +
                to_string(keys_values.shape()));
    require(queries.dim(2) == spec_.query_dim && keys_values.dim(2) == spec_.kv_dim,
            ErrorKind::ShapeMismatch,
            this->name() + ": feature sizes " + std::to_string(queries.dim(2)) + "/" +
                std::to_string(keys_values.dim(2)) + " do not match " +
                std::to_string(spec_.query_dim) + "/" + std::to_string(spec_.kv_dim));
    const std::size_t n = queries.dim(0), lq = queries.dim(1), lk = keys_values.dim(1);
    const std::size_t h = spec_.heads, dh = spec_.dim / spec_.heads;

    Tensor<T> q = to_q_ ? to_q_->forward(queries) : queries;
    Tensor<T> k = to_k_ ? to_k_->forward(keys_values) : keys_values;
    Tensor<T> v = to_v_ ? to_v_->forward(keys_values) : keys_values;

    auto split = [&](const Tensor<T>& t, std::size_t len) {
      return permute(reshape(t, Shape{n, len, h, dh}), {0, 2, 1, 3});
    };
    q = split(q, lq);
    k = split(k, lk);
    v = split(v, lk);

    Tensor<T> scores = scale(bmm(q, k, /*transpose_b=*/true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    Tensor<T> attn = softmax(scores, 3);
    if (weights) *weights = attn;
    Tensor<T> context = permute(bmm(attn, v), {0, 2, 1, 3});
    Tensor<T> merged = reshape(context, Shape{n, lq, spec_.dim});
    return proj_ ? proj_->forward(merged) : merged;
  }

  Shape trace(const Shape& queries, const Shape& keys_values, CostReport& report) const {
    require(queries.size() == 3 && keys_values.size() == 3, ErrorKind::ShapeMismatch,
            this->name() + ": expected [N,L,D] inputs, got " + to_string(queries) + " and " +
                to_string(keys_values));
    if (to_q_) to_q_->trace(queries, report);
    if (to_k_) {
      to_k_->trace(keys_values, report);
      to_v_->trace(keys_values, report);
    }
    // scores (Lq x Lk x dim) plus context (Lq x Lk x dim)
    const std::uint64_t macs = 2ULL * queries[0] * queries[1] * keys_values[1] * spec_.dim;
    report.add(this->name() + ".attention", 0, macs);
    Shape merged{queries[0], queries[1], spec_.dim};
    return proj_ ? proj_->trace(merged, report) : merged;
  }

  const AttentionSpec& spec() const { return spec_; }
  Linear<T>* to_q() { return to_q_; }
  Linear<T>* to_k() { return to_k_; }
  Linear<T>* to_v() { return to_v_; }
  Linear<T>* proj() { return proj_; }

 private:
  AttentionSpec spec_;
  Linear<T>* to_q_ = nullptr;
  Linear<T>* to_k_ = nullptr;
  Linear<T>* to_v_ = nullptr;
  Linear<T>* proj_ = nullptr;
};

}  // namespace ctfm
