#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctfm/error.hpp"

namespace ctfm {

struct StageConfig {
  std::size_t channels = 0;
  std::size_t blocks = 1;
  std::size_t expansion = 3;  // Mobile sub-block expansion relative to its input

  bool operator==(const StageConfig&) const = default;
};

struct TokenConfig {
  std::size_t count = 6;  // M
  std::size_t dim = 160;  // d
  std::size_t heads = 4;  // used by every attention in the encoder
  std::size_t ffn_expansion = 2;

  bool operator==(const TokenConfig&) const = default;
};

struct FpmConfig {
  bool enabled = true;  // false: a single pointwise conv replaces the pyramid
  std::size_t inner_width = 72;
  std::size_t out_channels = 96;
  std::vector<std::size_t> dilation_rates{6, 12, 18};
  bool hierarchical_fusion = true;

  bool operator==(const FpmConfig&) const = default;
};

struct LwamConfig {
  bool enabled = true;  // false: skips reach the decoder ungated
  std::vector<double> pooling_ps{1.0, 2.0};
  std::size_t mlp_reduction = 8;

  bool operator==(const LwamConfig&) const = default;
};

/// Every architecture choice of the network. Defaults are the reference
/// configuration profiled against the published efficiency figures.
struct ModelConfig {
  std::size_t bands = 4;
  std::size_t stem_channels = 8;
  std::vector<StageConfig> stages{{12, 1, 2}, {24, 2, 3}, {48, 2, 3}, {96, 3, 4}};
  TokenConfig tokens;
  FpmConfig fpm;
  LwamConfig lwam;
  std::vector<std::size_t> decoder_channels{48, 24, 16, 8};
  double threshold = 0.5;
  double bn_momentum = 0.1;
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;

  /// Spatial extents must be divisible by this: stem stride 2, then one
  /// stride-2 block per stage.
  std::size_t output_stride() const { return std::size_t{2} << stages.size(); }

  static ModelConfig reference() { return ModelConfig{}; }

  /// Small network used for desk-scale training on 64x64 patches.
  static ModelConfig tiny() {
    ModelConfig c;
    c.stem_channels = 8;
    c.stages = {{16, 1, 2}, {24, 1, 3}, {32, 1, 3}};
    c.tokens = TokenConfig{4, 32, 2, 2};
    c.fpm.inner_width = 16;
    c.fpm.out_channels = 32;
    c.lwam.mlp_reduction = 4;
    c.decoder_channels = {24, 16, 8};
    return c;
  }

  /// Minimal widths for finite-difference gradient checks.
  static ModelConfig gradcheck() {
    ModelConfig c;
    c.bands = 2;
    c.stem_channels = 4;
    c.stages = {{4, 1, 2}, {8, 1, 2}};
    c.tokens = TokenConfig{2, 16, 2, 2};
    c.fpm.inner_width = 4;
    c.fpm.out_channels = 4;
    c.fpm.dilation_rates = {1, 2, 3};
    c.lwam.mlp_reduction = 2;
    c.decoder_channels = {4, 4};
    return c;
  }

  /// Table-style ablation variants of this configuration.
  ModelConfig with_modules(bool use_fpm, bool use_lwam) const {
    ModelConfig c = *this;
    c.fpm.enabled = use_fpm;
    c.lwam.enabled = use_lwam;
    return c;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      require(v >= 1, ErrorKind::InvalidParameter, std::string("config: ") + what + " must be >= 1");
    };
    positive(bands, "bands");
    positive(stem_channels, "stem_channels");
    require(!stages.empty(), ErrorKind::InvalidParameter, "config: at least one stage is required");
    positive(tokens.count, "tokens.count");
    positive(tokens.dim, "tokens.dim");
    positive(tokens.heads, "tokens.heads");
    positive(tokens.ffn_expansion, "tokens.ffn_expansion");
    require(tokens.dim % tokens.heads == 0, ErrorKind::InvalidParameter,
            "config: tokens.dim not divisible by tokens.heads");
    std::size_t in = stem_channels;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      positive(stages[s].channels, "stage channels");
      positive(stages[s].blocks, "stage blocks");
      positive(stages[s].expansion, "stage expansion");
      // Cross attention splits both the block input and output widths across heads.
      require(in % tokens.heads == 0 && stages[s].channels % tokens.heads == 0,
              ErrorKind::InvalidParameter,
              "config: stage " + std::to_string(s) + " widths not divisible by tokens.heads");
      in = stages[s].channels;
    }
    positive(fpm.inner_width, "fpm.inner_width");
    positive(fpm.out_channels, "fpm.out_channels");
    require(!fpm.dilation_rates.empty(), ErrorKind::InvalidParameter, "config: fpm.dilation_rates is empty");
    for (std::size_t i = 0; i < fpm.dilation_rates.size(); ++i) {
      positive(fpm.dilation_rates[i], "fpm dilation rate");
      require(i == 0 || fpm.dilation_rates[i] > fpm.dilation_rates[i - 1], ErrorKind::InvalidParameter,
              "config: fpm.dilation_rates must be strictly increasing");
    }
    require(lwam.pooling_ps.size() == 2, ErrorKind::InvalidParameter,
            "config: lwam.pooling_ps must have exactly two entries");
    for (double p : lwam.pooling_ps)
      require(p >= 1.0, ErrorKind::InvalidParameter, "config: lwam p-values must be >= 1");
    positive(lwam.mlp_reduction, "lwam.mlp_reduction");
    require(decoder_channels.size() == stages.size(), ErrorKind::InvalidParameter,
            "config: need one decoder width per stage (" + std::to_string(stages.size()) + "), got " +
                std::to_string(decoder_channels.size()));
    for (std::size_t c : decoder_channels) positive(c, "decoder channels");
    require(threshold > 0.0 && threshold < 1.0, ErrorKind::InvalidParameter,
            "config: threshold must lie in (0, 1)");
    require(bn_momentum > 0.0 && bn_momentum <= 1.0, ErrorKind::InvalidParameter,
            "config: bn_momentum must lie in (0, 1]");
  }
};

inline void to_json(nlohmann::json& j, const StageConfig& s) {
  j = {{"channels", s.channels}, {"blocks", s.blocks}, {"expansion", s.expansion}};
}
inline void from_json(const nlohmann::json& j, StageConfig& s) {
  j.at("channels").get_to(s.channels);
  s.blocks = j.value("blocks", s.blocks);
  s.expansion = j.value("expansion", s.expansion);
}

inline void to_json(nlohmann::json& j, const TokenConfig& t) {
  j = {{"count", t.count}, {"dim", t.dim}, {"heads", t.heads}, {"ffn_expansion", t.ffn_expansion}};
}
inline void from_json(const nlohmann::json& j, TokenConfig& t) {
  t.count = j.value("count", t.count);
  t.dim = j.value("dim", t.dim);
  t.heads = j.value("heads", t.heads);
  t.ffn_expansion = j.value("ffn_expansion", t.ffn_expansion);
}

inline void to_json(nlohmann::json& j, const FpmConfig& f) {
  j = {{"enabled", f.enabled},
       {"inner_width", f.inner_width},
       {"out_channels", f.out_channels},
       {"dilation_rates", f.dilation_rates},
       {"hierarchical_fusion", f.hierarchical_fusion}};
}
inline void from_json(const nlohmann::json& j, FpmConfig& f) {
  f.enabled = j.value("enabled", f.enabled);
  f.inner_width = j.value("inner_width", f.inner_width);
  f.out_channels = j.value("out_channels", f.out_channels);
  f.dilation_rates = j.value("dilation_rates", f.dilation_rates);
  f.hierarchical_fusion = j.value("hierarchical_fusion", f.hierarchical_fusion);
}

inline void to_json(nlohmann::json& j, const LwamConfig& l) {
  j = {{"enabled", l.enabled}, {"pooling_ps", l.pooling_ps}, {"mlp_reduction", l.mlp_reduction}};
}
inline void from_json(const nlohmann::json& j, LwamConfig& l) {
  l.enabled = j.value("enabled", l.enabled);
  l.pooling_ps = j.value("pooling_ps", l.pooling_ps);
  l.mlp_reduction = j.value("mlp_reduction", l.mlp_reduction);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"bands", c.bands},
       {"stem_channels", c.stem_channels},
       {"stages", c.stages},
       {"tokens", c.tokens},
       {"fpm", c.fpm},
       {"lwam", c.lwam},
       {"decoder_channels", c.decoder_channels},
       {"threshold", c.threshold},
       {"bn_momentum", c.bn_momentum},
       {"seed", c.seed}};
}

/// Missing keys keep the reference defaults, so a config file may list only
/// what it changes.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.bands = j.value("bands", c.bands);
  c.stem_channels = j.value("stem_channels", c.stem_channels);
  if (j.contains("stages")) c.stages = j.at("stages").get<std::vector<StageConfig>>();
  if (j.contains("tokens")) from_json(j.at("tokens"), c.tokens);
  if (j.contains("fpm")) from_json(j.at("fpm"), c.fpm);
  if (j.contains("lwam")) from_json(j.at("lwam"), c.lwam);
  c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
  c.threshold = j.value("threshold", c.threshold);
  c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
  c.seed = j.value("seed", c.seed);
}

inline ModelConfig parse_model_config(const std::string& text) {
  ModelConfig config;
  try {
    from_json(nlohmann::json::parse(text), config);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("config: ") + e.what());
  }
  config.validate();
  return config;
}

inline ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Io, "config: cannot open " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_model_config(buffer.str());
}

inline std::string dump_model_config(const ModelConfig& config, int indent = 2) {
  return nlohmann::json(config).dump(indent);
}

}  // namespace ctfm
