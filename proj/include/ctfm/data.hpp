#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctfm/error.hpp"
#include "ctfm/rng.hpp"
#include "ctfm/tensor.hpp"

namespace ctfm {

/// A multi-band image with its binary cloud mask. Bands are [B,H,W] in [0,1],
/// the mask is [H,W] in {0,1}.
struct Scene {
  std::string id;
  Tensor<float> bands;
  Tensor<float> mask;

  std::size_t band_count() const { return bands.dim(0); }
  std::size_t height() const { return bands.dim(1); }
  std::size_t width() const { return bands.dim(2); }

  void validate() const {
    require(bands.defined() && bands.rank() == 3, ErrorKind::ShapeMismatch, "scene " + id + ": bands must be [B,H,W]");
    require(mask.defined() && mask.rank() == 2 && mask.dim(0) == height() && mask.dim(1) == width(),
            ErrorKind::ShapeMismatch,
            "scene " + id + ": mask " + to_string(mask.shape()) + " does not match bands " + to_string(bands.shape()));
    for (float v : mask.data())
      require(v == 0.0f || v == 1.0f, ErrorKind::Format, "scene " + id + ": mask is not binary");
  }
};

struct SynthOptions {
  std::size_t size = 64;
  std::size_t bands = 4;
  double cloud_density = 0.5;  // fraction threshold on the cloud field, in [0,1]
  double texture_level = 0.5;  // amplitude of high-frequency land clutter, in [0,1]
};

namespace detail {

/// Lattice value noise with smoothstep interpolation. Arithmetic only, so the
/// result depends on nothing but the generator stream.
class ValueNoise {
 public:
  ValueNoise(SplitMix64& rng, std::size_t size, std::size_t cell)
      : cell_(std::max<std::size_t>(1, cell)), cells_(size / cell_ + 2) {
    lattice_.resize(cells_ * cells_);
    for (double& v : lattice_) v = rng.uniform();
  }

  double at(std::size_t y, std::size_t x) const {
    const std::size_t cy = y / cell_, cx = x / cell_;
    const double fy = smooth(static_cast<double>(y % cell_) / static_cast<double>(cell_));
    const double fx = smooth(static_cast<double>(x % cell_) / static_cast<double>(cell_));
    const double a = lattice_[cy * cells_ + cx], b = lattice_[cy * cells_ + cx + 1];
    const double c = lattice_[(cy + 1) * cells_ + cx], d = lattice_[(cy + 1) * cells_ + cx + 1];
    const double top = a + (b - a) * fx, bottom = c + (d - c) * fx;
    return top + (bottom - top) * fy;
  }

 private:
  static double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

  std::size_t cell_;
  std::size_t cells_;
  std::vector<double> lattice_;
};

/// Sum of octaves normalized back into [0,1).
class FractalNoise {
 public:
  FractalNoise(SplitMix64& rng, std::size_t size, std::size_t base_cell, std::size_t octaves) {
    double amplitude = 1.0;
    std::size_t cell = base_cell;
    for (std::size_t o = 0; o < octaves && cell >= 1; ++o) {
      layers_.emplace_back(rng, size, cell);
      weights_.push_back(amplitude);
      total_ += amplitude;
      amplitude *= 0.5;
      cell /= 2;
    }
  }

  double at(std::size_t y, std::size_t x) const {
    double v = 0.0;
    for (std::size_t i = 0; i < layers_.size(); ++i) v += weights_[i] * layers_[i].at(y, x);
    return v / total_;
  }

 private:
  std::vector<ValueNoise> layers_;
  std::vector<double> weights_;
  double total_ = 0.0;
};

}  // namespace detail

/// Deterministic synthetic cloud scene: smooth per-band background, land
/// texture correlated across bands, and bright clouds where a smooth field
/// falls below the density threshold. The mask is exactly the cloud support.
inline Scene synth_scene(std::uint64_t seed, const SynthOptions& opt) {
  require(opt.cloud_density >= 0.0 && opt.cloud_density <= 1.0, ErrorKind::InvalidParameter,
          "synth: cloud density must lie in [0, 1]");
  require(opt.texture_level >= 0.0 && opt.texture_level <= 1.0, ErrorKind::InvalidParameter,
          "synth: texture level must lie in [0, 1]");
  require(opt.size >= 1 && opt.bands >= 1, ErrorKind::InvalidParameter, "synth: size and bands must be >= 1");
  const std::size_t n = opt.size, nb = opt.bands;
  SplitMix64 rng(seed);
  const std::size_t coarse = std::max<std::size_t>(4, n / 2);

  // The cloud field comes first so the mask for a seed is independent of band count.
  detail::FractalNoise cloud_field(rng, n, std::max<std::size_t>(4, n / 4), 3);
  detail::FractalNoise texture(rng, n, 4, 2);
  std::vector<detail::ValueNoise> background;
  std::vector<double> offset, spread, texture_gain, cloud_level;
  for (std::size_t b = 0; b < nb; ++b) {
    background.emplace_back(rng, n, coarse);
    offset.push_back(rng.uniform(0.05, 0.25));
    spread.push_back(rng.uniform(0.15, 0.35));
    texture_gain.push_back(rng.uniform(0.5, 1.0));
    cloud_level.push_back(rng.uniform(0.82, 0.95));
  }

  Scene scene;
  scene.id = "synth_" + std::to_string(seed);
  scene.bands = Tensor<float>({nb, n, n});
  scene.mask = Tensor<float>({n, n});
  // Minimum cloud opacity on the mask support; the interior ramps to opaque.
  const double edge_alpha = 0.6, ramp = 0.08;
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double field = cloud_field.at(y, x);
      const bool cloud = field < opt.cloud_density || opt.cloud_density >= 1.0;
      scene.mask.at({y, x}) = cloud ? 1.0f : 0.0f;
      const double alpha = cloud ? std::min(1.0, edge_alpha + (opt.cloud_density - field) / ramp) : 0.0;
      const double clutter = opt.texture_level * 0.3 * (texture.at(y, x) - 0.5);
      for (std::size_t b = 0; b < nb; ++b) {
        const double land = offset[b] + spread[b] * background[b].at(y, x) + texture_gain[b] * clutter;
        const double sky = cloud_level[b] + 0.05 * (texture.at(x, y) - 0.5);
        const double v = land * (1.0 - alpha) + sky * alpha;
        scene.bands.at({b, y, x}) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return scene;
}

/// One non-overlapping tile. Bands [B,P,P], mask [P,P].
struct Patch {
  std::string scene_id;
  std::size_t row = 0;
  std::size_t col = 0;
  Tensor<float> bands;
  Tensor<float> mask;
};

struct PatchSet {
  std::size_t patch_size = 0;
  std::size_t height = 0;  // original scene extent, before padding
  std::size_t width = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Patch> patches;  // row-major
};

namespace detail {

/// Mirror index without repeating the edge sample; handles any overshoot.
inline std::size_t reflect_index(std::size_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::size_t period = 2 * (n - 1);
  const std::size_t r = i % period;
  return r < n ? r : period - r;
}

inline std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

}  // namespace detail

/// Pads bottom/right by reflection up to a multiple of `patch_size` and cuts
/// the scene into tiles.
inline PatchSet crop(const Scene& scene, std::size_t patch_size, std::size_t alignment = 16) {
  scene.validate();
  require(patch_size >= 1 && patch_size % alignment == 0, ErrorKind::InvalidParameter,
          "crop: patch size " + std::to_string(patch_size) + " must be a positive multiple of " +
              std::to_string(alignment));
  PatchSet set;
  set.patch_size = patch_size;
  set.height = scene.height();
  set.width = scene.width();
  set.rows = detail::round_up(set.height, patch_size) / patch_size;
  set.cols = detail::round_up(set.width, patch_size) / patch_size;
  const std::size_t nb = scene.band_count();
  for (std::size_t r = 0; r < set.rows; ++r) {
    for (std::size_t c = 0; c < set.cols; ++c) {
      Patch p{scene.id, r, c, Tensor<float>({nb, patch_size, patch_size}), Tensor<float>({patch_size, patch_size})};
      for (std::size_t y = 0; y < patch_size; ++y) {
        const std::size_t sy = detail::reflect_index(r * patch_size + y, set.height);
        for (std::size_t x = 0; x < patch_size; ++x) {
          const std::size_t sx = detail::reflect_index(c * patch_size + x, set.width);
          p.mask.at({y, x}) = scene.mask.at({sy, sx});
          for (std::size_t b = 0; b < nb; ++b) p.bands.at({b, y, x}) = scene.bands.at({b, sy, sx});
        }
      }
      set.patches.push_back(std::move(p));
    }
  }
  return set;
}

/// Reassembles per-patch [P,P] (or [1,P,P]) maps into the unpadded [H,W] map.
inline Tensor<float> stitch(const PatchSet& set, const std::vector<Tensor<float>>& predictions) {
  require(predictions.size() == set.patches.size(), ErrorKind::ShapeMismatch,
          "stitch: " + std::to_string(predictions.size()) + " predictions for " +
              std::to_string(set.patches.size()) + " patches");
  const std::size_t p = set.patch_size;
  Tensor<float> out({set.height, set.width});
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& pred = predictions[i];
    require(pred.numel() == p * p, ErrorKind::ShapeMismatch,
            "stitch: prediction " + std::to_string(i) + " has shape " + to_string(pred.shape()));
    const std::size_t r = set.patches[i].row, c = set.patches[i].col;
    for (std::size_t y = 0; y < p && r * p + y < set.height; ++y)
      for (std::size_t x = 0; x < p && c * p + x < set.width; ++x)
        out.at({r * p + y, c * p + x}) = pred[y * p + x];
  }
  return out;
}

// ---------------------------------------------------------------------------
// File formats

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  require(in.gcount() == 4, ErrorKind::Format, what + ": truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v & 0xffffffffULL));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t get_u64(std::istream& in, const std::string& what) {
  const std::uint64_t lo = get_u32(in, what);
  const std::uint64_t hi = get_u32(in, what);
  return lo | (hi << 32);
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::Io, "cannot open " + path + " for writing");
  return out;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open " + path);
  return in;
}

/// Next whitespace-separated token of a netpbm header, skipping comments.
inline std::string pnm_token(std::istream& in, const std::string& path) {
  std::string token;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!token.empty()) return token;
      continue;
    }
    token.push_back(static_cast<char>(ch));
  }
  require(!token.empty(), ErrorKind::Format, path + ": truncated header");
  return token;
}

inline std::size_t pnm_number(std::istream& in, const std::string& path) {
  const std::string token = pnm_token(in, path);
  require(!token.empty() && std::all_of(token.begin(), token.end(), [](char c) { return c >= '0' && c <= '9'; }),
          ErrorKind::Format, path + ": bad header field '" + token + "'");
  return std::stoul(token);
}

}  // namespace detail

inline constexpr std::uint8_t kRasterF32 = 1;

/// Single-band raster: "CTFR", u8 dtype tag, u32 H, u32 W, then H*W
/// little-endian float32 values in row-major order.
inline void write_raster(const std::string& path, const Tensor<float>& band) {
  require(band.rank() == 2, ErrorKind::ShapeMismatch, "raster: expected [H,W], got " + to_string(band.shape()));
  auto out = detail::open_out(path);
  out.write("CTFR", 4);
  out.put(static_cast<char>(kRasterF32));
  detail::put_u32(out, static_cast<std::uint32_t>(band.dim(0)));
  detail::put_u32(out, static_cast<std::uint32_t>(band.dim(1)));
  for (float v : band.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  require(out.good(), ErrorKind::Io, "raster: write failed for " + path);
}

inline Tensor<float> read_raster(const std::string& path) {
  auto in = detail::open_in(path);
  char magic[4];
  in.read(magic, 4);
  require(in.gcount() == 4 && std::string(magic, 4) == "CTFR", ErrorKind::Format, path + ": not a CTFR raster");
  const int tag = in.get();
  require(tag == kRasterF32, ErrorKind::Format, path + ": unsupported dtype tag " + std::to_string(tag));
  const std::size_t h = detail::get_u32(in, path), w = detail::get_u32(in, path);
  Tensor<float> band({h, w});
  for (float& v : band.data()) v = std::bit_cast<float>(detail::get_u32(in, path));
  return band;
}

/// Binary mask as 8-bit PGM (P5): 0 -> 0, 1 -> 255.
inline void write_mask_pgm(const std::string& path, const Tensor<float>& mask) {
  require(mask.rank() == 2, ErrorKind::ShapeMismatch, "pgm: expected [H,W], got " + to_string(mask.shape()));
  auto out = detail::open_out(path);
  out << "P5\n" << mask.dim(1) << " " << mask.dim(0) << "\n255\n";
  for (float v : mask.data()) out.put(static_cast<char>(v >= 0.5f ? 255 : 0));
  require(out.good(), ErrorKind::Io, "pgm: write failed for " + path);
}

/// Reads an 8-bit PGM mask. Only 0 and maxval are accepted.
inline Tensor<float> read_mask_pgm(const std::string& path) {
  auto in = detail::open_in(path);
  require(detail::pnm_token(in, path) == "P5", ErrorKind::Format, path + ": not a binary PGM (P5)");
  const std::size_t w = detail::pnm_number(in, path), h = detail::pnm_number(in, path);
  const std::size_t maxval = detail::pnm_number(in, path);
  require(maxval >= 1 && maxval <= 255, ErrorKind::Format, path + ": only 8-bit PGM masks are supported");
  Tensor<float> mask({h, w});
  for (float& v : mask.data()) {
    const int byte = in.get();
    require(byte != EOF, ErrorKind::Format, path + ": truncated pixel data");
    require(byte == 0 || static_cast<std::size_t>(byte) == maxval, ErrorKind::Format,
            path + ": non-binary mask value " + std::to_string(byte));
    v = byte == 0 ? 0.0f : 1.0f;
  }
  return mask;
}

/// Error overlay as PPM (P6): white TP, black TN, red FP, green FN.
inline void write_overlay_ppm(const std::string& path, const Tensor<float>& pred, const Tensor<float>& truth) {
  require(pred.rank() == 2 && pred.shape() == truth.shape(), ErrorKind::ShapeMismatch,
          "overlay: prediction " + to_string(pred.shape()) + " vs truth " + to_string(truth.shape()));
  auto out = detail::open_out(path);
  out << "P6\n" << pred.dim(1) << " " << pred.dim(0) << "\n255\n";
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] >= 0.5f, t = truth[i] >= 0.5f;
    unsigned char rgb[3] = {0, 0, 0};
    if (p && t) rgb[0] = rgb[1] = rgb[2] = 255;
    else if (p) rgb[0] = 255;
    else if (t) rgb[1] = 255;
    out.write(reinterpret_cast<const char*>(rgb), 3);
  }
  require(out.good(), ErrorKind::Io, "overlay: write failed for " + path);
}

/// Scene manifest, paths relative to the manifest file:
///   {"id": ..., "band_files": [...], "mask_file": ..., "normalization": "minmax"|"given",
///    "band_ranges": [[lo, hi], ...]}
inline Scene load_scene(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  nlohmann::json j;
  {
    auto in = detail::open_in(manifest_path);
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Format, manifest_path + ": " + e.what());
    }
  }
  const fs::path base = fs::path(manifest_path).parent_path();
  auto resolve = [&](const std::string& p) { return (base / p).string(); };
  Scene scene;
  std::vector<std::string> band_files;
  std::string mask_file, normalization;
  std::vector<std::vector<double>> ranges;
  try {
    scene.id = j.value("id", fs::path(manifest_path).stem().string());
    band_files = j.at("band_files").get<std::vector<std::string>>();
    mask_file = j.at("mask_file").get<std::string>();
    normalization = j.value("normalization", std::string("minmax"));
    if (j.contains("band_ranges")) ranges = j.at("band_ranges").get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, manifest_path + ": " + e.what());
  }
  require(!band_files.empty(), ErrorKind::Format, manifest_path + ": band_files is empty");
  require(normalization == "minmax" || normalization == "given", ErrorKind::Format,
          manifest_path + ": normalization must be \"minmax\" or \"given\"");
  if (normalization == "given")
    require(ranges.size() == band_files.size(), ErrorKind::Format,
            manifest_path + ": \"given\" normalization needs one [lo, hi] per band");

  std::vector<Tensor<float>> bands;
  for (const auto& file : band_files) {
    const std::string path = resolve(file);
    require(fs::exists(path), ErrorKind::Io, manifest_path + ": missing band file " + path);
    bands.push_back(read_raster(path));
    require(bands.back().shape() == bands.front().shape(), ErrorKind::ShapeMismatch,
            manifest_path + ": band " + file + " has shape " + to_string(bands.back().shape()) + ", expected " +
                to_string(bands.front().shape()));
  }
  const std::size_t h = bands.front().dim(0), w = bands.front().dim(1);
  scene.bands = Tensor<float>({bands.size(), h, w});
  for (std::size_t b = 0; b < bands.size(); ++b) {
    double lo, hi;
    if (normalization == "given") {
      require(ranges[b].size() == 2 && ranges[b][1] > ranges[b][0], ErrorKind::Format,
              manifest_path + ": band_ranges[" + std::to_string(b) + "] must be [lo, hi] with hi > lo");
      lo = ranges[b][0];
      hi = ranges[b][1];
    } else {
      const auto [mn, mx] = std::minmax_element(bands[b].data().begin(), bands[b].data().end());
      lo = *mn;
      hi = *mx;
    }
    const double span = hi - lo;
    float* dst = scene.bands.raw() + b * h * w;
    for (std::size_t i = 0; i < h * w; ++i) {
      const double v = span > 0.0 ? (static_cast<double>(bands[b][i]) - lo) / span : 0.0;
      dst[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  const std::string mask_path = resolve(mask_file);
  require(fs::exists(mask_path), ErrorKind::Io, manifest_path + ": missing mask file " + mask_path);
  scene.mask = read_mask_pgm(mask_path);
  require(scene.mask.dim(0) == h && scene.mask.dim(1) == w, ErrorKind::ShapeMismatch,
          manifest_path + ": mask " + to_string(scene.mask.shape()) + " does not match bands [" +
              std::to_string(h) + "x" + std::to_string(w) + "]");
  return scene;
}

/// Writes bands, mask and a manifest into `dir`; returns the manifest path.
/// Bands are stored already normalized, with "given" ranges [0, 1].
inline std::string save_scene(const Scene& scene, const std::string& dir) {
  namespace fs = std::filesystem;
  scene.validate();
  fs::create_directories(dir);
  nlohmann::json j;
  j["id"] = scene.id;
  j["normalization"] = "given";
  const std::size_t h = scene.height(), w = scene.width();
  for (std::size_t b = 0; b < scene.band_count(); ++b) {
    const std::string file = scene.id + "_b" + std::to_string(b + 1) + ".ctfr";
    Tensor<float> band({h, w}, std::vector<float>(scene.bands.raw() + b * h * w, scene.bands.raw() + (b + 1) * h * w));
    write_raster((fs::path(dir) / file).string(), band);
    j["band_files"].push_back(file);
    j["band_ranges"].push_back({0.0, 1.0});
  }
  const std::string mask_file = scene.id + "_mask.pgm";
  write_mask_pgm((fs::path(dir) / mask_file).string(), scene.mask);
  j["mask_file"] = mask_file;
  const std::string manifest = (fs::path(dir) / (scene.id + ".json")).string();
  auto out = detail::open_out(manifest);
  out << j.dump(2) << "\n";
  return manifest;
}

/// Every scene manifest in a directory, sorted by file name.
inline std::vector<std::string> list_manifests(const std::string& dir) {
  namespace fs = std::filesystem;
  require(fs::is_directory(dir), ErrorKind::Io, "dataset: " + dir + " is not a directory");
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json") out.push_back(entry.path().string());
  std::sort(out.begin(), out.end());
  require(!out.empty(), ErrorKind::Io, "dataset: no scene manifests in " + dir);
  return out;
}

inline std::vector<Scene> load_dataset(const std::string& dir) {
  std::vector<Scene> scenes;
  for (const auto& manifest : list_manifests(dir)) scenes.push_back(load_scene(manifest));
  return scenes;
}

/// Stacks patches into a batch: bands [N,B,P,P], masks [N,1,P,P].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<const Patch*>& patches) {
  require(!patches.empty(), ErrorKind::InvalidParameter, "batch: no patches");
  const Shape& bs = patches.front()->bands.shape();
  const std::size_t nb = bs[0], p = bs[1], n = patches.size();
  Tensor<T> x({n, nb, p, p});
  Tensor<T> y({n, 1, p, p});
  for (std::size_t i = 0; i < n; ++i) {
    require(patches[i]->bands.shape() == bs, ErrorKind::ShapeMismatch,
            "batch: patch " + std::to_string(i) + " has shape " + to_string(patches[i]->bands.shape()));
    std::copy(patches[i]->bands.data().begin(), patches[i]->bands.data().end(), x.raw() + i * nb * p * p);
    std::copy(patches[i]->mask.data().begin(), patches[i]->mask.data().end(), y.raw() + i * p * p);
  }
  return {x, y};
}

}  // namespace ctfm
