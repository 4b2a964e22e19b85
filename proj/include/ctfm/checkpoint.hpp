#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctfm/config.hpp"
#include "ctfm/data.hpp"
#include "ctfm/error.hpp"
#include "ctfm/model.hpp"

namespace ctfm {

/// Binary checkpoint:
///   "CTFM", u32 version, u32 config length, config JSON,
///   u32 entry count, then per entry:
///   u32 name length, name, u8 dtype tag, u32 rank, u32 extents..., values (little endian).
/// Entries are all parameters and buffers of the model.
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;
inline constexpr std::uint8_t kDtypeF64 = 2;

namespace detail {

template <typename T>
constexpr std::uint8_t dtype_tag() {
  return std::is_same_v<T, float> ? kDtypeF32 : kDtypeF64;
}

inline std::string read_string(std::istream& in, std::uint32_t length, const std::string& what) {
  std::string s(length, '\0');
  in.read(s.data(), length);
  require(static_cast<std::uint32_t>(in.gcount()) == length, ErrorKind::Format, what + ": truncated file");
  return s;
}

/// Architecture fields must agree; seed, threshold and BN momentum may differ.
inline bool same_architecture(ModelConfig a, ModelConfig b) {
  a.seed = b.seed;
  a.threshold = b.threshold;
  a.bn_momentum = b.bn_momentum;
  return a == b;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const CdCtfm<T>& model) {
  auto out = detail::open_out(path);
  out.write("CTFM", 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::string config = dump_model_config(model.config(), -1);
  detail::put_u32(out, static_cast<std::uint32_t>(config.size()));
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  const auto state = model.state();
  detail::put_u32(out, static_cast<std::uint32_t>(state.size()));
  for (const auto& entry : state) {
    detail::put_u32(out, static_cast<std::uint32_t>(entry.name.size()));
    out.write(entry.name.data(), static_cast<std::streamsize>(entry.name.size()));
    out.put(static_cast<char>(detail::dtype_tag<T>()));
    detail::put_u32(out, static_cast<std::uint32_t>(entry.tensor.rank()));
    for (std::size_t d : entry.tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : entry.tensor.data()) {
      if constexpr (std::is_same_v<T, float>)
        detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
      else
        detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  require(out.good(), ErrorKind::Io, "checkpoint: write failed for " + path);
}

/// Raw checkpoint contents, values kept in their stored precision as double.
struct CheckpointData {
  ModelConfig config;
  struct Entry {
    std::uint8_t dtype = kDtypeF32;
    Shape shape;
    std::vector<double> values;
  };
  std::map<std::string, Entry> entries;
};

inline CheckpointData read_checkpoint(const std::string& path) {
  auto in = detail::open_in(path);
  const std::string what = "checkpoint " + path;
  require(detail::read_string(in, 4, what) == "CTFM", ErrorKind::Format, what + ": bad magic");
  const std::uint32_t version = detail::get_u32(in, what);
  require(version == kCheckpointVersion, ErrorKind::Format,
          what + ": unsupported version " + std::to_string(version));
  CheckpointData data;
  data.config = parse_model_config(detail::read_string(in, detail::get_u32(in, what), what));
  const std::uint32_t count = detail::get_u32(in, what);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = detail::read_string(in, detail::get_u32(in, what), what);
    CheckpointData::Entry entry;
    const int tag = in.get();
    require(tag == kDtypeF32 || tag == kDtypeF64, ErrorKind::Format,
            what + ": entry " + name + " has unknown dtype tag " + std::to_string(tag));
    entry.dtype = static_cast<std::uint8_t>(tag);
    const std::uint32_t rank = detail::get_u32(in, what);
    require(rank <= 8, ErrorKind::Format, what + ": entry " + name + " has implausible rank");
    for (std::uint32_t r = 0; r < rank; ++r) entry.shape.push_back(detail::get_u32(in, what));
    entry.values.resize(numel(entry.shape));
    for (double& v : entry.values)
      v = tag == kDtypeF32 ? static_cast<double>(std::bit_cast<float>(detail::get_u32(in, what)))
                           : std::bit_cast<double>(detail::get_u64(in, what));
    require(data.entries.emplace(name, std::move(entry)).second, ErrorKind::Format,
            what + ": duplicate entry " + name);
  }
  return data;
}

/// Copies checkpoint values into an existing model of the same architecture.
template <typename T>
void load_state(CdCtfm<T>& model, const CheckpointData& data, const std::string& origin = "checkpoint") {
  require(detail::same_architecture(model.config(), data.config), ErrorKind::Incompatible,
          origin + ": architecture does not match the model (bands " + std::to_string(data.config.bands) +
              " vs " + std::to_string(model.config().bands) + ")");
  const auto state = model.state();
  require(state.size() == data.entries.size(), ErrorKind::Incompatible,
          origin + ": " + std::to_string(data.entries.size()) + " entries, model has " +
              std::to_string(state.size()));
  for (auto entry : state) {
    auto it = data.entries.find(entry.name);
    require(it != data.entries.end(), ErrorKind::Incompatible, origin + ": missing entry " + entry.name);
    require(it->second.shape == entry.tensor.shape(), ErrorKind::Incompatible,
            origin + ": entry " + entry.name + " has shape " + to_string(it->second.shape) + ", model expects " +
                to_string(entry.tensor.shape()));
    for (std::size_t i = 0; i < entry.tensor.numel(); ++i) entry.tensor[i] = static_cast<T>(it->second.values[i]);
  }
}

template <typename T>
std::unique_ptr<CdCtfm<T>> load_checkpoint(const std::string& path) {
  CheckpointData data = read_checkpoint(path);
  auto model = make_model<T>(data.config);
  load_state(*model, data, "checkpoint " + path);
  model->eval();
  return model;
}

}  // namespace ctfm
