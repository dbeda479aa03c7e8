#pragma once

#include <bit>
#include <fstream>

#include "msadnet/model.hpp"

namespace msad {

// ---------------------------------------------------------------------------
// Self-describing binary checkpoint:
//   "MSAD" | u32 version | u64 json length | config JSON |
//   u64 record count | records
// record: u64 name length | name | u8 dtype (0=f32, 1=f64) | u64 rank |
//         u64 extents[rank] | raw little-endian values
// Round-trips are bit-exact.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

namespace detail {

constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_bytes(std::ofstream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename V>
void write_pod(std::ofstream& os, V v) {
  write_bytes(os, &v, sizeof(V));
}

inline void read_bytes(std::ifstream& is, void* p, std::size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is) throw ParseError(str("checkpoint: truncated while reading ", what));
}

template <typename V>
V read_pod(std::ifstream& is, const char* what) {
  V v{};
  read_bytes(is, &v, sizeof(V), what);
  return v;
}

template <typename T>
constexpr std::uint8_t dtype_tag() {
  return sizeof(T) == 4 ? 0 : 1;
}

template <typename T>
void write_record(std::ofstream& os, const std::string& name, const Tensor<T>& t) {
  write_pod<std::uint64_t>(os, name.size());
  write_bytes(os, name.data(), name.size());
  write_pod<std::uint8_t>(os, dtype_tag<T>());
  write_pod<std::uint64_t>(os, t.rank());
  for (std::size_t e : t.shape()) write_pod<std::uint64_t>(os, e);
  write_bytes(os, t.values().data(), t.size() * sizeof(T));
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, ModelGraph<T>& model,
                     const json& extra = json::object()) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(str("checkpoint: cannot open '", path, "' for writing"));

  json doc;
  doc["model"] = model.config;
  if (!extra.empty()) doc["run"] = extra;
  const std::string cfg = doc.dump();

  os.write("MSAD", 4);
  detail::write_pod<std::uint32_t>(os, detail::kCheckpointVersion);
  detail::write_pod<std::uint64_t>(os, cfg.size());
  detail::write_bytes(os, cfg.data(), cfg.size());

  auto params = model.parameters();
  auto buffers = model.buffers();
  detail::write_pod<std::uint64_t>(os, params.size() + buffers.size());
  for (auto& [name, t] : params) detail::write_record(os, name, t);
  for (auto& [name, t] : buffers) detail::write_record(os, name, t);
  if (!os) throw IoError(str("checkpoint: write to '", path, "' failed"));
}

/// Config document without the tensor payload (used to pick the precision
/// before instantiating the graph).
inline json read_checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(str("checkpoint: cannot open '", path, "'"));
  char magic[4];
  detail::read_bytes(is, magic, 4, "magic");
  if (std::string(magic, 4) != "MSAD")
    throw ParseError(str("checkpoint: '", path, "' has bad magic bytes"));
  const auto version = detail::read_pod<std::uint32_t>(is, "version");
  if (version != detail::kCheckpointVersion)
    throw ParseError(str("checkpoint: unsupported format version ", version));
  const auto len = detail::read_pod<std::uint64_t>(is, "config length");
  std::string cfg(len, '\0');
  detail::read_bytes(is, cfg.data(), len, "config block");
  try {
    return json::parse(cfg);
  } catch (const json::exception& e) {
    throw ParseError(str("checkpoint: config block is not valid JSON: ", e.what()));
  }
}

template <typename T>
ModelGraph<T> load_checkpoint(const std::string& path) {
  const json doc = read_checkpoint_config(path);
  ModelConfig cfg = doc.at("model").get<ModelConfig>();
  const bool want64 = sizeof(T) == 8;
  if ((cfg.precision == "float64") != want64)
    throw ConfigError(str("checkpoint: stored precision is ", cfg.precision,
                          " but a different precision was requested"));
  ModelGraph<T> model = build_msadnet<T>(cfg);

  std::map<std::string, Tensor<T>> slots;
  for (auto& [name, t] : model.parameters()) slots.emplace(name, t);
  for (auto& [name, t] : model.buffers()) slots.emplace(name, t);

  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(str("checkpoint: cannot open '", path, "'"));
  is.seekg(4 + sizeof(std::uint32_t), std::ios::beg);
  const auto cfg_len = detail::read_pod<std::uint64_t>(is, "config length");
  is.seekg(static_cast<std::streamoff>(cfg_len), std::ios::cur);

  const auto count = detail::read_pod<std::uint64_t>(is, "record count");
  std::size_t filled = 0;
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto name_len = detail::read_pod<std::uint64_t>(is, "record name length");
    std::string name(name_len, '\0');
    detail::read_bytes(is, name.data(), name_len, "record name");
    const auto dtype = detail::read_pod<std::uint8_t>(is, "record dtype");
    if (dtype != detail::dtype_tag<T>())
      throw ParseError(str("checkpoint: record '", name, "' dtype does not match ",
                           cfg.precision));
    const auto rank = detail::read_pod<std::uint64_t>(is, "record rank");
    Shape shape(rank);
    for (auto& e : shape)
      e = detail::read_pod<std::uint64_t>(is, "record extent");

    auto it = slots.find(name);
    if (it == slots.end())
      throw ParseError(str("checkpoint: record '", name,
                           "' does not match any tensor of the configured model"));
    if (it->second.shape() != shape)
      throw ParseError(str("checkpoint: record '", name, "' has shape ",
                           shape_str(shape), " but the model expects ",
                           shape_str(it->second.shape())));
    detail::read_bytes(is, it->second.values().data(),
                       it->second.size() * sizeof(T), name.c_str());
    ++filled;
  }
  if (filled != slots.size())
    throw ParseError(str("checkpoint: ", filled, " records filled but the model has ",
                         slots.size(), " tensors"));
  return model;
}

}  // namespace msad
