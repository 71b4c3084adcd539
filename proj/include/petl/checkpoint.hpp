#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "petl/layout.hpp"
#include "petl/tensor.hpp"

// Record file layout (all integers and floats little-endian):
//   magic   "PETLCKPT" (8 bytes)
//   u32     format version (1)
//   u32     kind (0 = backbone, 1 = PETL-only, 2 = dataset cache)
//   u64     record count
//   per record:
//     u32 id length, id bytes (UTF-8, no terminator)
//     u32 rank, u64 extent per axis
//     f64 values, row-major

namespace petl::checkpoint {

inline constexpr char kMagic[8] = {'P', 'E', 'T', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

enum class Kind : std::uint32_t { Backbone = 0, Petl = 1, Dataset = 2 };

using Records = std::map<std::string, Tensor>;

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
  } else {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
}

template <class T>
T get(std::istream& is) {
  std::array<unsigned char, sizeof(T)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T)))
    throw ConfigError("checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

}  // namespace detail

inline void write(std::ostream& os, const Records& records, Kind kind) {
  os.write(kMagic, sizeof(kMagic));
  detail::put<std::uint32_t>(os, kVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(kind));
  detail::put<std::uint64_t>(os, records.size());
  for (const auto& [id, t] : records) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(id.size()));
    os.write(id.data(), static_cast<std::streamsize>(id.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put<std::uint64_t>(os, e);
    for (double v : t.data()) detail::put<double>(os, v);
  }
}

struct Loaded {
  Kind kind;
  Records records;
};

inline Loaded read(std::istream& is) {
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw ConfigError("checkpoint: bad magic");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kVersion)
    throw ConfigError("checkpoint: unsupported version " + std::to_string(version));
  Loaded out{static_cast<Kind>(detail::get<std::uint32_t>(is)), {}};
  const auto count = detail::get<std::uint64_t>(is);
  for (std::uint64_t r = 0; r < count; ++r) {
    std::string id(detail::get<std::uint32_t>(is), '\0');
    if (!is.read(id.data(), static_cast<std::streamsize>(id.size())))
      throw ConfigError("checkpoint: truncated id");
    Shape shape(detail::get<std::uint32_t>(is));
    for (auto& e : shape) e = detail::get<std::uint64_t>(is);
    std::vector<double> data(numel_of(shape));
    for (double& v : data) v = detail::get<double>(is);
    if (!out.records.emplace(id, Tensor::from(std::move(shape), std::move(data))).second)
      throw ConfigError("checkpoint: duplicate id " + id);
  }
  return out;
}

inline void save(const std::filesystem::path& path, const Records& records, Kind kind) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open " + path.string() + " for writing");
  write(os, records, kind);
}

inline Loaded load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path.string());
  return read(is);
}

/// All backbone parameters of a store.
inline Records backbone_records(const ParamStore& store) {
  Records r;
  for (const auto& [id, t] : store.entries())
    if (param_owner(id) == ParamOwner::Backbone) r.emplace(id, t.detach());
  return r;
}

/// Trainable parameters only, plus the buffers of PETL modules.
inline Records trainable_records(const ParamStore& store) {
  Records r;
  for (const auto& id : store.trainable_ids()) r.emplace(id, store.at(id).detach());
  for (const auto& [id, t] : store.buffers())
    if (param_owner(id) == ParamOwner::Method) r.emplace(id, t.detach());
  return r;
}

}  // namespace petl::checkpoint
