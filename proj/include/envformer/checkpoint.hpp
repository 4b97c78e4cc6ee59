#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "envformer/array.hpp"
#include "envformer/common.hpp"

namespace envformer {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts are "
              "not supported");

// Checkpoint container layout:
//   bytes 0..7   magic "EFCKPT01"
//   bytes 8..15  uint64 header length H (little-endian)
//   H bytes      JSON header: version, dtype, seed, meta, array directory
//   rest         raw array payloads, in directory order, little-endian
inline constexpr char kCheckpointMagic[8] = {'E', 'F', 'C', 'K',
                                             'P', 'T', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

template <typename T>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() {
  return "f32";
}
template <>
inline const char* dtype_name<double>() {
  return "f64";
}

template <typename T>
struct Checkpoint {
  std::vector<std::pair<std::string, Array<T>>> arrays;
  nlohmann::json meta;
  std::uint64_t seed = 0;

  const Array<T>& find(const std::string& name) const {
    for (const auto& [n, a] : arrays)
      if (n == name) return a;
    throw SchemaError("checkpoint: missing array '" + name + "'");
  }
  bool contains(const std::string& name) const {
    for (const auto& [n, a] : arrays)
      if (n == name) return true;
    return false;
  }
};

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["dtype"] = dtype_name<T>();
  header["seed"] = ckpt.seed;
  header["meta"] = ckpt.meta;
  nlohmann::json dir = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, arr] : ckpt.arrays) {
    dir.push_back({{"name", name},
                   {"shape", arr.shape},
                   {"offset", offset},
                   {"numel", arr.numel()}});
    offset += arr.numel();
  }
  header["arrays"] = std::move(dir);
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, arr] : ckpt.arrays)
    out.write(reinterpret_cast<const char*>(arr.data.data()),
              static_cast<std::streamsize>(arr.data.size() * sizeof(T)));
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

/// Reads only the JSON header (cheap; used for dtype/metadata dispatch).
inline nlohmann::json load_checkpoint_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw ParseError("not a checkpoint file: " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen > (1ull << 30))
    throw ParseError("checkpoint header corrupt: " + path);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw ParseError("checkpoint header truncated: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header is not valid JSON: ") +
                     e.what());
  }
  if (!header.contains("version") || !header.contains("dtype") ||
      !header.contains("arrays"))
    throw SchemaError("checkpoint header missing required fields: " + path);
  if (header["version"].get<int>() != kCheckpointVersion)
    throw SchemaError("unsupported checkpoint version " +
                      header["version"].dump());
  return header;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  const nlohmann::json header = load_checkpoint_header(path);
  if (header["dtype"].get<std::string>() != dtype_name<T>())
    throw SchemaError("checkpoint dtype is " +
                      header["dtype"].get<std::string>() + ", expected " +
                      dtype_name<T>() + ": " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::uint64_t hlen = 0;
  in.seekg(8);
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  in.seekg(static_cast<std::streamoff>(16 + hlen));

  Checkpoint<T> ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  ckpt.seed = header.value("seed", std::uint64_t{0});
  for (const auto& entry : header["arrays"]) {
    const auto name = entry["name"].get<std::string>();
    const auto shape = entry["shape"].get<std::vector<std::size_t>>();
    const auto numel = entry["numel"].get<std::uint64_t>();
    if (numel != shape_numel(shape))
      throw SchemaError("checkpoint array '" + name +
                        "' shape inconsistent with element count");
    Array<T> arr{shape};
    in.read(reinterpret_cast<char*>(arr.data.data()),
            static_cast<std::streamsize>(numel * sizeof(T)));
    if (!in)
      throw ParseError("checkpoint payload truncated at array '" + name + "'");
    ckpt.arrays.emplace_back(name, std::move(arr));
  }
  return ckpt;
}

/// Content fingerprint of any file (hex FNV-1a over raw bytes).
inline std::string file_fingerprint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file for fingerprinting: " + path);
  std::uint64_t h = kFnvOffset;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  return hex64(h);
}

}  // namespace envformer
