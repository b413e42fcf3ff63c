#pragma once

// Binary tensor serialization and the checkpoint container.
// Tensor wire format: rank (u32 LE), extents (u32 LE each), payload (f64 LE).
// Checkpoint: magic, JSON manifest (string metadata + tensor name order),
// then the tensors back to back in manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "metasr/tensor.hpp"

namespace metasr {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

inline void write_tensor(std::ostream& os, const Tensor& t) {
  const uint32_t rank = static_cast<uint32_t>(t.rank());
  os.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
  for (int64_t d : t.shape()) {
    const uint32_t e = static_cast<uint32_t>(d);
    os.write(reinterpret_cast<const char*>(&e), sizeof(e));
  }
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
  if (!os) throw IoError("tensor write failed");
}

inline Tensor read_tensor(std::istream& is) {
  uint32_t rank = 0;
  is.read(reinterpret_cast<char*>(&rank), sizeof(rank));
  if (!is) throw IoError("tensor read failed: truncated header");
  if (rank > 8) throw IoError("tensor read failed: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t e = 0;
    is.read(reinterpret_cast<char*>(&e), sizeof(e));
    if (!is || e == 0) throw IoError("tensor read failed: bad extent");
    shape[i] = static_cast<int64_t>(e);
  }
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.mutable_data()),
          static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
  if (!is) throw IoError("tensor read failed: truncated payload");
  return t;
}

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& at(const std::string& name) const {
    for (const auto& kv : tensors)
      if (kv.first == name) return kv.second;
    throw IoError("checkpoint is missing tensor " + name);
  }

  // All parameters of ps stored under "<prefix>name".
  void add_params(const std::string& prefix, const ParamList& ps) {
    for (const auto& kv : ps) tensors.emplace_back(prefix + kv.first, kv.second);
  }

  // Extract the tensors under prefix, with the prefix stripped.
  ParamList take_params(const std::string& prefix) const {
    ParamList out;
    for (const auto& kv : tensors)
      if (kv.first.rfind(prefix, 0) == 0)
        out.emplace_back(kv.first.substr(prefix.size()), kv.second);
    return out;
  }
};

inline constexpr char kCheckpointMagic[8] = {'M', 'S', 'R', 'C', 'K', 'P', 'T', '1'};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  nlohmann::json manifest;
  manifest["meta"] = ck.meta;
  auto& names = manifest["names"] = nlohmann::json::array();
  for (const auto& kv : ck.tensors) names.push_back(kv.first);
  const std::string m = manifest.dump();
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const uint64_t len = m.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof(len));
  os.write(m.data(), static_cast<std::streamsize>(m.size()));
  for (const auto& kv : ck.tensors) write_tensor(os, kv.second);
  if (!os) throw IoError("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[sizeof(kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError(path + " is not a checkpoint file");
  uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!is || len > (1ull << 30)) throw IoError(path + ": bad manifest length");
  std::string m(len, '\0');
  is.read(m.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError(path + ": truncated manifest");
  nlohmann::json manifest = nlohmann::json::parse(m, nullptr, false);
  if (manifest.is_discarded()) throw IoError(path + ": manifest is not valid JSON");
  Checkpoint ck;
  if (manifest.contains("meta"))
    for (auto& [k, v] : manifest["meta"].items()) ck.meta[k] = v.get<std::string>();
  for (const auto& name : manifest["names"])
    ck.tensors.emplace_back(name.get<std::string>(), read_tensor(is));
  return ck;
}

}  // namespace metasr
