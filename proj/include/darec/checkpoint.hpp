#ifndef DAREC_CHECKPOINT_HPP_
#define DAREC_CHECKPOINT_HPP_

#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "darec/common.hpp"
#include "darec/nn/layers.hpp"
#include "darec/shape_io.hpp"

namespace darec {

// Self-describing checkpoint container:
//   magic "DCKP" | u32 version | u64 json_length | JSON header | payload
// The header carries metadata (kind, stage, frozen flag, config echo, param
// checksum) plus offset tables for float32 parameter blobs and raw byte
// blobs (optimizer state, RNG state). Payload offsets are relative to the
// end of the header. Everything little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json meta;  // free-form metadata, under key "meta" in the header
  std::vector<std::pair<std::string, std::vector<float>>> params;
  std::vector<std::pair<std::string, std::vector<unsigned char>>> blobs;

  const std::vector<float>& param(const std::string& name) const {
    for (const auto& [n, v] : params)
      if (n == name) return v;
    throw CheckpointError("checkpoint has no parameter '" + name + "'");
  }

  bool has_blob(const std::string& name) const {
    for (const auto& [n, v] : blobs)
      if (n == name) return true;
    return false;
  }

  const std::vector<unsigned char>& blob(const std::string& name) const {
    for (const auto& [n, v] : blobs)
      if (n == name) return v;
    throw CheckpointError("checkpoint has no blob '" + name + "'");
  }

  /// FNV-1a over every parameter payload in table order.
  std::uint64_t param_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, values] : params)
      h = fnv1a64(values.data(), values.size() * sizeof(float), h);
    return h;
  }
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["meta"] = ckpt.meta;
  header["param_checksum"] = to_hex(ckpt.param_checksum());

  std::uint64_t offset = 0;
  nlohmann::json param_table = nlohmann::json::array();
  for (const auto& [name, values] : ckpt.params) {
    param_table.push_back({{"name", name}, {"offset", offset}, {"count", values.size()}});
    offset += values.size() * sizeof(float);
  }
  header["params"] = param_table;

  nlohmann::json blob_table = nlohmann::json::array();
  for (const auto& [name, bytes] : ckpt.blobs) {
    blob_table.push_back({{"name", name}, {"offset", offset}, {"size", bytes.size()}});
    offset += bytes.size();
  }
  header["blobs"] = blob_table;

  const std::string header_text = header.dump();
  std::vector<unsigned char> out;
  out.reserve(16 + header_text.size() + offset);
  out.insert(out.end(), {'D', 'C', 'K', 'P'});
  append_le<std::uint32_t>(out, kCheckpointVersion);
  append_le<std::uint64_t>(out, header_text.size());
  out.insert(out.end(), header_text.begin(), header_text.end());
  for (const auto& [name, values] : ckpt.params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
    out.insert(out.end(), bytes, bytes + values.size() * sizeof(float));
  }
  for (const auto& [name, bytes] : ckpt.blobs)
    out.insert(out.end(), bytes.begin(), bytes.end());
  write_file_bytes(path, out);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const auto buf = read_file_bytes(path);
  if (buf.size() < 16 || buf[0] != 'D' || buf[1] != 'C' || buf[2] != 'K' || buf[3] != 'P')
    throw CheckpointError("bad checkpoint magic: " + path);
  if (read_le<std::uint32_t>(buf.data() + 4) != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version: " + path);
  const auto header_len = read_le<std::uint64_t>(buf.data() + 8);
  if (16 + header_len > buf.size()) throw CheckpointError("truncated header: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("unparseable header in " + path + ": " + e.what());
  }

  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  const std::size_t payload_base = 16 + static_cast<std::size_t>(header_len);

  for (const auto& entry : header.value("params", nlohmann::json::array())) {
    const std::string name = entry.at("name");
    const std::uint64_t offset = entry.at("offset");
    const std::uint64_t count = entry.at("count");
    const std::size_t begin = payload_base + static_cast<std::size_t>(offset);
    const std::size_t bytes = static_cast<std::size_t>(count) * sizeof(float);
    if (begin + bytes > buf.size())
      throw CheckpointError("truncated parameter '" + name + "' in " + path);
    std::vector<float> values(static_cast<std::size_t>(count));
    std::memcpy(values.data(), buf.data() + begin, bytes);
    ckpt.params.emplace_back(name, std::move(values));
  }

  for (const auto& entry : header.value("blobs", nlohmann::json::array())) {
    const std::string name = entry.at("name");
    const std::uint64_t offset = entry.at("offset");
    const std::uint64_t size = entry.at("size");
    const std::size_t begin = payload_base + static_cast<std::size_t>(offset);
    if (begin + size > buf.size())
      throw CheckpointError("truncated blob '" + name + "' in " + path);
    ckpt.blobs.emplace_back(name, std::vector<unsigned char>(
                                      buf.begin() + static_cast<std::ptrdiff_t>(begin),
                                      buf.begin() + static_cast<std::ptrdiff_t>(begin + size)));
  }

  const std::string recorded = header.value("param_checksum", "");
  if (recorded != to_hex(ckpt.param_checksum()))
    throw CheckpointError("parameter checksum mismatch in " + path);
  return ckpt;
}

// Bridging between live Param lists and checkpoint tables.

template <class S>
inline void export_params(const std::vector<nn::Param<S>*>& params, Checkpoint& ckpt) {
  for (const auto* p : params) {
    std::vector<float> values(p->size());
    for (std::size_t i = 0; i < values.size(); ++i)
      values[i] = static_cast<float>(p->value[i]);
    ckpt.params.emplace_back(p->name, std::move(values));
  }
}

template <class S>
inline void import_params(const Checkpoint& ckpt, const std::vector<nn::Param<S>*>& params) {
  if (ckpt.params.size() != params.size())
    throw CheckpointError("checkpoint parameter table size mismatch: expected " +
                          std::to_string(params.size()) + ", found " +
                          std::to_string(ckpt.params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, values] = ckpt.params[i];
    nn::Param<S>* p = params[i];
    if (name != p->name)
      throw CheckpointError("parameter order mismatch: expected '" + p->name +
                            "', found '" + name + "'");
    if (values.size() != p->size())
      throw CheckpointError("parameter '" + name + "' size mismatch");
    for (std::size_t j = 0; j < values.size(); ++j)
      p->value[j] = static_cast<S>(values[j]);
  }
}

/// Checksum of live float parameters, matching Checkpoint::param_checksum
/// for the same values.
template <class S>
inline std::uint64_t live_param_checksum(const std::vector<nn::Param<S>*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto* p : params) {
    if constexpr (std::is_same_v<S, float>) {
      h = fnv1a64(p->value.data(), p->size() * sizeof(float), h);
    } else {
      std::vector<float> tmp(p->size());
      for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = static_cast<float>(p->value[i]);
      h = fnv1a64(tmp.data(), tmp.size() * sizeof(float), h);
    }
  }
  return h;
}

}  // namespace darec

#endif  // DAREC_CHECKPOINT_HPP_
