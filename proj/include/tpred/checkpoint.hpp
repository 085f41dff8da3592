#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "tpred/proposer.hpp"
#include "tpred/refiner.hpp"
#include "tpred/tensor.hpp"

namespace tpred {

// Checkpoint container: RPND magic, container version, a length-prefixed JSON
// metadata blob (model configs, epoch, validation metrics at save time), then
// the length-prefixed parameter stream. Loading re-creates the stores
// bit-exactly, so saved models evaluate identically across processes.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  nlohmann::ordered_json meta;
  ParameterStore params{0};
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

inline std::uint64_t read_u64(const std::string& buf, std::size_t& pos, const char* what) {
  if (pos + 8 > buf.size()) {
    throw IoError(std::string("truncated checkpoint while reading ") + what);
  }
  std::uint64_t v;
  std::memcpy(&v, buf.data() + pos, 8);
  pos += 8;
  return v;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on '" + path + "'");
  return bytes;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on '" + path + "'");
}

}  // namespace detail

inline std::string serialize_checkpoint(const nlohmann::ordered_json& meta,
                                        const ParameterStore& store) {
  std::string out;
  out.append(kParamMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::string meta_bytes = meta.dump();
  detail::put_u64(out, meta_bytes.size());
  out.append(meta_bytes);
  const std::string param_bytes = save_params(store);
  detail::put_u64(out, param_bytes.size());
  out.append(param_bytes);
  return out;
}

inline CheckpointData deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kParamMagic, 4) != 0) {
    throw ValidationError("bad checkpoint: expected RPND magic");
  }
  std::size_t pos = 4;
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + pos, 4);
  pos += 4;
  if (version != kCheckpointVersion) {
    throw ValidationError("checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  const std::uint64_t meta_len = detail::read_u64(bytes, pos, "metadata length");
  if (pos + meta_len > bytes.size()) throw IoError("truncated checkpoint while reading metadata");
  CheckpointData out;
  try {
    out.meta = nlohmann::ordered_json::parse(bytes.substr(pos, meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad checkpoint metadata: ") + e.what());
  }
  pos += meta_len;
  const std::uint64_t param_len = detail::read_u64(bytes, pos, "parameter length");
  if (pos + param_len > bytes.size()) throw IoError("truncated checkpoint while reading parameters");
  load_params(bytes.substr(pos, param_len), out.params);
  return out;
}

inline void save_checkpoint(const std::string& path, const nlohmann::ordered_json& meta,
                            const ParameterStore& store) {
  detail::write_file_bytes(path, serialize_checkpoint(meta, store));
}

inline CheckpointData load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(detail::read_file_bytes(path));
}

// --- config snapshots ----------------------------------------------------

inline nlohmann::ordered_json proposer_config_json(const ProposerConfig& c) {
  return {{"d", c.d},           {"modes", c.M},
          {"history_layers", c.history_layers}, {"scene_radius", c.scene_radius},
          {"heads", c.heads},   {"dropout", c.dropout_rate},
          {"decoder_hidden", c.decoder_hidden}};
}

inline ProposerConfig proposer_config_from_json(const nlohmann::ordered_json& j) {
  ProposerConfig c;
  c.d = j.at("d").get<int>();
  c.M = j.at("modes").get<int>();
  c.history_layers = j.at("history_layers").get<int>();
  c.scene_radius = j.at("scene_radius").get<double>();
  c.heads = j.at("heads").get<int>();
  c.dropout_rate = j.at("dropout").get<double>();
  c.decoder_hidden = j.at("decoder_hidden").get<int>();
  c.validate();
  return c;
}

inline nlohmann::ordered_json refiner_config_json(const RefinerConfig& c) {
  return {{"tube_radius", c.tube_radius},
          {"group_distance", c.group_distance},
          {"group_confidence", c.group_confidence},
          {"d", c.d},
          {"heads", c.heads},
          {"dropout", c.dropout_rate},
          {"reg_hidden", c.reg_hidden}};
}

inline RefinerConfig refiner_config_from_json(const nlohmann::ordered_json& j) {
  RefinerConfig c;
  c.tube_radius = j.at("tube_radius").get<double>();
  c.group_distance = j.at("group_distance").get<double>();
  c.group_confidence = j.at("group_confidence").get<double>();
  c.d = j.at("d").get<int>();
  c.heads = j.at("heads").get<int>();
  c.dropout_rate = j.at("dropout").get<double>();
  c.reg_hidden = j.at("reg_hidden").get<int>();
  c.validate();
  return c;
}

}  // namespace tpred
