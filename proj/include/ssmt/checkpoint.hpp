#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "ssmt/config.hpp"

namespace ssmt {

inline constexpr char kCheckpointMagic[8] = {'S', 'S', 'M', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// City the parameters were last trained on.
struct CityMeta {
  std::string role = "source";  // source | target
  std::size_t nodes = 0;
  Normalizer normalizer;
};

struct Checkpoint {
  ModelParams params;
  json config;  // snapshot of the producing TrainConfig
  CityMeta city;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

inline json dims_json(const ModelDims& d) {
  return {{"nodes", d.nodes},   {"input_len", d.input_len},       {"horizon", d.horizon},
          {"hidden", d.hidden}, {"memory_items", d.memory_items}, {"embed_dim", d.embed_dim}};
}

}  // namespace detail

/// Manifest describing every tensor's shape, byte offset and transfer class.
inline json checkpoint_manifest(const Checkpoint& ck) {
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : ck.params.tensors) {
    tensors.push_back({{"name", name},
                       {"shape", {t.rows(), t.cols()}},
                       {"offset", offset},
                       {"transfer", std::string(to_string(transfer_class(name)))}});
    offset += t.size() * sizeof(double);
  }
  return {{"format_version", kCheckpointVersion},
          {"dims", detail::dims_json(ck.params.dims)},
          {"tensors", std::move(tensors)},
          {"payload_bytes", offset},
          {"config", ck.config},
          {"city",
           {{"role", ck.city.role},
            {"nodes", ck.city.nodes},
            {"normalizer", {{"mean", ck.city.normalizer.mean}, {"std", ck.city.normalizer.std}}}}}};
}

/// Binary layout: magic, u32 version, u64 manifest length, UTF-8 JSON manifest,
/// then little-endian float64 payload.
inline std::string serialize_checkpoint(const Checkpoint& ck) {
  const std::string manifest = checkpoint_manifest(ck).dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, manifest.size());
  out += manifest;
  for (const auto& [name, t] : ck.params.tensors) {
    for (double v : t.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  constexpr std::size_t header = sizeof(kCheckpointMagic) + 4 + 8;
  if (bytes.size() < header || std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError("not a checkpoint: bad magic bytes");
  }
  const auto version = static_cast<std::uint32_t>(detail::get_le(bytes, 8, 4));
  if (version != kCheckpointVersion) throw CheckpointError("unknown checkpoint format version " + std::to_string(version));
  const std::uint64_t mlen = detail::get_le(bytes, 12, 8);
  if (mlen > bytes.size() - header) throw CheckpointError("truncated checkpoint: manifest extends past end of file");
  json m = json::parse(bytes.begin() + header, bytes.begin() + static_cast<std::ptrdiff_t>(header + mlen), nullptr, false);
  if (m.is_discarded() || !m.is_object()) throw CheckpointError("checkpoint manifest is not valid JSON");

  Checkpoint ck;
  try {
    const json& d = m.at("dims");
    ck.params.dims = {d.at("nodes").get<std::size_t>(),        d.at("input_len").get<std::size_t>(),
                      d.at("horizon").get<std::size_t>(),      d.at("hidden").get<std::size_t>(),
                      d.at("memory_items").get<std::size_t>(), d.at("embed_dim").get<std::size_t>()};
    ck.config = m.at("config");
    const json& c = m.at("city");
    ck.city.role = c.at("role").get<std::string>();
    ck.city.nodes = c.at("nodes").get<std::size_t>();
    ck.city.normalizer = {c.at("normalizer").at("mean").get<double>(), c.at("normalizer").at("std").get<double>()};
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint manifest incomplete: ") + e.what());
  }

  const auto expected = param_shapes(ck.params.dims);
  const std::size_t payload_start = header + mlen;
  const std::size_t payload_size = bytes.size() - payload_start;
  std::size_t expected_offset = 0;
  std::set<std::string> names;
  for (const json& e : m.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<std::vector<std::size_t>>();
    const auto offset = e.at("offset").get<std::size_t>();
    const auto transfer = e.at("transfer").get<std::string>();
    auto it = expected.find(name);
    if (it == expected.end()) throw CheckpointError("checkpoint tensor '" + name + "' is not a model parameter");
    if (!names.insert(name).second) throw CheckpointError("checkpoint tensor '" + name + "' listed twice");
    if (shape.size() != 2 || Shape{shape[0], shape[1]} != it->second) {
      throw CheckpointError("checkpoint tensor '" + name + "' has shape inconsistent with dims");
    }
    if (transfer != to_string(transfer_class(name))) {
      throw CheckpointError("checkpoint tensor '" + name + "' has transfer class '" + transfer + "'");
    }
    const std::size_t count = shape[0] * shape[1];
    if (offset != expected_offset || offset + count * sizeof(double) > payload_size) {
      throw CheckpointError("checkpoint payload inconsistent at tensor '" + name + "' (offset " + std::to_string(offset) +
                            ", " + std::to_string(count * sizeof(double)) + " bytes, payload " +
                            std::to_string(payload_size) + " bytes)");
    }
    Tensor t(shape[0], shape[1]);
    for (std::size_t i = 0; i < count; ++i) {
      t[i] = std::bit_cast<double>(detail::get_le(bytes, payload_start + offset + i * sizeof(double), 8));
    }
    expected_offset = offset + count * sizeof(double);
    ck.params.tensors.emplace(name, std::move(t));
  }
  if (names.size() != expected.size()) throw CheckpointError("checkpoint is missing model parameters");
  if (expected_offset != payload_size) {
    throw CheckpointError("checkpoint payload has " + std::to_string(payload_size - expected_offset) + " trailing bytes");
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
  const std::string bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace ssmt
