#pragma once

/*
 * Checkpoint container for dense nets.
 *
 * Layout, all integers little-endian:
 *
 *   bytes 0..3   magic "FTRB"
 *   bytes 4..7   u32 format version (currently 1)
 *   bytes 8..11  u32 metadata length M
 *   M bytes      UTF-8 JSON metadata (kind, dims, hidden widths, count)
 *   rest         parameters as f32, declaration order (cond table, then
 *                per layer weights row-major followed by bias)
 *
 * Parameters live in f32 on disk and in f64 in memory; save/load/save is
 * byte-identical because f32 -> f64 -> f32 round-trips exactly.
 */

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowturbo/errors.hpp"
#include "flowturbo/io.hpp"
#include "flowturbo/net.hpp"

namespace flowturbo {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "FTRB";

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32(std::string_view bytes, std::size_t off) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + 1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + 2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + 3])) << 24;
}

}  // namespace detail

inline std::string serialize_checkpoint(const DenseNet& net) {
  nlohmann::json meta;
  meta["kind"] = net.cfg.kind == NetKind::Refiner ? "refiner" : "velocity";
  meta["data_dim"] = net.cfg.data_dim;
  meta["time_dim"] = net.cfg.time_dim;
  meta["num_classes"] = net.cfg.num_classes;
  meta["cond_dim"] = net.cfg.cond_dim;
  meta["hidden"] = net.cfg.hidden;
  meta["param_count"] = net.param_count();
  const std::string meta_str = meta.dump();

  std::string out(kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(meta_str.size()));
  out += meta_str;
  visit_params(net, [&](double v) {
    detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  });
  return out;
}

inline DenseNet deserialize_checkpoint(std::string_view bytes, const std::string& origin) {
  if (bytes.size() < 12) throw IoError(origin + ": truncated checkpoint header");
  if (bytes.substr(0, 4) != kCheckpointMagic)
    throw IoError(origin + ": bad magic, not a checkpoint");
  const std::uint32_t version = detail::get_u32(bytes, 4);
  if (version != kCheckpointVersion)
    throw IoError(origin + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t meta_len = detail::get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(meta_len))
    throw IoError(origin + ": truncated checkpoint metadata");

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bytes.substr(12, meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(origin + ": metadata is not valid JSON: " + e.what());
  }

  NetConfig cfg;
  try {
    const std::string kind = meta.at("kind").get<std::string>();
    if (kind == "velocity")
      cfg.kind = NetKind::Velocity;
    else if (kind == "refiner")
      cfg.kind = NetKind::Refiner;
    else
      throw IoError(origin + ": unknown net kind '" + kind + "'");
    cfg.data_dim = meta.at("data_dim").get<int>();
    cfg.time_dim = meta.at("time_dim").get<int>();
    cfg.num_classes = meta.at("num_classes").get<int>();
    cfg.cond_dim = meta.at("cond_dim").get<int>();
    cfg.hidden = meta.at("hidden").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(origin + ": incomplete checkpoint metadata: " + e.what());
  }
  try {
    cfg.validate();
  } catch (const ValidationError& e) {
    throw IoError(origin + ": invalid checkpoint metadata: " + e.what());
  }

  DenseNet net = DenseNet::zeros(cfg);
  const std::size_t want = net.param_count();
  if (meta.contains("param_count") && meta["param_count"].get<std::size_t>() != want)
    throw IoError(origin + ": metadata parameter count disagrees with shapes");
  const std::size_t payload = bytes.size() - 12 - meta_len;
  if (payload != want * 4)
    throw IoError(origin + ": expected " + std::to_string(want * 4) + " parameter bytes, found " +
                  std::to_string(payload));
  std::size_t off = 12 + meta_len;
  visit_params(net, [&](double& v) {
    v = static_cast<double>(std::bit_cast<float>(detail::get_u32(bytes, off)));
    off += 4;
  });
  return net;
}

inline void save_checkpoint(const DenseNet& net, const std::filesystem::path& path) {
  atomic_write_file(path, serialize_checkpoint(net));
}

inline DenseNet load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path), path.string());
}

}  // namespace flowturbo
