#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "patseg/cascade.hpp"

namespace patseg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'P', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::vector<double> calibrated_thresholds;
};

// Layout: 8-byte magic, u64 little-endian header length, JSON header, then a
// packed float32 little-endian payload addressed by the header's tensor map.
inline void save_checkpoint(const std::string& path, const CascadeModel& model,
                            const CheckpointMeta& meta) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["model_config"] = cascade_config_to_json(model.config);
  header["step"] = meta.step;
  header["seed"] = meta.seed;
  header["calibrated_thresholds"] = meta.calibrated_thresholds;

  nlohmann::json tensors = nlohmann::json::object();
  std::uint64_t offset = 0;
  const auto named = named_parameters(model);
  for (const auto& [name, t] : named) {
    const std::uint64_t numel = static_cast<std::uint64_t>(shape_numel(t.shape()));
    nlohmann::json entry;
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    entry["numel"] = numel;
    tensors[name] = std::move(entry);
    offset += numel * sizeof(float);
  }
  header["tensors"] = std::move(tensors);

  const std::string header_str = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t header_len = header_str.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, t] : named) {
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(shape_numel(t.shape()) * sizeof(float)));
  }
  if (!out) throw IoError("short write while saving checkpoint: " + path);
}

struct LoadedCheckpoint {
  CascadeModel model;
  CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("not a checkpoint file: " + path);
  }
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in || header_len == 0 || header_len > (1u << 26)) {
    throw IoError("corrupt checkpoint header length: " + path);
  }
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("truncated checkpoint header: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint header: ") + e.what());
  }

  LoadedCheckpoint loaded;
  try {
    if (header.at("format_version").get<int>() != kCheckpointVersion) {
      throw IoError("unsupported checkpoint format version in " + path);
    }
    const CascadeConfig config = cascade_config_from_json(header.at("model_config"));
    loaded.meta.step = header.at("step").get<std::int64_t>();
    loaded.meta.seed = header.at("seed").get<std::uint64_t>();
    loaded.meta.calibrated_thresholds =
        header.at("calibrated_thresholds").get<std::vector<double>>();

    Rng init_rng(0);
    loaded.model = make_cascade(config, init_rng);

    const nlohmann::json& tensors = header.at("tensors");
    const std::streampos payload_start = in.tellg();
    auto named = named_parameters(loaded.model);
    for (auto& [name, t] : named) {
      if (!tensors.contains(name)) {
        throw IoError("checkpoint missing tensor " + name + " in " + path);
      }
      const nlohmann::json& entry = tensors.at(name);
      const Shape shape = entry.at("shape").get<Shape>();
      if (shape != t.shape()) {
        throw IoError("checkpoint tensor " + name + " has shape " + shape_str(shape) +
                      ", model expects " + shape_str(t.shape()));
      }
      const std::uint64_t numel = entry.at("numel").get<std::uint64_t>();
      if (numel != static_cast<std::uint64_t>(shape_numel(shape))) {
        throw IoError("checkpoint tensor " + name + " numel mismatch");
      }
      in.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
      in.read(reinterpret_cast<char*>(t.data()),
              static_cast<std::streamsize>(numel * sizeof(float)));
      if (!in) throw IoError("truncated checkpoint payload at tensor " + name);
    }
    if (tensors.size() != named.size()) {
      throw IoError("checkpoint carries unexpected extra tensors: " + path);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint header: ") + e.what());
  }
  return loaded;
}

}  // namespace patseg
