#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "reid/deskmodel.hpp"
#include "reid/teacher.hpp"

namespace reid {

/// On-disk layout: "CKPT1\n", u32 LE manifest length, UTF-8 JSON manifest
/// {"metadata": {...}, "parameters": [{"name", "shape": [rows, cols]}, ...]},
/// then each parameter as row-major binary64 LE, in manifest order.
struct Checkpoint {
  ParameterStore params;
  nlohmann::json metadata = nlohmann::json::object();

  bool operator==(const Checkpoint&) const = default;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json backbone_to_json(const BackboneConfig& cfg);
BackboneConfig backbone_from_json(const nlohmann::json& j);

/// Checkpoint holding one network; entries are stored under `prefix`.
Checkpoint checkpoint_from_model(const DeskBackbone& model, const std::string& prefix = "");
/// Rebuilds the network stored under `prefix` using the "backbone" metadata.
DeskBackbone model_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix = "");

/// Entries whose name starts with `prefix`, with the prefix removed.
ParameterStore extract_prefixed(const ParameterStore& store, const std::string& prefix);
void insert_prefixed(ParameterStore& dst, const ParameterStore& src, const std::string& prefix);

}  // namespace reid
