#include "reid/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace reid {

namespace {

constexpr char kMagic[] = "CKPT1\n";
constexpr std::size_t kMagicSize = sizeof(kMagic) - 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["metadata"] = ckpt.metadata;
  auto& list = manifest["parameters"] = nlohmann::json::array();
  for (const auto& [name, value] : ckpt.params.entries()) {
    list.push_back({{"name", name}, {"shape", {value.rows(), value.cols()}}});
  }
  const std::string text = manifest.dump();
  std::string out(kMagic, kMagicSize);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& [name, value] : ckpt.params.entries()) {
    for (Index r = 0; r < value.rows(); ++r) {
      for (Index c = 0; c < value.cols(); ++c) {
        const double v = value(r, c);
        char b[8];
        std::memcpy(b, &v, 8);
        out.append(b, 8);
      }
    }
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < kMagicSize + 4 || bytes.compare(0, kMagicSize, kMagic) != 0) {
    throw FormatError("not a CKPT1 checkpoint");
  }
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + kMagicSize, 4);
  std::size_t pos = kMagicSize + 4;
  if (bytes.size() - pos < len) throw FormatError("checkpoint manifest is truncated");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  pos += len;
  Checkpoint ckpt;
  try {
    ckpt.metadata = manifest.at("metadata");
    for (const auto& entry : manifest.at("parameters")) {
      const auto name = entry.at("name").get<std::string>();
      const auto rows = entry.at("shape").at(0).get<Index>();
      const auto cols = entry.at("shape").at(1).get<Index>();
      if (rows < 0 || cols < 0) throw FormatError("negative shape for '" + name + "'");
      if (ckpt.params.contains(name)) throw FormatError("duplicate parameter '" + name + "'");
      const auto need = static_cast<std::size_t>(rows * cols) * 8;
      if (bytes.size() - pos < need) throw FormatError("checkpoint payload is truncated");
      Eigen::MatrixXd value(rows, cols);
      for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) {
          std::memcpy(&value(r, c), bytes.data() + pos, 8);
          pos += 8;
        }
      }
      ckpt.params.set(name, std::move(value));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  if (pos != bytes.size()) throw FormatError("trailing bytes after checkpoint payload");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  const std::string bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str());
}

nlohmann::json backbone_to_json(const BackboneConfig& cfg) {
  return {{"input_dim", cfg.input_dim}, {"channels", cfg.channels},   {"height", cfg.height},
          {"width", cfg.width},         {"depth", cfg.depth},         {"hidden", cfg.hidden},
          {"reduction", cfg.reduction}, {"smp_layers", cfg.smp_layers}, {"classes", cfg.classes}};
}

BackboneConfig backbone_from_json(const nlohmann::json& j) {
  BackboneConfig cfg;
  try {
    cfg.input_dim = j.at("input_dim").get<Index>();
    cfg.channels = j.at("channels").get<Index>();
    cfg.height = j.at("height").get<Index>();
    cfg.width = j.at("width").get<Index>();
    cfg.depth = j.at("depth").get<Index>();
    cfg.hidden = j.at("hidden").get<Index>();
    cfg.reduction = j.at("reduction").get<Index>();
    cfg.smp_layers = j.at("smp_layers").get<Index>();
    cfg.classes = j.at("classes").get<Index>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint backbone metadata: ") + e.what());
  }
  return cfg;
}

ParameterStore extract_prefixed(const ParameterStore& store, const std::string& prefix) {
  ParameterStore out;
  for (const auto& [name, value] : store.entries()) {
    if (name.starts_with(prefix)) out.set(name.substr(prefix.size()), value);
  }
  return out;
}

void insert_prefixed(ParameterStore& dst, const ParameterStore& src, const std::string& prefix) {
  for (const auto& [name, value] : src.entries()) dst.set(prefix + name, value);
}

Checkpoint checkpoint_from_model(const DeskBackbone& model, const std::string& prefix) {
  Checkpoint ckpt;
  insert_prefixed(ckpt.params, model.params(), prefix);
  ckpt.metadata["backbone"] = backbone_to_json(model.config());
  return ckpt;
}

DeskBackbone model_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
  if (!ckpt.metadata.contains("backbone")) throw FormatError("checkpoint lacks backbone metadata");
  BackboneConfig cfg = backbone_from_json(ckpt.metadata.at("backbone"));
  ParameterStore params = extract_prefixed(ckpt.params, prefix);
  if (params.contains("head.weight")) cfg.classes = params.at("head.weight").rows();
  return DeskBackbone(cfg, std::move(params));
}

}  // namespace reid
