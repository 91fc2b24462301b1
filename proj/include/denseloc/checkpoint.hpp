#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "denseloc/binio.hpp"
#include "denseloc/model.hpp"

namespace denseloc {

inline constexpr char kCheckpointMagic[4] = {'D', 'L', 'C', 'K'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const NetworkConfig& cfg) {
  nlohmann::json j;
  j["backbone_channels"] = cfg.backbone_channels;
  j["backbone_strides"] = cfg.backbone_strides;
  j["tap_strides"] = cfg.tap_strides;
  nlohmann::json specs = nlohmann::json::array();
  for (const BranchSpec& s : cfg.branch_specs) {
    specs.push_back({{"tap_index", s.tap_index},
                     {"channel_multiplier", s.channel_multiplier},
                     {"target_stride", s.target_stride}});
  }
  j["branch_specs"] = specs;
  j["geometry_name"] = cfg.geometry_name;
  j["seed"] = cfg.seed;
  j["ablation"] = to_string(cfg.ablation);
  j["global_dim"] = cfg.global_dim;
  j["attention_init_noise"] = cfg.attention_init_noise;
  return j;
}

inline NetworkConfig config_from_json(const nlohmann::json& j) {
  NetworkConfig cfg;
  try {
    cfg.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
    cfg.backbone_strides = j.at("backbone_strides").get<std::vector<int>>();
    const auto taps = j.at("tap_strides").get<std::vector<int>>();
    if (taps.size() != 3) throw ConfigError("tap_strides must have exactly 3 entries");
    for (int t = 0; t < 3; ++t) cfg.tap_strides[t] = taps[t];
    const auto& specs = j.at("branch_specs");
    if (!specs.is_array() || specs.size() != 3) throw ConfigError("branch_specs must have exactly 3 entries");
    for (int b = 0; b < 3; ++b) {
      cfg.branch_specs[b].tap_index = specs[b].at("tap_index").get<int>();
      cfg.branch_specs[b].channel_multiplier = specs[b].at("channel_multiplier").get<double>();
      cfg.branch_specs[b].target_stride = specs[b].at("target_stride").get<int>();
    }
    cfg.geometry_name = j.at("geometry_name").get<std::string>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.ablation = ablation_from_string(j.at("ablation").get<std::string>());
    cfg.global_dim = j.at("global_dim").get<int>();
    cfg.attention_init_noise = j.at("attention_init_noise").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid network config: ") + e.what());
  }
  return cfg;
}

// Layout: magic, version byte, config JSON (length-prefixed), then named
// float32 little-endian parameter arrays.
inline void save_checkpoint(const std::filesystem::path& path, Model& model) {
  BinWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u8(kCheckpointVersion);
  const std::string cfg = config_to_json(model.config).dump();
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.raw(cfg.data(), cfg.size());
  const auto views = param_views(model);
  w.u32(static_cast<std::uint32_t>(views.size()));
  for (const ParamView& v : views) {
    for (std::size_t i = 0; i < v.size; ++i)
      if (!std::isfinite(v.data[i]))
        throw NumericalError("refusing to save non-finite parameter in " + v.name);
    w.str16(v.name);
    w.u64(v.size);
    for (std::size_t i = 0; i < v.size; ++i) w.f32(static_cast<float>(v.data[i]));
  }
  w.save(path);
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  BinReader r = BinReader::load(path);
  char magic[4];
  r.need(4);
  std::memcpy(magic, r.bytes.data(), 4);
  r.pos = 4;
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError(path.string() + ": bad checkpoint magic");
  const std::uint8_t version = r.u8();
  if (version != kCheckpointVersion)
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t cfg_len = r.u32();
  r.need(cfg_len);
  std::string cfg_text(reinterpret_cast<const char*>(r.bytes.data() + r.pos), cfg_len);
  r.pos += cfg_len;
  nlohmann::json cfg_json;
  try {
    cfg_json = nlohmann::json::parse(cfg_text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": corrupt config block: " + e.what());
  }
  Model model = build_model(config_from_json(cfg_json));
  const auto views = param_views(model);
  const std::uint32_t n_arrays = r.u32();
  if (n_arrays != views.size())
    throw IoError(path.string() + ": expected " + std::to_string(views.size()) + " parameter arrays, found " +
                  std::to_string(n_arrays));
  for (std::uint32_t a = 0; a < n_arrays; ++a) {
    const std::string name = r.str16();
    const std::uint64_t count = r.u64();
    const ParamView* view = nullptr;
    for (const ParamView& v : views)
      if (v.name == name) view = &v;
    if (view == nullptr) throw IoError(path.string() + ": unknown parameter array '" + name + "'");
    if (count != view->size)
      throw IoError(path.string() + ": array '" + name + "' has " + std::to_string(count) + " values, expected " +
                    std::to_string(view->size));
    for (std::uint64_t i = 0; i < count; ++i) view->data[i] = static_cast<double>(r.f32());
  }
  if (!r.at_end()) throw IoError(path.string() + ": trailing bytes after last array");
  return model;
}

}  // namespace denseloc
