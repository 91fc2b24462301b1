#pragma once

#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "denseloc/binio.hpp"
#include "denseloc/model.hpp"

namespace denseloc {

inline constexpr char kFeatureMagic[4] = {'D', 'L', 'F', 'R'};
inline constexpr std::uint8_t kFeatureVersion = 1;

// What persists per decoded image: enough for retrieval (global descriptor),
// mining, and keypoint consumers, without the full dense descriptor field.
struct FeatureRecord {
  std::string id;
  int stride = 0;
  Grid2 s_tilde;
  GridIdx k_star;
  std::vector<Keypoint> keypoints;
  GlobalDescriptor global;
};

inline FeatureRecord make_feature_record(const DecodedImage& dec) {
  FeatureRecord rec;
  rec.id = dec.id;
  rec.stride = dec.stride;
  rec.s_tilde = dec.detection.s_tilde;
  rec.k_star = dec.detection.k_star;
  rec.keypoints = dec.keypoints;
  rec.global = dec.global;
  return rec;
}

inline void write_feature_record(const std::filesystem::path& path, const FeatureRecord& rec) {
  BinWriter w;
  w.raw(kFeatureMagic, 4);
  w.u8(kFeatureVersion);
  w.str16(rec.id);
  w.u32(static_cast<std::uint32_t>(rec.stride));
  w.u32(static_cast<std::uint32_t>(rec.s_tilde.h));
  w.u32(static_cast<std::uint32_t>(rec.s_tilde.w));
  for (const double v : rec.s_tilde.data) w.f32(static_cast<float>(v));
  for (const int v : rec.k_star.data) w.i32(v);
  w.u32(static_cast<std::uint32_t>(rec.keypoints.size()));
  const std::uint32_t desc_dim =
      rec.keypoints.empty() ? 0 : static_cast<std::uint32_t>(rec.keypoints.front().descriptor.size());
  w.u32(desc_dim);
  for (const Keypoint& kp : rec.keypoints) {
    w.i32(kp.gi);
    w.i32(kp.gj);
    w.f32(static_cast<float>(kp.px));
    w.f32(static_cast<float>(kp.py));
    w.f32(static_cast<float>(kp.score));
    w.i32(kp.channel);
    if (kp.descriptor.size() != desc_dim) throw IoError("keypoint descriptor dimensions disagree");
    for (const double v : kp.descriptor) w.f32(static_cast<float>(v));
  }
  w.u8(rec.global.degenerate ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(rec.global.g.size()));
  for (const double v : rec.global.g) w.f32(static_cast<float>(v));
  w.save(path);
}

inline FeatureRecord read_feature_record(const std::filesystem::path& path) {
  BinReader r = BinReader::load(path);
  r.need(4);
  if (std::memcmp(r.bytes.data(), kFeatureMagic, 4) != 0) throw IoError(path.string() + ": bad feature magic");
  r.pos = 4;
  const std::uint8_t version = r.u8();
  if (version != kFeatureVersion)
    throw IoError(path.string() + ": unsupported feature record version " + std::to_string(version));
  FeatureRecord rec;
  rec.id = r.str16();
  rec.stride = static_cast<int>(r.u32());
  const int h = static_cast<int>(r.u32());
  const int w = static_cast<int>(r.u32());
  rec.s_tilde = Grid2(h, w);
  for (double& v : rec.s_tilde.data) v = static_cast<double>(r.f32());
  rec.k_star = GridIdx(h, w);
  for (int& v : rec.k_star.data) v = r.i32();
  const std::uint32_t n_kp = r.u32();
  const std::uint32_t desc_dim = r.u32();
  rec.keypoints.resize(n_kp);
  for (Keypoint& kp : rec.keypoints) {
    kp.gi = r.i32();
    kp.gj = r.i32();
    kp.px = static_cast<double>(r.f32());
    kp.py = static_cast<double>(r.f32());
    kp.score = static_cast<double>(r.f32());
    kp.channel = r.i32();
    kp.descriptor.resize(desc_dim);
    for (double& v : kp.descriptor) v = static_cast<double>(r.f32());
  }
  rec.global.degenerate = r.u8() != 0;
  rec.global.g.resize(r.u32());
  for (double& v : rec.global.g) v = static_cast<double>(r.f32());
  if (!r.at_end()) throw IoError(path.string() + ": trailing bytes");
  return rec;
}

// A feature store is a directory of records plus an index file. The index
// maps image id to the record's relative path; std::map keeps emission
// order (and therefore bytes) deterministic.
struct FeatureStore {
  std::filesystem::path dir;
  std::map<std::string, std::string> index;  // id -> relative path
};

inline std::string feature_record_filename(const std::string& id) {
  for (const char c : id)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'))
      throw ConfigError("image id '" + id + "' contains characters unsafe for filenames");
  return id + ".dlfr";
}

inline void write_feature_store(const std::filesystem::path& dir, const std::vector<FeatureRecord>& records) {
  std::filesystem::create_directories(dir);
  FeatureStore store;
  store.dir = dir;
  for (const FeatureRecord& rec : records) {
    const std::string name = feature_record_filename(rec.id);
    if (!store.index.emplace(rec.id, name).second) throw ConfigError("duplicate feature record id '" + rec.id + "'");
    write_feature_record(dir / name, rec);
  }
  nlohmann::json j;
  j["schema_version"] = 1;
  j["format_version"] = kFeatureVersion;
  nlohmann::json files = nlohmann::json::object();
  for (const auto& [id, rel] : store.index) files[id] = rel;
  j["records"] = files;
  std::ofstream f(dir / "index.json", std::ios::trunc);
  if (!f) throw IoError("cannot write feature index in " + dir.string());
  f << j.dump(2) << "\n";
}

inline std::map<std::string, FeatureRecord> load_feature_store(const std::filesystem::path& dir) {
  std::ifstream f(dir / "index.json");
  if (!f) throw IoError("no feature index in " + dir.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError((dir / "index.json").string() + ": " + e.what());
  }
  if (j.value("format_version", 0) != kFeatureVersion)
    throw IoError(dir.string() + ": feature store format version mismatch");
  std::map<std::string, FeatureRecord> out;
  for (const auto& [id, rel] : j.at("records").items()) {
    FeatureRecord rec = read_feature_record(dir / rel.get<std::string>());
    if (rec.id != id)
      throw IoError(dir.string() + ": index entry '" + id + "' points at record for '" + rec.id + "'");
    out.emplace(id, std::move(rec));
  }
  return out;
}

}  // namespace denseloc
