#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "denseloc/common.hpp"
#include "denseloc/geo.hpp"
#include "denseloc/rng.hpp"

namespace denseloc {

enum class Split { train, val, db, query };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::db: return "db";
    case Split::query: return "query";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "db") return Split::db;
  if (s == "query") return Split::query;
  throw ConfigError("unknown split '" + s + "' (expected train|val|db|query)");
}

struct ManifestEntry {
  std::string id;
  std::string image_path;
  double lat = 0.0;
  double lon = 0.0;
  double dynamic_score = 0.0;  // occluded-pixel fraction, 0 if unknown
  Split split = Split::train;
};

inline void validate_entry(const ManifestEntry& e) {
  if (e.id.empty()) throw ConfigError("manifest entry with empty id");
  if (e.lat < -90.0 || e.lat > 90.0)
    throw ConfigError("entry '" + e.id + "': latitude " + std::to_string(e.lat) + " out of [-90, 90]");
  if (e.lon < -180.0 || e.lon > 180.0)
    throw ConfigError("entry '" + e.id + "': longitude " + std::to_string(e.lon) + " out of [-180, 180]");
  if (e.dynamic_score < 0.0 || e.dynamic_score > 1.0)
    throw ConfigError("entry '" + e.id + "': dynamic_score must lie in [0, 1]");
}

// JSON Lines, one entry per line. Whitespace-only lines are ignored so
// trailing newlines don't fail a load.
inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::unordered_set<std::string> ids;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    ManifestEntry entry;
    try {
      entry.id = j.at("id").get<std::string>();
      entry.image_path = j.at("image_path").get<std::string>();
      entry.lat = j.at("lat").get<double>();
      entry.lon = j.at("lon").get<double>();
      entry.dynamic_score = j.at("dynamic_score").get<double>();
      entry.split = split_from_string(j.at("split").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    try {
      validate_entry(entry);
    } catch (const ConfigError& e) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!ids.insert(entry.id).second)
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": duplicate id '" + entry.id + "'");
    out.push_back(std::move(entry));
  }
  return out;
}

// The manifest line format is exactly the entry fields (schema versions live
// on the enclosing dataset metadata, not per line).
inline void save_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  for (const ManifestEntry& e : entries) {
    nlohmann::json j;
    j["id"] = e.id;
    j["image_path"] = e.image_path;
    j["lat"] = e.lat;
    j["lon"] = e.lon;
    j["dynamic_score"] = e.dynamic_score;
    j["split"] = to_string(e.split);
    f << j.dump() << "\n";
  }
  if (!f) throw IoError("short write to " + path.string());
}

struct Triplet {
  std::string query_id;
  std::string positive_id;
  std::string negative_id;
};

struct MiningConfig {
  double pos_radius_m = 10.0;
  double neg_radius_m = 25.0;
  int triplets_per_query = 4;
  double max_dynamic = 0.2;
  bool hard_negatives = false;  // rank negatives by feature distance instead of sampling
  std::uint64_t seed = 0;
};

struct MiningResult {
  std::vector<Triplet> triplets;
  std::vector<std::string> warnings;  // queries skipped for lack of candidates
};

inline double descriptor_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sq += d * d;
  }
  return std::sqrt(sq);
}

// Every entry in `manifest` acts as a query against the same list. Positives:
// within pos_radius and below the dynamic-object cap, ranked by global
// descriptor distance when features are given, else by geo distance.
// Negatives: beyond neg_radius, sampled uniformly without replacement
// (seeded), or ranked nearest-in-feature-space under hard_negatives.
inline MiningResult mine_triplets(const std::vector<ManifestEntry>& manifest,
                                  const std::unordered_map<std::string, std::vector<double>>* features,
                                  const MiningConfig& cfg) {
  if (cfg.pos_radius_m <= 0.0 || cfg.neg_radius_m <= 0.0) throw ConfigError("mining radii must be positive");
  if (cfg.triplets_per_query <= 0) throw ConfigError("triplets_per_query must be positive");
  if (cfg.max_dynamic < 0.0 || cfg.max_dynamic > 1.0) throw ConfigError("max_dynamic must lie in [0, 1]");
  if (cfg.hard_negatives && features == nullptr)
    throw ConfigError("hard negative mining requires a feature store");

  MiningResult out;
  Rng rng(derive_seed(cfg.seed, 0x6d696e65ull));
  auto feature_of = [&](const std::string& id) -> const std::vector<double>* {
    if (features == nullptr) return nullptr;
    const auto it = features->find(id);
    if (it == features->end()) throw ConfigError("no stored features for manifest id '" + id + "'");
    return &it->second;
  };

  for (std::size_t qi = 0; qi < manifest.size(); ++qi) {
    const ManifestEntry& q = manifest[qi];
    struct Cand {
      std::size_t idx;
      double key;
    };
    std::vector<Cand> positives;
    std::vector<std::size_t> negatives;
    for (std::size_t ci = 0; ci < manifest.size(); ++ci) {
      if (ci == qi) continue;
      const ManifestEntry& c = manifest[ci];
      const double d = haversine_m(q.lat, q.lon, c.lat, c.lon);
      if (d <= cfg.pos_radius_m) {
        if (c.dynamic_score > cfg.max_dynamic) continue;
        const double key = features != nullptr ? descriptor_distance(*feature_of(q.id), *feature_of(c.id)) : d;
        positives.push_back({ci, key});
      } else if (d > cfg.neg_radius_m) {
        negatives.push_back(ci);
      }
    }
    if (positives.empty()) {
      out.warnings.push_back("query '" + q.id + "': no eligible positive, skipped");
      continue;
    }
    if (negatives.empty()) {
      out.warnings.push_back("query '" + q.id + "': no candidate negative, skipped");
      continue;
    }
    std::stable_sort(positives.begin(), positives.end(), [](const Cand& a, const Cand& b) { return a.key < b.key; });

    std::vector<std::size_t> chosen_negs;
    if (cfg.hard_negatives) {
      std::vector<Cand> ranked;
      ranked.reserve(negatives.size());
      for (const std::size_t ni : negatives)
        ranked.push_back({ni, descriptor_distance(*feature_of(q.id), *feature_of(manifest[ni].id))});
      std::stable_sort(ranked.begin(), ranked.end(), [](const Cand& a, const Cand& b) { return a.key < b.key; });
      for (const Cand& c : ranked) chosen_negs.push_back(c.idx);
    } else {
      // seeded partial Fisher-Yates over the negative pool
      chosen_negs = negatives;
      for (std::size_t i = 0; i < chosen_negs.size(); ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(chosen_negs.size() - i));
        std::swap(chosen_negs[i], chosen_negs[j]);
      }
    }
    for (int t = 0; t < cfg.triplets_per_query; ++t) {
      const std::size_t pos_idx = positives[static_cast<std::size_t>(t) % positives.size()].idx;
      const std::size_t neg_idx = chosen_negs[static_cast<std::size_t>(t) % chosen_negs.size()];
      out.triplets.push_back({q.id, manifest[pos_idx].id, manifest[neg_idx].id});
    }
  }
  return out;
}

}  // namespace denseloc
