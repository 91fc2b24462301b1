#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "denseloc/checkpoint.hpp"
#include "denseloc/city.hpp"
#include "denseloc/evaluation.hpp"
#include "denseloc/feature_store.hpp"
#include "denseloc/png.hpp"
#include "denseloc/profile.hpp"
#include "denseloc/run_config.hpp"
#include "denseloc/train.hpp"

namespace denseloc {

// DENSELOC_WORKERS caps parallelism (feature export decodes images on
// several threads; output bytes do not depend on the worker count).
inline int worker_count() {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  const char* s = std::getenv("DENSELOC_WORKERS");
  if (s == nullptr) return static_cast<int>(hw);
  char* end = nullptr;
  const long v = std::strtol(s, &end, 10);
  if (end == s || *end != '\0' || v < 1) throw ConfigError("DENSELOC_WORKERS must be a positive integer");
  return static_cast<int>(std::min<long>(v, hw));
}

// One command at a time per output directory.
class OutDirLock {
 public:
  explicit OutDirLock(const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    const std::filesystem::path lock_path = out_dir / ".lock";
    fd_ = ::open(lock_path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + lock_path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw ConfigError("another command is running in " + out_dir.string());
    }
  }
  ~OutDirLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  OutDirLock(const OutDirLock&) = delete;
  OutDirLock& operator=(const OutDirLock&) = delete;

 private:
  int fd_ = -1;
};

enum class EvalMode { matching, retrieval };

inline EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "matching") return EvalMode::matching;
  if (s == "retrieval") return EvalMode::retrieval;
  throw ConfigError("unknown evaluate mode '" + s + "' (expected matching or retrieval)");
}

namespace cmddetail {

inline std::filesystem::path city_dir(const RunConfig& c) { return c.out_dir / "city"; }
inline std::filesystem::path manifest_path(const RunConfig& c) { return city_dir(c) / "manifest.jsonl"; }
inline std::filesystem::path pairs_path(const RunConfig& c) { return city_dir(c) / "pairs.json"; }
inline std::filesystem::path triplets_path(const RunConfig& c) { return c.out_dir / "triplets.jsonl"; }
inline std::filesystem::path checkpoints_dir(const RunConfig& c) { return c.out_dir / "checkpoints"; }
inline std::filesystem::path features_dir(const RunConfig& c) { return c.out_dir / "features"; }
inline std::filesystem::path reports_dir(const RunConfig& c) { return c.out_dir / "reports"; }

inline void write_json_doc(const std::filesystem::path& path, const nlohmann::json& j) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

inline nlohmann::json read_json_doc(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return j;
}

// produced_files.json accumulates, per command, the files that command wrote
// (paths relative to the output directory, sorted).
inline void record_produced(const RunConfig& cfg, const std::string& command, std::vector<std::string> files) {
  const std::filesystem::path path = cfg.out_dir / "produced_files.json";
  nlohmann::json j;
  if (std::filesystem::exists(path)) {
    j = read_json_doc(path);
  } else {
    j["schema_version"] = 1;
    j["commands"] = nlohmann::json::object();
  }
  std::sort(files.begin(), files.end());
  j["commands"][command] = files;
  write_json_doc(path, j);
}

inline void write_resolved_config(const RunConfig& cfg) {
  write_json_doc(cfg.out_dir / "resolved_config.json", run_config_to_json(cfg));
}

inline void write_pairs_file(const std::filesystem::path& path, const std::vector<PairRecord>& pairs) {
  nlohmann::json j;
  j["schema_version"] = 1;
  nlohmann::json arr = nlohmann::json::array();
  for (const PairRecord& p : pairs) {
    nlohmann::json row;
    row["id1"] = p.id1;
    row["id2"] = p.id2;
    row["h"] = std::vector<double>(p.h_12.m.begin(), p.h_12.m.end());
    row["photometric_tag"] = p.photometric_tag;
    arr.push_back(std::move(row));
  }
  j["pairs"] = std::move(arr);
  write_json_doc(path, j);
}

inline std::vector<PairRecord> read_pairs_file(const std::filesystem::path& path) {
  const nlohmann::json j = read_json_doc(path);
  std::vector<PairRecord> pairs;
  try {
    for (const auto& row : j.at("pairs")) {
      PairRecord p;
      p.id1 = row.at("id1").get<std::string>();
      p.id2 = row.at("id2").get<std::string>();
      const auto h = row.at("h").get<std::vector<double>>();
      if (h.size() != 9) throw IoError(path.string() + ": homography needs 9 entries");
      std::copy(h.begin(), h.end(), p.h_12.m.begin());
      p.photometric_tag = row.value("photometric_tag", "");
      pairs.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return pairs;
}

inline void write_triplets_file(const std::filesystem::path& path, const std::vector<Triplet>& triplets) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  for (const Triplet& t : triplets) {
    nlohmann::json row;
    row["query_id"] = t.query_id;
    row["positive_id"] = t.positive_id;
    row["negative_id"] = t.negative_id;
    f << row.dump() << "\n";
  }
}

inline std::vector<Triplet> read_triplets_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string() + "; run mine first");
  std::vector<Triplet> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const nlohmann::json row = nlohmann::json::parse(line);
      out.push_back({row.at("query_id").get<std::string>(), row.at("positive_id").get<std::string>(),
                     row.at("negative_id").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<ManifestEntry> load_city_manifest(const RunConfig& cfg) {
  const std::filesystem::path path = manifest_path(cfg);
  if (!std::filesystem::exists(path))
    throw IoError("no generated dataset under " + cfg.out_dir.string() + "; run generate first");
  return load_manifest(path);
}

inline ImageTensor load_entry_image(const RunConfig& cfg, const ManifestEntry& e) {
  return load_image(cfg.out_dir / e.image_path, e.id);
}

// Checkpoint resolution: an explicit path wins; otherwise the selected
// (best-validation) checkpoint, then the initial one.
inline std::filesystem::path resolve_checkpoint(const RunConfig& cfg) {
  if (!cfg.checkpoint.empty()) return cfg.checkpoint;
  const std::filesystem::path selected = checkpoints_dir(cfg) / "selected.ckpt";
  if (std::filesystem::exists(selected)) return selected;
  const std::filesystem::path initial = checkpoints_dir(cfg) / "initial.ckpt";
  if (std::filesystem::exists(initial)) return initial;
  throw IoError("no checkpoint under " + cfg.out_dir.string() + "; run train first");
}

inline Model load_compatible_model(const RunConfig& cfg) {
  const std::filesystem::path path = resolve_checkpoint(cfg);
  Model model = load_checkpoint(path);
  if (config_to_json(model.config) != config_to_json(cfg.network))
    throw ConfigError("checkpoint " + path.string() + " was built from a different network config");
  return model;
}

inline KeypointOptions keypoint_options(const RunConfig& cfg) {
  return {cfg.evaluation.keypoint_max, cfg.evaluation.nms_radius};
}

}  // namespace cmddetail

namespace cmddetail {

inline void generate_impl(const RunConfig& cfg, bool force, std::ostream& log) {
  validate_scene(cfg.scene);
  if (std::filesystem::exists(city_dir(cfg)) && !force)
    throw ConfigError(city_dir(cfg).string() + " already exists; pass --force to regenerate");

  CityData city = generate_city(cfg.scene);
  const std::filesystem::path images = city_dir(cfg) / "images";
  std::filesystem::create_directories(images);

  std::vector<std::string> produced;
  for (ManifestEntry& e : city.manifest) {
    const std::string rel = "city/images/" + e.id + ".png";
    e.image_path = rel;
    save_image(cfg.out_dir / rel, city.images.at(e.id));
    produced.push_back(rel);
  }
  save_manifest(manifest_path(cfg), city.manifest);
  produced.push_back("city/manifest.jsonl");
  write_pairs_file(pairs_path(cfg), city.pairs);
  produced.push_back("city/pairs.json");

  write_resolved_config(cfg);
  produced.push_back("resolved_config.json");
  record_produced(cfg, "generate", std::move(produced));
  log << "generated " << city.manifest.size() << " images (" << city.manifest.size() << " manifest entries, "
      << city.pairs.size() << " same-block pairs) under " << city_dir(cfg).string() << "\n";
}

inline void mine_impl(const RunConfig& cfg, std::ostream& log) {
  const std::vector<ManifestEntry> manifest = load_city_manifest(cfg);
  std::vector<ManifestEntry> train_entries;
  for (const ManifestEntry& e : manifest)
    if (e.split == Split::train) train_entries.push_back(e);

  std::unordered_map<std::string, std::vector<double>> features;
  const std::unordered_map<std::string, std::vector<double>>* features_ptr = nullptr;
  if (cfg.mining_use_features || cfg.mining.hard_negatives) {
    if (!std::filesystem::exists(features_dir(cfg) / "index.json"))
      throw ConfigError("feature-based mining needs an exported feature store; run export-features first");
    for (const auto& [id, rec] : load_feature_store(features_dir(cfg))) features.emplace(id, rec.global.g);
    features_ptr = &features;
  }

  const MiningResult mined = mine_triplets(train_entries, features_ptr, cfg.mining);
  write_triplets_file(triplets_path(cfg), mined.triplets);

  nlohmann::json summary;
  summary["schema_version"] = 1;
  summary["query_count"] = train_entries.size();
  summary["triplet_count"] = mined.triplets.size();
  summary["warnings"] = mined.warnings;
  write_json_doc(cfg.out_dir / "mining_summary.json", summary);

  record_produced(cfg, "mine", {"triplets.jsonl", "mining_summary.json"});
  log << "mined " << mined.triplets.size() << " triplets from " << train_entries.size() << " queries ("
      << mined.warnings.size() << " warnings)\n";
}

inline void train_impl(const RunConfig& cfg, std::ostream& log) {
  const std::vector<ManifestEntry> manifest = load_city_manifest(cfg);
  const std::vector<Triplet> triplets = read_triplets_file(triplets_path(cfg));

  TrainDataset ds;
  ds.triplets = triplets;
  std::unordered_map<std::string, const ManifestEntry*> by_id;
  for (const ManifestEntry& e : manifest) by_id.emplace(e.id, &e);
  auto ensure_image = [&](const std::string& id) {
    if (ds.images.count(id)) return;
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ConfigError("triplet references unknown image id '" + id + "'");
    ds.images.emplace(id, load_entry_image(cfg, *it->second));
    ds.geo.emplace(id, LatLon{it->second->lat, it->second->lon});
  };
  for (const Triplet& t : triplets) {
    ensure_image(t.query_id);
    ensure_image(t.positive_id);
    ensure_image(t.negative_id);
  }
  for (const ManifestEntry& e : manifest) {
    if (e.split == Split::val) {
      ensure_image(e.id);
      ds.val_ids.push_back(e.id);
    } else if (e.split == Split::db) {
      ensure_image(e.id);
      ds.db_ids.push_back(e.id);
    }
  }
  for (const PairRecord& p : read_pairs_file(pairs_path(cfg)))
    ds.pair_homographies.emplace(std::make_pair(p.id1, p.id2), p.h_12);

  std::filesystem::create_directories(checkpoints_dir(cfg));
  Model model = build_model(cfg.network);
  save_checkpoint(checkpoints_dir(cfg) / "initial.ckpt", model);
  std::vector<std::string> produced = {"checkpoints/initial.ckpt"};

  if (cfg.train.epochs > 0) {
    bool wrote_selected = false;
    const TrainLog tlog = train(model, ds, cfg.train, [&](Model& best, int) {
      save_checkpoint(checkpoints_dir(cfg) / "selected.ckpt", best);
      wrote_selected = true;
      return std::string("checkpoints/selected.ckpt");
    });
    save_checkpoint(checkpoints_dir(cfg) / "final.ckpt", model);
    save_train_log(cfg.out_dir / "train_log.jsonl", tlog);
    produced.push_back("checkpoints/final.ckpt");
    produced.push_back("train_log.jsonl");
    if (wrote_selected) produced.push_back("checkpoints/selected.ckpt");
    const EpochRecord& last = tlog.epochs.back();
    log << "trained " << cfg.train.epochs << " epochs on " << triplets.size() << " triplets; final mean loss "
        << last.mean_loss << ", best val recall@5 " << tlog.epochs[tlog.selected_epoch].val_recall5
        << " at epoch " << tlog.selected_epoch << "\n";
  } else {
    log << "wrote initial checkpoint only (epochs = 0)\n";
  }
  write_resolved_config(cfg);
  produced.push_back("resolved_config.json");
  record_produced(cfg, "train", std::move(produced));
}

inline void export_impl(const RunConfig& cfg, std::ostream& log) {
  const std::vector<ManifestEntry> manifest = load_city_manifest(cfg);
  const Model model = load_compatible_model(cfg);
  const KeypointOptions opts = keypoint_options(cfg);

  std::vector<FeatureRecord> records(manifest.size());
  const int workers = worker_count();
  if (workers <= 1 || manifest.size() < 2) {
    for (std::size_t i = 0; i < manifest.size(); ++i)
      records[i] = make_feature_record(decode_image(model, load_entry_image(cfg, manifest[i]), opts));
  } else {
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    const int n = std::min<int>(workers, static_cast<int>(manifest.size()));
    for (int t = 0; t < n; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < manifest.size(); i += n)
            records[i] = make_feature_record(decode_image(model, load_entry_image(cfg, manifest[i]), opts));
        } catch (...) {
          std::lock_guard<std::mutex> hold(error_mutex);
          if (!error) error = std::current_exception();
        }
      });
    }
    for (std::thread& th : pool) th.join();
    if (error) std::rethrow_exception(error);
  }

  write_feature_store(features_dir(cfg), records);
  std::vector<std::string> produced = {"features/index.json"};
  for (const FeatureRecord& r : records) produced.push_back("features/" + feature_record_filename(r.id));
  record_produced(cfg, "export-features", std::move(produced));
  log << "exported " << records.size() << " feature records to " << features_dir(cfg).string() << "\n";
}

inline nlohmann::json retrieval_report_to_json(const RetrievalReport& r, const std::string& store,
                                               std::size_t db_count, std::size_t query_count) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["store"] = store;
  j["db_count"] = db_count;
  j["query_count"] = query_count;
  nlohmann::json recall = nlohmann::json::object();
  for (const auto& [n, v] : r.recall_at) recall[std::to_string(n)] = v;
  j["recall_at"] = recall;
  nlohmann::json pr = nlohmann::json::array();
  for (const auto& [precision, recall_v] : r.pr_curve) pr.push_back({precision, recall_v});
  j["pr_curve"] = pr;
  j["map"] = r.map;
  return j;
}

inline void evaluate_retrieval_impl(const RunConfig& cfg, const std::vector<std::filesystem::path>& store_dirs,
                                    std::ostream& log) {
  const std::vector<ManifestEntry> manifest = load_city_manifest(cfg);
  std::vector<const ManifestEntry*> db_entries, query_entries;
  for (const ManifestEntry& e : manifest) {
    if (e.split == Split::db) db_entries.push_back(&e);
    if (e.split == Split::query) query_entries.push_back(&e);
  }

  std::vector<std::filesystem::path> stores = store_dirs;
  if (stores.empty()) stores.push_back(features_dir(cfg));

  struct Row {
    std::string name;
    RetrievalReport report;
  };
  std::vector<Row> rows;
  for (const std::filesystem::path& dir : stores) {
    const auto store = load_feature_store(dir);
    std::vector<std::string> missing;
    for (const ManifestEntry* e : db_entries)
      if (!store.count(e->id)) missing.push_back(e->id);
    for (const ManifestEntry* e : query_entries)
      if (!store.count(e->id)) missing.push_back(e->id);
    if (!missing.empty()) {
      std::ostringstream msg;
      msg << dir.string() << " is missing feature records for:";
      for (const std::string& id : missing) msg << " " << id;
      throw ConfigError(msg.str());
    }
    std::vector<DbEntry> db;
    for (const ManifestEntry* e : db_entries) db.push_back({e->id, store.at(e->id).global.g, e->lat, e->lon});
    std::vector<QueryEntry> queries;
    for (const ManifestEntry* e : query_entries)
      queries.push_back({e->id, store.at(e->id).global.g, e->lat, e->lon});

    const RetrievalIndex index = build_index(std::move(db));
    Row row;
    auto rel = dir.lexically_relative(cfg.out_dir);
    row.name = (!rel.empty() && rel.native().rfind("..", 0) != 0) ? rel.string() : dir.string();
    row.report = recall_at_n(index, queries, cfg.evaluation.distance_m, cfg.evaluation.recall_ns);
    rows.push_back(std::move(row));
  }

  std::filesystem::create_directories(reports_dir(cfg));
  write_json_doc(reports_dir(cfg) / "retrieval_report.json",
                 retrieval_report_to_json(rows.front().report, rows.front().name, db_entries.size(),
                                          query_entries.size()));
  std::vector<std::string> produced = {"reports/retrieval_report.json"};

  if (rows.size() > 1) {
    // comparison rows ordered best-first by recall@1 (smallest recorded N
    // when 1 is absent), store name as the tie break
    const int key_n = rows.front().report.recall_at.begin()->first;
    std::stable_sort(rows.begin(), rows.end(), [&](const Row& a, const Row& b) {
      const double ra = a.report.recall_at.at(key_n), rb = b.report.recall_at.at(key_n);
      if (ra != rb) return ra > rb;
      return a.name < b.name;
    });
    nlohmann::json cmp;
    cmp["schema_version"] = 1;
    cmp["ordered_by"] = "recall@" + std::to_string(key_n);
    nlohmann::json arr = nlohmann::json::array();
    for (const Row& row : rows)
      arr.push_back(retrieval_report_to_json(row.report, row.name, db_entries.size(), query_entries.size()));
    cmp["rows"] = arr;
    write_json_doc(reports_dir(cfg) / "comparison.json", cmp);
    produced.push_back("reports/comparison.json");
  }

  record_produced(cfg, "evaluate-retrieval", std::move(produced));
  log << "retrieval over " << query_entries.size() << " queries / " << db_entries.size() << " db images:";
  for (const auto& [n, v] : rows.front().report.recall_at) log << " recall@" << n << "=" << v;
  log << " map=" << rows.front().report.map << "\n";
}

inline void evaluate_matching_impl(const RunConfig& cfg, std::ostream& log) {
  const Model model = load_compatible_model(cfg);
  const BenchmarkData bench = generate_pairs_benchmark(cfg.scene);
  const KeypointOptions opts = keypoint_options(cfg);

  std::unordered_map<std::string, DecodedImage> decoded;
  auto decode = [&](const std::string& id) -> const DecodedImage& {
    auto it = decoded.find(id);
    if (it == decoded.end())
      it = decoded.emplace(id, decode_image(model, ImageTensor{bench.images.at(id), id}, opts)).first;
    return it->second;
  };

  double sum_rep = 0.0, sum_mle = 0.0, sum_ms = 0.0, sum_ap = 0.0;
  int n_rep = 0, n_mle = 0, n_ms = 0, n_ap = 0, n_defined = 0;
  nlohmann::json per_pair = nlohmann::json::array();
  for (const PairRecord& p : bench.pairs) {
    const DecodedImage& d1 = decode(p.id1);
    const DecodedImage& d2 = decode(p.id2);
    const Tensor3& i1 = bench.images.at(p.id1);
    const Tensor3& i2 = bench.images.at(p.id2);
    const MatchingReport r = matching_metrics(p.h_12, i1.w, i1.h, i2.w, i2.h, d1.keypoints, d2.keypoints,
                                              cfg.evaluation.eps_px);
    nlohmann::json row;
    row["id1"] = p.id1;
    row["id2"] = p.id2;
    row["defined"] = r.defined;
    row["kp_counts"] = {r.kp1_count, r.kp2_count};
    row["shared"] = {r.shared1, r.shared2};
    row["matches"] = r.match_count;
    row["correct_matches"] = r.correct_matches;
    auto put = [&](const char* key, const std::optional<double>& v, double& sum, int& n) {
      if (v.has_value()) {
        row[key] = *v;
        sum += *v;
        ++n;
      } else {
        row[key] = nullptr;
      }
    };
    put("repeatability", r.repeatability, sum_rep, n_rep);
    put("mle_px", r.mle_px, sum_mle, n_mle);
    put("matching_score", r.matching_score, sum_ms, n_ms);
    put("ap", r.map, sum_ap, n_ap);
    if (r.defined) ++n_defined;
    per_pair.push_back(std::move(row));
  }

  nlohmann::json j;
  j["schema_version"] = 1;
  j["eps_px"] = cfg.evaluation.eps_px;
  j["pairs"] = bench.pairs.size();
  j["pairs_defined"] = n_defined;
  j["mean_repeatability"] = n_rep > 0 ? nlohmann::json(sum_rep / n_rep) : nlohmann::json(nullptr);
  j["mean_mle_px"] = n_mle > 0 ? nlohmann::json(sum_mle / n_mle) : nlohmann::json(nullptr);
  j["mean_matching_score"] = n_ms > 0 ? nlohmann::json(sum_ms / n_ms) : nlohmann::json(nullptr);
  j["mean_ap"] = n_ap > 0 ? nlohmann::json(sum_ap / n_ap) : nlohmann::json(nullptr);
  j["per_pair"] = std::move(per_pair);
  std::filesystem::create_directories(reports_dir(cfg));
  write_json_doc(reports_dir(cfg) / "matching_report.json", j);
  std::vector<std::string> produced = {"reports/matching_report.json"};

  int heatmaps_left = cfg.evaluation.heatmap_count;
  if (heatmaps_left > 0) std::filesystem::create_directories(cfg.out_dir / "heatmaps");
  std::unordered_set<std::string> rendered;
  for (const PairRecord& p : bench.pairs) {
    for (const std::string& id : {p.id1, p.id2}) {
      if (heatmaps_left <= 0) break;
      if (!rendered.insert(id).second) continue;
      const DecodedImage& d = decode(id);
      const Tensor3 overlay = render_detection_heatmap(bench.images.at(id), d.detection.s_tilde, d.stride);
      const std::string rel = "heatmaps/" + id + ".png";
      save_image(cfg.out_dir / rel, overlay);
      produced.push_back(rel);
      --heatmaps_left;
    }
  }

  record_produced(cfg, "evaluate-matching", std::move(produced));
  log << "matching over " << bench.pairs.size() << " held-out pairs: mean repeatability "
      << (n_rep > 0 ? std::to_string(sum_rep / n_rep) : std::string("n/a")) << ", mean localization error "
      << (n_mle > 0 ? std::to_string(sum_mle / n_mle) + " px" : std::string("n/a")) << "\n";
}

inline void profile_impl(const RunConfig& cfg, std::ostream& log) {
  Model model = [&] {
    if (!cfg.checkpoint.empty() || std::filesystem::exists(checkpoints_dir(cfg)))
      return load_compatible_model(cfg);
    return build_model(cfg.network);  // FLOP counts and ratios do not depend on weights
  }();

  ProfileOptions opts;
  opts.warmup_runs = cfg.profile.warmup_runs;
  opts.timed_runs = cfg.profile.timed_runs;
  opts.keypoints = keypoint_options(cfg);
  const ProfileReport r = profile(model, cfg.profile.input_size, cfg.profile.input_size, opts);

  nlohmann::json j;
  j["schema_version"] = 1;
  j["input_h"] = cfg.profile.input_size;
  j["input_w"] = cfg.profile.input_size;
  j["ablation"] = to_string(model.config.ablation);
  j["flops"] = {{"backbone", r.flops_backbone}, {"branches", r.flops_branches}, {"decoder", r.flops_decoder}};
  j["ratio_r"] = r.ratio_r;
  // wall-clock medians live under one key so determinism checks can drop them
  j["wall_ms"] = {{"be", r.wall_be_ms}, {"feb", r.wall_feb_ms}, {"fd", r.wall_fd_ms}};
  j["warmup_runs"] = cfg.profile.warmup_runs;
  j["timed_runs"] = cfg.profile.timed_runs;
  std::filesystem::create_directories(reports_dir(cfg));
  write_json_doc(reports_dir(cfg) / "profile_report.json", j);

  record_produced(cfg, "profile", {"reports/profile_report.json"});
  log << "profile at " << cfg.profile.input_size << "x" << cfg.profile.input_size << ": backbone "
      << r.flops_backbone << " flops, branches " << r.flops_branches << ", decoder " << r.flops_decoder
      << ", ratio_r " << r.ratio_r << "\n";
}

}  // namespace cmddetail

inline void cmd_generate(const RunConfig& cfg, bool force = false, std::ostream& log = std::cout) {
  OutDirLock lock(cfg.out_dir);
  cmddetail::generate_impl(cfg, force, log);
}

inline void cmd_mine(const RunConfig& cfg, std::ostream& log = std::cout) {
  OutDirLock lock(cfg.out_dir);
  cmddetail::mine_impl(cfg, log);
}

inline void cmd_train(const RunConfig& cfg, std::ostream& log = std::cout) {
  OutDirLock lock(cfg.out_dir);
  cmddetail::train_impl(cfg, log);
}

inline void cmd_export_features(const RunConfig& cfg, std::ostream& log = std::cout) {
  OutDirLock lock(cfg.out_dir);
  cmddetail::export_impl(cfg, log);
}

inline void cmd_evaluate(const RunConfig& cfg, EvalMode mode,
                         const std::vector<std::filesystem::path>& stores = {}, std::ostream& log = std::cout) {
  OutDirLock lock(cfg.out_dir);
  if (mode == EvalMode::retrieval)
    cmddetail::evaluate_retrieval_impl(cfg, stores, log);
  else
    cmddetail::evaluate_matching_impl(cfg, log);
}

inline void cmd_profile(const RunConfig& cfg, std::ostream& log = std::cout) {
  OutDirLock lock(cfg.out_dir);
  cmddetail::profile_impl(cfg, log);
}

// generate -> mine -> train -> export -> evaluate (both modes) -> profile,
// one lock held across all stages.
inline void cmd_pipeline(const RunConfig& cfg, bool force = false, std::ostream& log = std::cout) {
  OutDirLock lock(cfg.out_dir);
  cmddetail::generate_impl(cfg, force, log);
  cmddetail::mine_impl(cfg, log);
  cmddetail::train_impl(cfg, log);
  cmddetail::export_impl(cfg, log);
  cmddetail::evaluate_retrieval_impl(cfg, {}, log);
  cmddetail::evaluate_matching_impl(cfg, log);
  cmddetail::profile_impl(cfg, log);
}

}  // namespace denseloc
