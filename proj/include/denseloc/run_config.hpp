#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "denseloc/checkpoint.hpp"
#include "denseloc/city.hpp"
#include "denseloc/data.hpp"
#include "denseloc/net.hpp"
#include "denseloc/train.hpp"

namespace denseloc {

struct EvalParams {
  double eps_px = 3.0;
  double distance_m = 25.0;
  std::vector<int> recall_ns = {1, 5, 10};
  int heatmap_count = 0;
  int keypoint_max = 64;
  int nms_radius = 1;
};

struct ProfileParams {
  int input_size = 32;
  int warmup_runs = 3;
  int timed_runs = 10;
};

// One config drives every command. Component seeds default to streams derived
// from the global seed; a seed given explicitly in the file wins, and the
// --seed flag re-derives all of them.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "out";
  std::string checkpoint;  // explicit checkpoint path; empty selects from out_dir
  NetworkConfig network = small_config();
  TrainConfig train;
  SceneSpec scene;
  MiningConfig mining;
  bool mining_use_features = false;
  EvalParams evaluation;
  ProfileParams profile;
};

namespace rundetail {

inline constexpr std::uint64_t kNetworkSeedSalt = 0x6e6574ull;   // "net"
inline constexpr std::uint64_t kSceneSeedSalt = 0x63697479ull;   // "city"
inline constexpr std::uint64_t kTrainSeedSalt = 0x7472ull;       // "tr"
inline constexpr std::uint64_t kMiningSeedSalt = 0x6d6eull;      // "mn"

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed)
      if (item.key() == k) { ok = true; break; }
    if (!ok) throw ConfigError("unknown key '" + item.key() + "' in " + where);
  }
}

template <typename T>
inline void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline NetworkConfig parse_network(const nlohmann::json& j, std::uint64_t global_seed) {
  NetworkConfig cfg;
  if (j.contains("backbone_channels")) {
    cfg = config_from_json(j);
  } else {
    check_keys(j, {"geometry", "ablation", "seed", "global_dim", "attention_init_noise"}, "network");
    std::string geometry = "small";
    maybe(j, "geometry", geometry);
    if (geometry == "small")
      cfg = small_config();
    else if (geometry == "mobilenet")
      cfg = mobilenet_like_config();
    else if (geometry == "vgg")
      cfg = vgg_like_config();
    else
      throw ConfigError("unknown network geometry '" + geometry + "'");
    cfg.seed = derive_seed(global_seed, kNetworkSeedSalt);
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("ablation")) cfg.ablation = ablation_from_string(j.at("ablation").get<std::string>());
    maybe(j, "global_dim", cfg.global_dim);
    maybe(j, "attention_init_noise", cfg.attention_init_noise);
  }
  return cfg;
}

}  // namespace rundetail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using rundetail::check_keys;
  using rundetail::maybe;
  RunConfig cfg;
  try {
    check_keys(j,
               {"schema_version", "seed", "out_dir", "checkpoint", "network", "train", "scene", "mining",
                "evaluation", "profile"},
               "run config");
    maybe(j, "seed", cfg.seed);
    if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
    maybe(j, "checkpoint", cfg.checkpoint);

    cfg.network.seed = derive_seed(cfg.seed, rundetail::kNetworkSeedSalt);
    cfg.scene.texture_seed = derive_seed(cfg.seed, rundetail::kSceneSeedSalt);
    cfg.train.seed = derive_seed(cfg.seed, rundetail::kTrainSeedSalt);
    cfg.mining.seed = derive_seed(cfg.seed, rundetail::kMiningSeedSalt);

    if (j.contains("network")) cfg.network = rundetail::parse_network(j.at("network"), cfg.seed);

    if (j.contains("scene")) {
      const auto& s = j.at("scene");
      check_keys(s, {"grid_size", "meters_per_block", "views_per_block", "occluder_rate", "image_size", "seed"},
                 "scene");
      maybe(s, "grid_size", cfg.scene.grid_size);
      maybe(s, "meters_per_block", cfg.scene.meters_per_block);
      maybe(s, "views_per_block", cfg.scene.views_per_block);
      maybe(s, "occluder_rate", cfg.scene.occluder_rate);
      maybe(s, "image_size", cfg.scene.image_size);
      maybe(s, "seed", cfg.scene.texture_seed);
    }

    if (j.contains("train")) {
      const auto& t = j.at("train");
      check_keys(t,
                 {"margin", "epochs", "batch_triplets", "learning_rate", "lr_halving_period", "adam_beta1",
                  "adam_beta2", "adam_eps", "weight_decay", "augment", "val_radius_m", "seed", "p_blur",
                  "p_noise", "sigma_max", "p_brightness", "brightness_delta"},
                 "train");
      maybe(t, "margin", cfg.train.margin);
      maybe(t, "epochs", cfg.train.epochs);
      maybe(t, "batch_triplets", cfg.train.batch_triplets);
      maybe(t, "learning_rate", cfg.train.learning_rate);
      maybe(t, "lr_halving_period", cfg.train.lr_halving_period);
      maybe(t, "adam_beta1", cfg.train.adam_beta1);
      maybe(t, "adam_beta2", cfg.train.adam_beta2);
      maybe(t, "adam_eps", cfg.train.adam_eps);
      maybe(t, "weight_decay", cfg.train.weight_decay);
      maybe(t, "augment", cfg.train.augment);
      maybe(t, "val_radius_m", cfg.train.val_radius_m);
      maybe(t, "seed", cfg.train.seed);
      maybe(t, "p_blur", cfg.train.augment_config.p_blur);
      maybe(t, "p_noise", cfg.train.augment_config.p_noise);
      maybe(t, "sigma_max", cfg.train.augment_config.sigma_max);
      maybe(t, "p_brightness", cfg.train.augment_config.p_brightness);
      maybe(t, "brightness_delta", cfg.train.augment_config.brightness_delta);
    }

    if (j.contains("mining")) {
      const auto& m = j.at("mining");
      check_keys(m,
                 {"pos_radius_m", "neg_radius_m", "triplets_per_query", "max_dynamic", "hard_negatives",
                  "use_features", "seed"},
                 "mining");
      maybe(m, "pos_radius_m", cfg.mining.pos_radius_m);
      maybe(m, "neg_radius_m", cfg.mining.neg_radius_m);
      maybe(m, "triplets_per_query", cfg.mining.triplets_per_query);
      maybe(m, "max_dynamic", cfg.mining.max_dynamic);
      maybe(m, "hard_negatives", cfg.mining.hard_negatives);
      maybe(m, "use_features", cfg.mining_use_features);
      maybe(m, "seed", cfg.mining.seed);
    }

    if (j.contains("evaluation")) {
      const auto& e = j.at("evaluation");
      check_keys(e, {"eps_px", "distance_m", "recall_ns", "heatmap_count", "keypoint_max", "nms_radius"},
                 "evaluation");
      maybe(e, "eps_px", cfg.evaluation.eps_px);
      maybe(e, "distance_m", cfg.evaluation.distance_m);
      maybe(e, "recall_ns", cfg.evaluation.recall_ns);
      maybe(e, "heatmap_count", cfg.evaluation.heatmap_count);
      maybe(e, "keypoint_max", cfg.evaluation.keypoint_max);
      maybe(e, "nms_radius", cfg.evaluation.nms_radius);
    }

    if (j.contains("profile")) {
      const auto& p = j.at("profile");
      check_keys(p, {"input_size", "warmup_runs", "timed_runs"}, "profile");
      maybe(p, "input_size", cfg.profile.input_size);
      maybe(p, "warmup_runs", cfg.profile.warmup_runs);
      maybe(p, "timed_runs", cfg.profile.timed_runs);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid run config: ") + e.what());
  }

  cfg.train.keypoints.max_count = cfg.evaluation.keypoint_max;
  cfg.train.keypoints.nms_radius = cfg.evaluation.nms_radius;
  if (cfg.mining.hard_negatives) cfg.mining_use_features = true;
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

// Resolved-config dump written into the output directory. out_dir itself is
// omitted so reruns into different directories stay byte-comparable.
inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["seed"] = cfg.seed;
  if (!cfg.checkpoint.empty()) j["checkpoint"] = cfg.checkpoint;
  j["network"] = config_to_json(cfg.network);
  j["scene"] = {{"grid_size", cfg.scene.grid_size},
                {"meters_per_block", cfg.scene.meters_per_block},
                {"views_per_block", cfg.scene.views_per_block},
                {"occluder_rate", cfg.scene.occluder_rate},
                {"image_size", cfg.scene.image_size},
                {"seed", cfg.scene.texture_seed}};
  j["train"] = {{"margin", cfg.train.margin},
                {"epochs", cfg.train.epochs},
                {"batch_triplets", cfg.train.batch_triplets},
                {"learning_rate", cfg.train.learning_rate},
                {"lr_halving_period", cfg.train.lr_halving_period},
                {"adam_beta1", cfg.train.adam_beta1},
                {"adam_beta2", cfg.train.adam_beta2},
                {"adam_eps", cfg.train.adam_eps},
                {"weight_decay", cfg.train.weight_decay},
                {"augment", cfg.train.augment},
                {"val_radius_m", cfg.train.val_radius_m},
                {"seed", cfg.train.seed},
                {"p_blur", cfg.train.augment_config.p_blur},
                {"p_noise", cfg.train.augment_config.p_noise},
                {"sigma_max", cfg.train.augment_config.sigma_max},
                {"p_brightness", cfg.train.augment_config.p_brightness},
                {"brightness_delta", cfg.train.augment_config.brightness_delta}};
  j["mining"] = {{"pos_radius_m", cfg.mining.pos_radius_m},
                 {"neg_radius_m", cfg.mining.neg_radius_m},
                 {"triplets_per_query", cfg.mining.triplets_per_query},
                 {"max_dynamic", cfg.mining.max_dynamic},
                 {"hard_negatives", cfg.mining.hard_negatives},
                 {"use_features", cfg.mining_use_features},
                 {"seed", cfg.mining.seed}};
  j["evaluation"] = {{"eps_px", cfg.evaluation.eps_px},
                     {"distance_m", cfg.evaluation.distance_m},
                     {"recall_ns", cfg.evaluation.recall_ns},
                     {"heatmap_count", cfg.evaluation.heatmap_count},
                     {"keypoint_max", cfg.evaluation.keypoint_max},
                     {"nms_radius", cfg.evaluation.nms_radius}};
  j["profile"] = {{"input_size", cfg.profile.input_size},
                  {"warmup_runs", cfg.profile.warmup_runs},
                  {"timed_runs", cfg.profile.timed_runs}};
  return j;
}

struct FlagOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> checkpoint;
  std::optional<std::string> ablation;
  std::optional<double> margin;
  std::optional<int> epochs;
  std::optional<int> batch_triplets;
  std::optional<double> lr;
};

inline void apply_overrides(RunConfig& cfg, const FlagOverrides& f) {
  if (f.seed) {
    cfg.seed = *f.seed;
    cfg.network.seed = derive_seed(cfg.seed, rundetail::kNetworkSeedSalt);
    cfg.scene.texture_seed = derive_seed(cfg.seed, rundetail::kSceneSeedSalt);
    cfg.train.seed = derive_seed(cfg.seed, rundetail::kTrainSeedSalt);
    cfg.mining.seed = derive_seed(cfg.seed, rundetail::kMiningSeedSalt);
  }
  if (f.out) cfg.out_dir = *f.out;
  if (f.checkpoint) cfg.checkpoint = *f.checkpoint;
  if (f.ablation) cfg.network.ablation = ablation_from_string(*f.ablation);
  if (f.margin) cfg.train.margin = *f.margin;
  if (f.epochs) cfg.train.epochs = *f.epochs;
  if (f.batch_triplets) cfg.train.batch_triplets = *f.batch_triplets;
  if (f.lr) cfg.train.learning_rate = *f.lr;
}

}  // namespace denseloc
