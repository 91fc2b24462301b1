#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "denseloc/city.hpp"
#include "denseloc/data.hpp"
#include "denseloc/evaluation.hpp"
#include "denseloc/geo.hpp"
#include "denseloc/model.hpp"
#include "denseloc/objective.hpp"

namespace denseloc {

struct TrainConfig {
  double margin = 0.1;
  int epochs = 30;
  int batch_triplets = 4;
  double learning_rate = 1e-3;
  int lr_halving_period = 6;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-3;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentConfig augment_config;
  double val_radius_m = 25.0;
  KeypointOptions keypoints;
};

inline void validate_train_config(const TrainConfig& c) {
  if (c.margin < 0.0) throw ConfigError("margin must be non-negative");
  if (c.epochs < 0) throw ConfigError("epochs must be non-negative");
  if (c.batch_triplets < 1) throw ConfigError("batch_triplets must be positive");
  if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (c.lr_halving_period < 1) throw ConfigError("lr_halving_period must be positive");
  if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must lie in [0,1)");
  if (!(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0)) throw ConfigError("adam_beta2 must lie in [0,1)");
  if (!(c.adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (c.weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(c.val_radius_m > 0.0)) throw ConfigError("val_radius_m must be positive");
}

// Exact halving: ldexp scales by a power of two with no rounding.
inline double lr_at_epoch(const TrainConfig& c, int epoch) {
  return std::ldexp(c.learning_rate, -(epoch / c.lr_halving_period));
}

// Everything train() consumes, already resident in memory. Homographies are
// keyed by ordered (id1, id2); lookups fall back to the inverse of the
// reversed key.
struct TrainDataset {
  std::vector<Triplet> triplets;
  std::map<std::string, ImageTensor> images;
  std::map<std::pair<std::string, std::string>, Homography> pair_homographies;
  std::vector<std::string> val_ids;
  std::vector<std::string> db_ids;
  std::map<std::string, LatLon> geo;
};

inline std::optional<Homography> find_pair_homography(const TrainDataset& d, const std::string& id1,
                                                      const std::string& id2) {
  auto it = d.pair_homographies.find({id1, id2});
  if (it != d.pair_homographies.end()) return it->second;
  it = d.pair_homographies.find({id2, id1});
  if (it != d.pair_homographies.end()) return it->second.inverse();
  return std::nullopt;
}

inline void validate_dataset(const TrainDataset& d) {
  auto need_image = [&](const std::string& id, const char* role) {
    if (d.images.find(id) == d.images.end())
      throw ConfigError(std::string("dataset has no image for ") + role + " id '" + id + "'");
  };
  for (const Triplet& t : d.triplets) {
    need_image(t.query_id, "query");
    need_image(t.positive_id, "positive");
    need_image(t.negative_id, "negative");
  }
  for (const std::string& id : d.val_ids) {
    need_image(id, "validation");
    if (d.geo.find(id) == d.geo.end()) throw ConfigError("no geo position for validation id '" + id + "'");
  }
  for (const std::string& id : d.db_ids) {
    need_image(id, "database");
    if (d.geo.find(id) == d.geo.end()) throw ConfigError("no geo position for database id '" + id + "'");
  }
}

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double learning_rate = 0.0;
  double val_recall5 = 0.0;
  int degenerate_terms = 0;
  std::string checkpoint;  // reference returned by the best-model sink, if invoked
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int selected_epoch = -1;  // earliest epoch attaining the best validation recall@5
};

// Invoked whenever an epoch sets a new best validation recall@5; the return
// value is recorded as that epoch's checkpoint reference. The reference is
// non-const because checkpoint serialization walks mutable parameter views.
using BestModelSink = std::function<std::string(Model&, int epoch)>;

// Adam with decoupled weight decay. Moments are flat over the param_views
// layout; step() applies one update from an accumulated gradient.
struct AdamW {
  double beta1, beta2, eps, weight_decay;
  std::vector<double> m, v;
  long t = 0;

  AdamW(std::size_t n, const TrainConfig& c)
      : beta1(c.adam_beta1), beta2(c.adam_beta2), eps(c.adam_eps), weight_decay(c.weight_decay),
        m(n, 0.0), v(n, 0.0) {}

  void step(std::vector<ParamView>& views, const std::vector<double>& grad, double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (ParamView& view : views) {
      for (std::size_t i = 0; i < view.size; ++i) {
        const std::size_t k = view.offset + i;
        const double g = grad[k];
        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
        v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
        const double mhat = m[k] / bc1;
        const double vhat = v[k] / bc2;
        double p = view.data[i];
        p -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p);
        view.data[i] = p;
      }
    }
  }
};

namespace traindetail {

inline double validation_recall5(const Model& model, const TrainDataset& data, const TrainConfig& cfg) {
  if (data.val_ids.empty() || data.db_ids.empty()) return 0.0;
  std::vector<DbEntry> db;
  db.reserve(data.db_ids.size());
  for (const std::string& id : data.db_ids) {
    const DecodedImage dec = decode_image(model, data.images.at(id), cfg.keypoints);
    const LatLon& pos = data.geo.at(id);
    db.push_back({id, dec.global.g, pos.lat, pos.lon});
  }
  std::vector<QueryEntry> queries;
  queries.reserve(data.val_ids.size());
  for (const std::string& id : data.val_ids) {
    const DecodedImage dec = decode_image(model, data.images.at(id), cfg.keypoints);
    const LatLon& pos = data.geo.at(id);
    queries.push_back({id, dec.global.g, pos.lat, pos.lon});
  }
  const RetrievalIndex index = build_index(std::move(db));
  const RetrievalReport report = recall_at_n(index, queries, cfg.val_radius_m, {5});
  return report.recall_at.at(5);
}

}  // namespace traindetail

// Epoch loop: seeded shuffle, mean-loss batches, AdamW step per batch,
// validation recall@5 per epoch. The model is updated in place.
inline TrainLog train(Model& model, const TrainDataset& data, const TrainConfig& cfg,
                      const BestModelSink& save_best = {}) {
  validate_train_config(cfg);
  validate_dataset(data);
  TrainLog log;
  if (cfg.epochs == 0) return log;
  if (data.triplets.empty()) throw ConfigError("training requires at least one triplet");

  auto views = param_views(model);
  const std::size_t n_params = param_count(model);
  AdamW opt(n_params, cfg);
  std::vector<double> grad(n_params, 0.0);

  const std::uint64_t run_seed = derive_seed(cfg.seed, 0x747261696eull);  // stream tag: "train"
  double best_recall = -1.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    const std::uint64_t epoch_seed = derive_seed(run_seed, static_cast<std::uint64_t>(epoch));
    Rng shuffle_rng(derive_seed(epoch_seed, 0));
    Rng aug_rng(derive_seed(epoch_seed, 1));

    std::vector<std::size_t> order(data.triplets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);

    double loss_sum = 0.0;
    int degenerate = 0;
    std::size_t done = 0;
    while (done < order.size()) {
      const std::size_t batch = std::min<std::size_t>(cfg.batch_triplets, order.size() - done);
      std::fill(grad.begin(), grad.end(), 0.0);
      const double scale = 1.0 / static_cast<double>(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        const Triplet& t = data.triplets[order[done + b]];
        ImageTensor iq = data.images.at(t.query_id);
        ImageTensor ip = data.images.at(t.positive_id);
        ImageTensor in = data.images.at(t.negative_id);
        if (cfg.augment) {
          augment_image(iq.data, cfg.augment_config, aug_rng);
          augment_image(ip.data, cfg.augment_config, aug_rng);
          augment_image(in.data, cfg.augment_config, aug_rng);
        }
        ForwardCache cq, cp, cn;
        const DecodedImage dq = decode_image(model, iq, cfg.keypoints, &cq);
        const DecodedImage dp = decode_image(model, ip, cfg.keypoints, &cp);
        const DecodedImage dn = decode_image(model, in, cfg.keypoints, &cn);
        const std::optional<Homography> h = find_pair_homography(data, t.query_id, t.positive_id);
        const TripletLossResult res =
            triplet_loss(dq, dp, dn, cfg.margin, h.has_value() ? &h.value() : nullptr);
        if (!std::isfinite(res.loss))
          throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + " on triplet (" +
                               t.query_id + ", " + t.positive_id + ", " + t.negative_id + ")");
        loss_sum += res.loss;
        degenerate += (res.pos_degenerate ? 1 : 0) + (res.neg_degenerate ? 1 : 0);
        triplet_backward(model, dq, dp, dn, cq, cp, cn, res, scale, grad);
      }
      opt.step(views, grad, lr);
      done += batch;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = loss_sum / static_cast<double>(order.size());
    rec.learning_rate = lr;
    rec.degenerate_terms = degenerate;
    rec.val_recall5 = traindetail::validation_recall5(model, data, cfg);
    if (rec.val_recall5 > best_recall) {
      best_recall = rec.val_recall5;
      log.selected_epoch = epoch;
      if (save_best) rec.checkpoint = save_best(model, epoch);
    }
    log.epochs.push_back(std::move(rec));
  }
  return log;
}

inline nlohmann::json epoch_record_to_json(const EpochRecord& r, bool selected) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["mean_loss"] = r.mean_loss;
  j["learning_rate"] = r.learning_rate;
  j["val_recall5"] = r.val_recall5;
  j["degenerate_terms"] = r.degenerate_terms;
  j["selected"] = selected;
  if (!r.checkpoint.empty()) j["checkpoint"] = r.checkpoint;
  return j;
}

// JSON Lines, one record per epoch.
inline void save_train_log(const std::filesystem::path& path, const TrainLog& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write train log " + path.string());
  for (const EpochRecord& r : log.epochs)
    f << epoch_record_to_json(r, r.epoch == log.selected_epoch).dump() << "\n";
}

}  // namespace denseloc
