#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "denseloc/train.hpp"
#include "support.hpp"

namespace denseloc {
namespace {

TEST(LearningRateSchedule, HalvesEveryPeriodExactly) {
  TrainConfig cfg;  // 1e-3, halving period 6
  EXPECT_EQ(lr_at_epoch(cfg, 0), 1e-3);
  EXPECT_EQ(lr_at_epoch(cfg, 5), 1e-3);
  EXPECT_EQ(lr_at_epoch(cfg, 6), 5e-4);
  EXPECT_EQ(lr_at_epoch(cfg, 11), 5e-4);
  EXPECT_EQ(lr_at_epoch(cfg, 12), 2.5e-4);
  EXPECT_EQ(lr_at_epoch(cfg, 18), 1.25e-4);
  EXPECT_EQ(lr_at_epoch(cfg, 24), 6.25e-5);
  EXPECT_EQ(lr_at_epoch(cfg, 29), 6.25e-5);
  cfg.lr_halving_period = 1;
  cfg.learning_rate = 0.8;
  EXPECT_EQ(lr_at_epoch(cfg, 3), 0.1);
}

TEST(TrainConfigValidation, RejectsBadValues) {
  const TrainConfig good;
  EXPECT_NO_THROW(validate_train_config(good));
  auto broken = [&](auto mutate) {
    TrainConfig c = good;
    mutate(c);
    EXPECT_THROW(validate_train_config(c), ConfigError);
  };
  broken([](TrainConfig& c) { c.margin = -0.1; });
  broken([](TrainConfig& c) { c.epochs = -1; });
  broken([](TrainConfig& c) { c.batch_triplets = 0; });
  broken([](TrainConfig& c) { c.learning_rate = 0.0; });
  broken([](TrainConfig& c) { c.lr_halving_period = 0; });
  broken([](TrainConfig& c) { c.adam_beta1 = 1.0; });
  broken([](TrainConfig& c) { c.adam_beta2 = -0.1; });
  broken([](TrainConfig& c) { c.adam_eps = 0.0; });
  broken([](TrainConfig& c) { c.weight_decay = -1e-3; });
  broken([](TrainConfig& c) { c.val_radius_m = 0.0; });
}

TEST(AdamOptimizer, MatchesTheUpdateRuleForTwoSteps) {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.01;
  std::vector<double> pa = {1.0, -2.0};
  std::vector<double> pb = {0.5};
  std::vector<ParamView> views = {{"a", pa.data(), 2, 0}, {"b", pb.data(), 1, 2}};
  AdamW opt(3, cfg);

  // scalar replica of the decoupled-decay rule, stepped alongside
  std::vector<double> ref = {1.0, -2.0, 0.5};
  std::vector<double> m(3, 0.0), v(3, 0.0);
  auto ref_step = [&](const std::vector<double>& g, int t) {
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < 3; ++k) {
      m[k] = cfg.adam_beta1 * m[k] + (1.0 - cfg.adam_beta1) * g[k];
      v[k] = cfg.adam_beta2 * v[k] + (1.0 - cfg.adam_beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      ref[k] -= cfg.learning_rate * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * ref[k]);
    }
  };

  const std::vector<double> g1 = {0.5, -1.0, 2.0};
  opt.step(views, g1, cfg.learning_rate);
  ref_step(g1, 1);
  EXPECT_DOUBLE_EQ(pa[0], ref[0]);
  EXPECT_DOUBLE_EQ(pa[1], ref[1]);
  EXPECT_DOUBLE_EQ(pb[0], ref[2]);

  const std::vector<double> g2 = {-0.25, 0.75, -0.5};
  opt.step(views, g2, cfg.learning_rate);
  ref_step(g2, 2);
  EXPECT_DOUBLE_EQ(pa[0], ref[0]);
  EXPECT_DOUBLE_EQ(pa[1], ref[1]);
  EXPECT_DOUBLE_EQ(pb[0], ref[2]);
}

TEST(AdamOptimizer, ZeroGradientStillAppliesDecoupledDecay) {
  TrainConfig cfg;
  cfg.weight_decay = 0.25;
  std::vector<double> p = {2.0};
  std::vector<ParamView> views = {{"p", p.data(), 1, 0}};
  AdamW opt(1, cfg);
  opt.step(views, {0.0}, 0.1);
  EXPECT_DOUBLE_EQ(p[0], 2.0 - 0.1 * (cfg.weight_decay * 2.0));
}

TEST(PairHomographies, OrderedReversedAndMissingLookups) {
  TrainDataset data;
  Homography h = Homography::identity();
  h.m[2] = 3.0;  // x -> x + 3
  h.m[5] = -1.0;
  data.pair_homographies[{"a", "b"}] = h;

  const auto direct = find_pair_homography(data, "a", "b");
  ASSERT_TRUE(direct.has_value());
  for (int k = 0; k < 9; ++k) EXPECT_EQ(direct->m[static_cast<std::size_t>(k)], h.m[static_cast<std::size_t>(k)]);

  const auto reversed = find_pair_homography(data, "b", "a");
  ASSERT_TRUE(reversed.has_value());
  const Vec2 p = reversed->apply(7.0, 4.0);  // inverse of the translation
  EXPECT_NEAR(p.x, 4.0, 1e-12);
  EXPECT_NEAR(p.y, 5.0, 1e-12);

  EXPECT_FALSE(find_pair_homography(data, "a", "c").has_value());
}

TrainDataset tiny_dataset(int n_triplets) {
  TrainDataset data;
  for (int i = 0; i < n_triplets; ++i) {
    const std::string q = "q" + std::to_string(i);
    const std::string p = "p" + std::to_string(i);
    const std::string n = "n" + std::to_string(i);
    data.images[q] = testsupport::make_image(32, 32, 800 + static_cast<std::uint64_t>(3 * i), q);
    data.images[p] = testsupport::make_image(32, 32, 801 + static_cast<std::uint64_t>(3 * i), p);
    data.images[n] = testsupport::make_image(32, 32, 802 + static_cast<std::uint64_t>(3 * i), n);
    data.triplets.push_back({q, p, n});
    data.pair_homographies[{q, p}] = Homography::identity();
  }
  return data;
}

TEST(DatasetValidation, MissingPiecesThrow) {
  TrainDataset data = tiny_dataset(1);
  data.triplets.push_back({"q0", "p0", "ghost"});
  EXPECT_THROW(validate_dataset(data), ConfigError);
  data.triplets.pop_back();

  data.val_ids.push_back("ghost");
  EXPECT_THROW(validate_dataset(data), ConfigError);
  data.val_ids.back() = "q0";  // image exists, geo does not
  EXPECT_THROW(validate_dataset(data), ConfigError);
  data.geo["q0"] = meters_to_latlon(0.0, 0.0);
  EXPECT_NO_THROW(validate_dataset(data));

  data.db_ids.push_back("p0");
  EXPECT_THROW(validate_dataset(data), ConfigError);  // p0 has no geo
  data.geo["p0"] = meters_to_latlon(5.0, 0.0);
  EXPECT_NO_THROW(validate_dataset(data));
}

std::vector<double> snapshot_params(Model& m) {
  std::vector<double> out;
  for (const ParamView& v : param_views(m)) out.insert(out.end(), v.data, v.data + v.size);
  return out;
}

TEST(Training, ZeroEpochsIsANoOp) {
  Model model = build_model(testsupport::tiny_config(1));
  const std::vector<double> before = snapshot_params(model);
  TrainConfig cfg;
  cfg.epochs = 0;
  const TrainLog log = train(model, tiny_dataset(1), cfg);
  EXPECT_TRUE(log.epochs.empty());
  EXPECT_EQ(log.selected_epoch, -1);
  EXPECT_EQ(snapshot_params(model), before);
}

TEST(Training, EmptyTripletListThrows) {
  Model model = build_model(testsupport::tiny_config(1));
  TrainDataset data = tiny_dataset(1);
  data.triplets.clear();
  TrainConfig cfg;
  cfg.epochs = 1;
  EXPECT_THROW(train(model, data, cfg), ConfigError);
}

TEST(Training, BitwiseDeterministicAcrossRuns) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_triplets = 2;
  cfg.augment = true;  // exercise the augmentation stream too
  cfg.seed = 7;

  auto run = [&]() {
    Model model = build_model(testsupport::tiny_config(2));
    TrainDataset data = tiny_dataset(2);
    data.val_ids = {"q0"};
    data.db_ids = {"p0", "n1"};
    data.geo["q0"] = meters_to_latlon(0.0, 0.0);
    data.geo["p0"] = meters_to_latlon(5.0, 0.0);
    data.geo["n1"] = meters_to_latlon(500.0, 0.0);
    const TrainLog log = train(model, data, cfg);
    return std::make_pair(log, snapshot_params(model));
  };
  const auto [log1, params1] = run();
  const auto [log2, params2] = run();
  ASSERT_EQ(log1.epochs.size(), log2.epochs.size());
  for (std::size_t e = 0; e < log1.epochs.size(); ++e) {
    EXPECT_EQ(log1.epochs[e].mean_loss, log2.epochs[e].mean_loss);
    EXPECT_EQ(log1.epochs[e].val_recall5, log2.epochs[e].val_recall5);
    EXPECT_EQ(log1.epochs[e].degenerate_terms, log2.epochs[e].degenerate_terms);
  }
  EXPECT_EQ(log1.selected_epoch, log2.selected_epoch);
  EXPECT_EQ(params1, params2);
}

TEST(Training, OverfitsASingleTripletByHalf) {
  Model model = build_model(testsupport::tiny_config(21));
  TrainDataset data;
  ImageTensor q = testsupport::make_image(32, 32, 900, "q");
  ImageTensor p = q;  // same pixels under a new id: repeatability term starts at zero
  p.id = "p";
  data.images["q"] = q;
  data.images["p"] = p;
  data.images["n"] = testsupport::make_image(32, 32, 901, "n");
  data.triplets.push_back({"q", "p", "n"});
  data.pair_homographies[{"q", "p"}] = Homography::identity();

  TrainConfig cfg;
  cfg.margin = 2.0;  // upper bound of the repeatability range keeps the hinge active
  cfg.epochs = 50;
  cfg.batch_triplets = 1;
  cfg.learning_rate = 3e-3;
  cfg.lr_halving_period = 100;
  cfg.augment = false;
  const TrainLog log = train(model, data, cfg);
  ASSERT_EQ(log.epochs.size(), 50u);
  for (const EpochRecord& r : log.epochs) {
    EXPECT_GE(r.mean_loss, 0.0);
    EXPECT_TRUE(std::isfinite(r.mean_loss));
    EXPECT_EQ(r.learning_rate, lr_at_epoch(cfg, r.epoch));
  }
  EXPECT_GT(log.epochs.front().mean_loss, 0.0);
  EXPECT_LE(log.epochs.back().mean_loss, 0.5 * log.epochs.front().mean_loss);
}

TEST(Training, NonFiniteLossNamesEpochAndTriplet) {
  Model model = build_model(testsupport::tiny_config(21));
  // drive one branch output channel to +inf: its smooth inputs are
  // non-negative, so the huge weights overflow cleanly instead of cancelling
  Conv2d& smooth = model.branches[0].smooth;
  for (int ky = 0; ky < smooth.k; ++ky)
    for (int kx = 0; kx < smooth.k; ++kx)
      for (int ic = 0; ic < smooth.in_c; ++ic) smooth.weight[smooth.widx(ky, kx, ic, 0)] = 1e308;
  TrainDataset data = tiny_dataset(1);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.augment = false;
  try {
    train(model, data, cfg);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(q0, p0, n0)"), std::string::npos) << msg;
  }
}

TEST(Training, BestEpochNeedsStrictImprovement) {
  Model model = build_model(testsupport::tiny_config(3));
  TrainDataset data = tiny_dataset(1);
  // one validation query against one database image at the same spot keeps
  // recall@5 pinned at 1.0 for every epoch
  data.val_ids = {"q0"};
  data.db_ids = {"p0"};
  data.geo["q0"] = meters_to_latlon(0.0, 0.0);
  data.geo["p0"] = meters_to_latlon(3.0, 0.0);

  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.augment = false;
  std::vector<int> sink_epochs;
  const TrainLog log = train(model, data, cfg, [&](Model&, int epoch) {
    sink_epochs.push_back(epoch);
    return "ckpt-" + std::to_string(epoch);
  });
  ASSERT_EQ(log.epochs.size(), 3u);
  for (const EpochRecord& r : log.epochs) EXPECT_DOUBLE_EQ(r.val_recall5, 1.0);
  EXPECT_EQ(log.selected_epoch, 0);
  ASSERT_EQ(sink_epochs.size(), 1u);  // ties never re-trigger the sink
  EXPECT_EQ(sink_epochs[0], 0);
  EXPECT_EQ(log.epochs[0].checkpoint, "ckpt-0");
  EXPECT_TRUE(log.epochs[1].checkpoint.empty());
  EXPECT_TRUE(log.epochs[2].checkpoint.empty());
}

TEST(TrainLogs, EpochRecordJsonShape) {
  EpochRecord r;
  r.epoch = 4;
  r.mean_loss = 0.75;
  r.learning_rate = 5e-4;
  r.val_recall5 = 0.5;
  r.degenerate_terms = 3;
  nlohmann::json j = epoch_record_to_json(r, false);
  EXPECT_EQ(j.at("epoch"), 4);
  EXPECT_EQ(j.at("mean_loss"), 0.75);
  EXPECT_EQ(j.at("learning_rate"), 5e-4);
  EXPECT_EQ(j.at("val_recall5"), 0.5);
  EXPECT_EQ(j.at("degenerate_terms"), 3);
  EXPECT_EQ(j.at("selected"), false);
  EXPECT_FALSE(j.contains("checkpoint"));

  r.checkpoint = "checkpoints/selected.ckpt";
  j = epoch_record_to_json(r, true);
  EXPECT_EQ(j.at("selected"), true);
  EXPECT_EQ(j.at("checkpoint"), "checkpoints/selected.ckpt");
}

TEST(TrainLogs, SaveWritesParseableJsonLines) {
  TrainLog log;
  for (int e = 0; e < 2; ++e) {
    EpochRecord r;
    r.epoch = e;
    r.mean_loss = 1.0 - 0.25 * e;
    r.learning_rate = 1e-3;
    r.val_recall5 = 0.5 * e;
    log.epochs.push_back(r);
  }
  log.selected_epoch = 1;
  const auto path = std::filesystem::temp_directory_path() / "denseloc_train_log_test.jsonl";
  save_train_log(path, log);
  std::ifstream f(path);
  std::string line;
  int count = 0;
  while (std::getline(f, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("epoch"), count);
    EXPECT_EQ(j.at("selected"), count == 1);
    ++count;
  }
  EXPECT_EQ(count, 2);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace denseloc
