#include <gtest/gtest.h>

#include <array>
#include <vector>

#include "denseloc/model.hpp"
#include "denseloc/net.hpp"
#include "support.hpp"

using namespace denseloc;
using testsupport::make_image;
using testsupport::tiny_config;

TEST(ChannelRounding, RoundsHalfUp) {
  EXPECT_EQ(rounded_channels(3.0, 24), 72);
  EXPECT_EQ(rounded_channels(1.5, 64), 96);
  EXPECT_EQ(rounded_channels(1.1, 320), 352);
  EXPECT_EQ(rounded_channels(0.25, 512), 128);
  EXPECT_EQ(rounded_channels(0.5, 3), 2);   // 1.5 rounds up
  EXPECT_EQ(rounded_channels(1.1, 12), 13);  // 13.2 rounds down
  EXPECT_EQ(rounded_channels(0.45, 3), 1);   // 1.35 rounds down
}

TEST(Backbone, DefaultGeometryTapChannelsAndStrides) {
  const Backbone bb = build_backbone(mobilenet_like_config());
  EXPECT_EQ(bb.tap_channels(0), 24);
  EXPECT_EQ(bb.tap_channels(1), 64);
  EXPECT_EQ(bb.tap_channels(2), 320);
  EXPECT_EQ(bb.tap_stride(0), 4);
  EXPECT_EQ(bb.tap_stride(1), 16);
  EXPECT_EQ(bb.tap_stride(2), 32);
}

TEST(Backbone, AlternateGeometryTapChannelsAndStrides) {
  const Backbone bb = build_backbone(vgg_like_config());
  EXPECT_EQ(bb.tap_channels(0), 256);
  EXPECT_EQ(bb.tap_channels(1), 512);
  EXPECT_EQ(bb.tap_channels(2), 512);
  EXPECT_EQ(bb.tap_stride(0), 4);
  EXPECT_EQ(bb.tap_stride(1), 8);
  EXPECT_EQ(bb.tap_stride(2), 16);
}

TEST(Model, DenseChannelArithmetic) {
  Model mobile = build_model(mobilenet_like_config());
  EXPECT_EQ(mobile.dense_channels(), 520);  // 72 + 96 + 352
  EXPECT_EQ(mobile.attention.n, 520);

  Model vgg = build_model(vgg_like_config());
  EXPECT_EQ(vgg.dense_channels(), 512);  // 256 + 128 + 128

  Model small = build_model(small_config());
  EXPECT_EQ(small.dense_channels(), 74);  // 24 + 24 + 26
}

TEST(Model, AggregateResolutionPerGeometry) {
  // default geometry decodes at half the input resolution, the alternate at
  // one quarter
  Model small = build_model(small_config());
  const ImageTensor img = make_image(64, 64, 1);
  const DecodedImage dec = decode_image(small, img);
  EXPECT_EQ(dec.stride, 2);
  EXPECT_EQ(dec.descriptors.f.h, 32);
  EXPECT_EQ(dec.descriptors.f.w, 32);

  NetworkConfig vcfg = vgg_like_config();
  vcfg.backbone_channels = {8, 10, 12, 12, 14, 14};  // narrow stand-in, same stride layout
  Model vgg = build_model(vcfg);
  const DecodedImage vdec = decode_image(vgg, img);
  EXPECT_EQ(vdec.stride, 4);
  EXPECT_EQ(vdec.descriptors.f.h, 16);
}

TEST(Backbone, TapShapesOn64Input) {
  const Model m = build_model(tiny_config());
  const ImageTensor img = make_image(64, 64, 2);
  const auto taps = backbone_forward(m.backbone, img);
  EXPECT_EQ(taps[0].data.h, 16);
  EXPECT_EQ(taps[0].stride, 4);
  EXPECT_EQ(taps[1].data.h, 4);
  EXPECT_EQ(taps[1].stride, 16);
  EXPECT_EQ(taps[2].data.h, 2);
  EXPECT_EQ(taps[2].stride, 32);
}

TEST(Backbone, UnreachableTapStrideRejected) {
  NetworkConfig cfg = tiny_config();
  cfg.tap_strides = {3, 16, 32};
  EXPECT_THROW(build_backbone(cfg), ConfigError);
}

TEST(Backbone, ConfigValidationErrors) {
  NetworkConfig cfg = tiny_config();
  cfg.backbone_channels.clear();
  cfg.backbone_strides.clear();
  EXPECT_THROW(build_backbone(cfg), ConfigError);

  cfg = tiny_config();
  cfg.backbone_strides[0] = 3;
  EXPECT_THROW(build_backbone(cfg), ConfigError);

  cfg = tiny_config();
  cfg.backbone_strides.pop_back();
  EXPECT_THROW(build_backbone(cfg), ConfigError);

  cfg = tiny_config();
  cfg.branch_specs[1].target_stride = 4;  // branches must agree
  EXPECT_THROW(build_backbone(cfg), ConfigError);

  cfg = tiny_config();
  cfg.branch_specs[0].channel_multiplier = 0.01;  // rounds to zero channels
  EXPECT_THROW(build_backbone(cfg), ConfigError);
}

TEST(Backbone, DeterministicBuild) {
  Model a = build_model(tiny_config(42));
  Model b = build_model(tiny_config(42));
  for (std::size_t i = 0; i < a.backbone.stages.size(); ++i)
    EXPECT_EQ(a.backbone.stages[i].weight, b.backbone.stages[i].weight);
  EXPECT_EQ(a.attention.theta, b.attention.theta);
  EXPECT_EQ(a.projection.w, b.projection.w);

  Model c = build_model(tiny_config(43));
  EXPECT_NE(a.backbone.stages[0].weight, c.backbone.stages[0].weight);
}

TEST(Backbone, ZeroImageZeroBiasGivesZeroTaps) {
  Model m = build_model(tiny_config());
  for (Conv2d& stage : m.backbone.stages) std::fill(stage.bias.begin(), stage.bias.end(), 0.0);
  ImageTensor img;
  img.id = "zeros";
  img.data = Tensor3(32, 32, 3);
  const auto taps = backbone_forward(m.backbone, img);
  for (const auto& tap : taps)
    for (const double v : tap.data.data) ASSERT_DOUBLE_EQ(v, 0.0);
}

TEST(Backbone, MisalignedImageRejected) {
  const Model m = build_model(tiny_config());
  ImageTensor img;
  img.id = "odd";
  img.data = Tensor3(48, 64, 3);  // 48 is not a multiple of 32
  EXPECT_THROW(backbone_forward(m.backbone, img), ShapeError);
}

TEST(Backbone, PixelPerturbationStaysInsideReceptiveCone) {
  // interval propagation through the stage/branch geometry gives the exact
  // set of output cells one input pixel can reach; the observed changed set
  // must be contained in it
  const NetworkConfig cfg = tiny_config();
  Model m = build_model(cfg);
  const ImageTensor base = make_image(64, 64, 9);
  ImageTensor bumped = base;
  const int pi = 37, pj = 22;
  bumped.data.at(pi, pj, 1) = std::min(1.0, bumped.data.at(pi, pj, 1) + 0.5);

  const DecodedImage d0 = decode_image(m, base);
  const DecodedImage d1 = decode_image(m, bumped);

  // rows reachable after a 3x3 stride-s stage from source interval [a, b]:
  // ceil((a-1)/s) .. floor((b+1)/s)
  auto propagate_stage = [](int a, int b, int s) {
    const int lo = static_cast<int>(std::ceil(static_cast<double>(a - 1) / s));
    const int hi = static_cast<int>(std::floor(static_cast<double>(b + 1) / s));
    return std::pair<int, int>{lo, hi};
  };
  auto cone_for_tap = [&](int pos, int n_stages) {
    int a = pos, b = pos;
    for (int s = 0; s < n_stages; ++s) {
      auto [lo, hi] = propagate_stage(a, b, cfg.backbone_strides[s]);
      a = lo;
      b = hi;
    }
    return std::pair<int, int>{a, b};
  };
  // per branch: tap cone, 1x1 leaves it, upsample scales by the factor,
  // 3x3 smoothing widens by one
  int lo_all = 1 << 30, hi_all = -(1 << 30);
  int lo_all_j = 1 << 30, hi_all_j = -(1 << 30);
  const int tap_stages[3] = {2, 4, 5};  // stage counts reaching strides 4, 16, 32
  const int tap_strides[3] = {4, 16, 32};
  for (int br = 0; br < 3; ++br) {
    auto [ti_lo, ti_hi] = cone_for_tap(pi, tap_stages[br]);
    auto [tj_lo, tj_hi] = cone_for_tap(pj, tap_stages[br]);
    const int f = tap_strides[br] / 2;
    lo_all = std::min(lo_all, ti_lo * f - 1);
    hi_all = std::max(hi_all, ti_hi * f + (f - 1) + 1);
    lo_all_j = std::min(lo_all_j, tj_lo * f - 1);
    hi_all_j = std::max(hi_all_j, tj_hi * f + (f - 1) + 1);
  }

  const Tensor3& f0 = d0.descriptors.f;
  const Tensor3& f1 = d1.descriptors.f;
  int changed_cells = 0;
  for (int i = 0; i < f0.h; ++i)
    for (int j = 0; j < f0.w; ++j) {
      bool changed = false;
      for (int k = 0; k < f0.c && !changed; ++k)
        if (f0.at(i, j, k) != f1.at(i, j, k)) changed = true;
      if (changed) {
        ++changed_cells;
        ASSERT_GE(i, lo_all) << "cell (" << i << "," << j << ") outside the receptive cone";
        ASSERT_LE(i, hi_all);
        ASSERT_GE(j, lo_all_j);
        ASSERT_LE(j, hi_all_j);
      }
    }
  EXPECT_GT(changed_cells, 0);  // the bump must actually propagate
}

TEST(Branch, ShapeAndChannelCount) {
  // 4x4x64 tap at stride 16, multiplier 1.5, target stride 2 -> 32x32x96
  Rng rng(3);
  const BranchSpec spec{1, 1.5, 2};
  const BranchParams params = make_branch_params(64, spec, rng);
  FeatureMap tap{testsupport::random_tensor(4, 4, 64, 50), 16};
  const FeatureMap out = branch_forward(tap, spec, params);
  EXPECT_EQ(out.data.h, 32);
  EXPECT_EQ(out.data.w, 32);
  EXPECT_EQ(out.data.c, 96);
  EXPECT_EQ(out.stride, 2);
}

TEST(Branch, IdentityKernelsReplicateTapValue) {
  // identity 1x1, center-one 3x3: a 1x1 tap of value 5 upsampled 2x gives a
  // 2x2 map of fives
  BranchSpec spec{0, 1.0, 1};
  BranchParams params;
  params.reduce = Conv2d(1, 1, 1, 1);
  params.reduce.weight[0] = 1.0;
  params.smooth = Conv2d(1, 1, 3, 1);
  params.smooth.weight[params.smooth.widx(1, 1, 0, 0)] = 1.0;
  Tensor3 tap_data(1, 1, 1);
  tap_data.at(0, 0, 0) = 5.0;
  const FeatureMap out = branch_forward(FeatureMap{tap_data, 2}, spec, params);
  ASSERT_EQ(out.data.h, 2);
  ASSERT_EQ(out.data.w, 2);
  for (const double v : out.data.data) EXPECT_DOUBLE_EQ(v, 5.0);
}

TEST(Branch, IntermediateClampedToSix) {
  BranchSpec spec{0, 1.0, 2};
  BranchParams params;
  params.reduce = Conv2d(1, 1, 1, 1);
  params.reduce.weight[0] = 1.0;
  params.smooth = Conv2d(1, 1, 3, 1);
  params.smooth.weight[params.smooth.widx(1, 1, 0, 0)] = 1.0;
  Tensor3 tap_data(1, 1, 1);
  tap_data.at(0, 0, 0) = 7.3;
  BranchCache cache;
  branch_forward(FeatureMap{tap_data, 2}, spec, params, &cache);
  for (const double v : cache.upsampled.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 6.0);
    EXPECT_DOUBLE_EQ(v, 6.0);
  }
}

TEST(Branch, ChannelMismatchRejected) {
  Rng rng(4);
  const BranchSpec spec{0, 1.0, 2};
  const BranchParams params = make_branch_params(8, spec, rng);
  FeatureMap tap{testsupport::random_tensor(2, 2, 6, 5), 4};
  EXPECT_THROW(branch_forward(tap, spec, params), ShapeError);
}

TEST(Aggregate, ConcatenatesLowMidHighInOrder) {
  Tensor3 a(2, 2, 1), b(2, 2, 2), c(2, 2, 1);
  std::fill(a.data.begin(), a.data.end(), 1.0);
  std::fill(b.data.begin(), b.data.end(), 2.0);
  std::fill(c.data.begin(), c.data.end(), 3.0);
  const FeatureMap out = aggregate({FeatureMap{a, 2}, FeatureMap{b, 2}, FeatureMap{c, 2}});
  ASSERT_EQ(out.data.c, 4);
  EXPECT_EQ(out.stride, 2);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      EXPECT_DOUBLE_EQ(out.data.at(i, j, 0), 1.0);
      EXPECT_DOUBLE_EQ(out.data.at(i, j, 1), 2.0);
      EXPECT_DOUBLE_EQ(out.data.at(i, j, 2), 2.0);
      EXPECT_DOUBLE_EQ(out.data.at(i, j, 3), 3.0);
    }
}

TEST(Aggregate, MismatchedShapesRejected) {
  Tensor3 a(2, 2, 1), b(3, 2, 1);
  EXPECT_THROW(aggregate({FeatureMap{a, 2}, FeatureMap{b, 2}}), ShapeError);
  Tensor3 c(2, 2, 1);
  EXPECT_THROW(aggregate({FeatureMap{a, 2}, FeatureMap{c, 4}}), ShapeError);
  EXPECT_THROW(aggregate({}), ShapeError);
}

TEST(Ablation, BranchEnableTable) {
  NetworkConfig cfg;
  cfg.ablation = AblationMode::full;
  EXPECT_TRUE(cfg.branch_enabled(0) && cfg.branch_enabled(1) && cfg.branch_enabled(2));
  cfg.ablation = AblationMode::hb;
  EXPECT_TRUE(!cfg.branch_enabled(0) && !cfg.branch_enabled(1) && cfg.branch_enabled(2));
  cfg.ablation = AblationMode::hb_lb;
  EXPECT_TRUE(cfg.branch_enabled(0) && !cfg.branch_enabled(1) && cfg.branch_enabled(2));
  cfg.ablation = AblationMode::hb_mb;
  EXPECT_TRUE(!cfg.branch_enabled(0) && cfg.branch_enabled(1) && cfg.branch_enabled(2));
  cfg.ablation = AblationMode::none;
  EXPECT_TRUE(!cfg.branch_enabled(0) && !cfg.branch_enabled(1) && !cfg.branch_enabled(2));
}

TEST(Ablation, RoundTripNames) {
  for (const AblationMode m : {AblationMode::full, AblationMode::hb, AblationMode::hb_lb,
                               AblationMode::hb_mb, AblationMode::none})
    EXPECT_EQ(ablation_from_string(to_string(m)), m);
  EXPECT_THROW(ablation_from_string("bogus"), ConfigError);
}

TEST(Ablation, ChannelCountsPerMode) {
  NetworkConfig cfg = mobilenet_like_config();
  cfg.ablation = AblationMode::hb;
  EXPECT_EQ(build_model(cfg).dense_channels(), 352);
  cfg.ablation = AblationMode::hb_lb;
  EXPECT_EQ(build_model(cfg).dense_channels(), 352 + 72);
  cfg.ablation = AblationMode::hb_mb;
  EXPECT_EQ(build_model(cfg).dense_channels(), 352 + 96);
  cfg.ablation = AblationMode::none;
  EXPECT_EQ(build_model(cfg).dense_channels(), 320);  // decodes the top tap directly
}

TEST(Ablation, SharedBranchOutputsUnchangedByMode) {
  // the surviving branch draws its parameters from the same per-branch seed
  // stream regardless of which other branches exist
  NetworkConfig full_cfg = tiny_config(17);
  NetworkConfig hb_cfg = full_cfg;
  hb_cfg.ablation = AblationMode::hb;
  Model full = build_model(full_cfg);
  Model hb = build_model(hb_cfg);
  const ImageTensor img = make_image(32, 32, 60);
  const auto taps_full = backbone_forward(full.backbone, img);
  const auto taps_hb = backbone_forward(hb.backbone, img);
  const FeatureMap out_full = branch_forward(taps_full[2], full_cfg.branch_specs[2], full.branches[2]);
  const FeatureMap out_hb = branch_forward(taps_hb[2], hb_cfg.branch_specs[2], hb.branches[2]);
  EXPECT_EQ(out_full.data.data, out_hb.data.data);
}

TEST(Ablation, BranchlessDecodeUsesTopTapStride) {
  NetworkConfig cfg = tiny_config();
  cfg.ablation = AblationMode::none;
  Model m = build_model(cfg);
  const DecodedImage dec = decode_image(m, make_image(64, 64, 8));
  EXPECT_EQ(dec.stride, 32);
  EXPECT_EQ(dec.descriptors.f.c, 12);
}

TEST(Model, ParamViewsCoverEverythingWithoutOverlap) {
  Model m = build_model(tiny_config());
  const auto views = param_views(m);
  std::size_t expected_off = 0;
  for (const auto& v : views) {
    EXPECT_EQ(v.offset, expected_off);
    expected_off += v.size;
  }
  EXPECT_EQ(param_count(m), expected_off);

  // disabled branches contribute no views
  NetworkConfig cfg = tiny_config();
  cfg.ablation = AblationMode::hb;
  Model hb = build_model(cfg);
  for (const auto& v : param_views(hb)) {
    EXPECT_EQ(v.name.find("branch.lower"), std::string::npos);
    EXPECT_EQ(v.name.find("branch.mid"), std::string::npos);
  }
}

TEST(Model, ForwardIsPureFunction) {
  Model m = build_model(tiny_config(3));
  const ImageTensor img = make_image(32, 32, 70);
  const DecodedImage a = decode_image(m, img);
  const DecodedImage b = decode_image(m, img);
  EXPECT_EQ(a.descriptors.f.data, b.descriptors.f.data);
  EXPECT_EQ(a.detection.s_tilde.data, b.detection.s_tilde.data);
  EXPECT_EQ(a.global.g, b.global.g);
  ASSERT_EQ(a.keypoints.size(), b.keypoints.size());
  for (std::size_t i = 0; i < a.keypoints.size(); ++i) {
    EXPECT_EQ(a.keypoints[i].gi, b.keypoints[i].gi);
    EXPECT_EQ(a.keypoints[i].gj, b.keypoints[i].gj);
  }
}
