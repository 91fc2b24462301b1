#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "denseloc/conv.hpp"
#include "denseloc/rng.hpp"
#include "denseloc/tensor.hpp"

namespace denseloc {

// One side branch off a backbone tap: 1x1 conv (ReLU6) -> nearest upsample
// -> 3x3 smoothing conv at the target stride.
struct BranchSpec {
  int tap_index = 0;               // 0 = lower, 1 = mid, 2 = higher
  double channel_multiplier = 1.0; // applied to tap channels
  int target_stride = 2;           // output stride; must divide the tap stride
};

// Round half up; branch channel counts are defined this way for fractional
// multipliers.
inline int rounded_channels(double multiplier, int tap_channels) {
  return static_cast<int>(std::floor(multiplier * tap_channels + 0.5));
}

enum class AblationMode { full, hb, hb_lb, hb_mb, none };

inline const char* to_string(AblationMode m) {
  switch (m) {
    case AblationMode::full: return "full";
    case AblationMode::hb: return "hb";
    case AblationMode::hb_lb: return "hb+lb";
    case AblationMode::hb_mb: return "hb+mb";
    case AblationMode::none: return "none";
  }
  return "?";
}

inline AblationMode ablation_from_string(const std::string& s) {
  if (s == "full") return AblationMode::full;
  if (s == "hb") return AblationMode::hb;
  if (s == "hb+lb") return AblationMode::hb_lb;
  if (s == "hb+mb") return AblationMode::hb_mb;
  if (s == "none") return AblationMode::none;
  throw ConfigError("unknown ablation mode '" + s + "' (expected full|hb|hb+lb|hb+mb|none)");
}

struct NetworkConfig {
  std::vector<int> backbone_channels;       // per-stage output channels
  std::vector<int> backbone_strides;        // per-stage stride (1 or 2)
  std::array<int, 3> tap_strides{4, 16, 32};
  std::array<BranchSpec, 3> branch_specs{BranchSpec{0, 3.0, 2}, BranchSpec{1, 1.5, 2}, BranchSpec{2, 1.1, 2}};
  std::string geometry_name = "custom";
  std::uint64_t seed = 0;
  AblationMode ablation = AblationMode::full;
  int global_dim = 256;
  double attention_init_noise = 0.01;

  bool branch_enabled(int b) const {
    switch (ablation) {
      case AblationMode::full: return true;
      case AblationMode::hb: return b == 2;
      case AblationMode::hb_lb: return b == 2 || b == 0;
      case AblationMode::hb_mb: return b == 2 || b == 1;
      case AblationMode::none: return false;
    }
    return false;
  }
};

// Default geometry: taps with channels (24, 64, 320) at strides (4, 16, 32),
// branch multipliers (3, 1.5, 1.1), aggregate at half the input resolution.
// The trunk carries a deep 512-wide stride-4 body so the side branches stay
// a small fraction of the total cost.
inline NetworkConfig mobilenet_like_config(std::uint64_t seed = 0) {
  NetworkConfig cfg;
  cfg.backbone_channels = {32, 64, 512, 512, 512, 512, 512, 512, 512, 512, 512, 512, 512, 24, 192, 320, 64, 320};
  cfg.backbone_strides = {2, 2, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 2, 2, 1, 2};
  cfg.tap_strides = {4, 16, 32};
  cfg.branch_specs = {BranchSpec{0, 3.0, 2}, BranchSpec{1, 1.5, 2}, BranchSpec{2, 1.1, 2}};
  cfg.geometry_name = "mobilenet-like";
  cfg.seed = seed;
  return cfg;
}

// Alternative geometry: taps (256, 512, 512) at strides (4, 8, 16), branch
// multipliers (1, 0.25, 0.25), aggregate at one-fourth the input resolution.
inline NetworkConfig vgg_like_config(std::uint64_t seed = 0) {
  NetworkConfig cfg;
  cfg.backbone_channels = {64, 128, 256, 256, 512, 512};
  cfg.backbone_strides = {2, 2, 1, 1, 2, 2};
  cfg.tap_strides = {4, 8, 16};
  cfg.branch_specs = {BranchSpec{0, 1.0, 4}, BranchSpec{1, 0.25, 4}, BranchSpec{2, 0.25, 4}};
  cfg.geometry_name = "vgg-like";
  cfg.seed = seed;
  return cfg;
}

// Small geometry for training runs and tests; same multiplier pattern as the
// default but narrow enough to train quickly on a CPU.
inline NetworkConfig small_config(std::uint64_t seed = 0) {
  NetworkConfig cfg;
  cfg.backbone_channels = {6, 8, 12, 16, 24};
  cfg.backbone_strides = {2, 2, 2, 2, 2};
  cfg.tap_strides = {4, 16, 32};
  cfg.branch_specs = {BranchSpec{0, 3.0, 2}, BranchSpec{1, 1.5, 2}, BranchSpec{2, 1.1, 2}};
  cfg.geometry_name = "small";
  cfg.seed = seed;
  return cfg;
}

struct Backbone {
  std::vector<Conv2d> stages;        // 3x3 conv per stage, ReLU after each
  std::vector<int> cum_stride;       // cumulative stride after each stage
  std::array<int, 3> tap_stage{-1, -1, -1};

  int tap_channels(int t) const { return stages[tap_stage[t]].out_c; }
  int tap_stride(int t) const { return cum_stride[tap_stage[t]]; }
};

inline void validate_network_config(const NetworkConfig& cfg) {
  if (cfg.backbone_channels.empty()) throw ConfigError("backbone_channels must be non-empty");
  if (cfg.backbone_strides.size() != cfg.backbone_channels.size())
    throw ConfigError("backbone_strides must match backbone_channels in length");
  for (std::size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
    if (cfg.backbone_channels[i] <= 0) throw ConfigError("stage " + std::to_string(i) + ": channels must be positive");
    if (cfg.backbone_strides[i] != 1 && cfg.backbone_strides[i] != 2)
      throw ConfigError("stage " + std::to_string(i) + ": stride must be 1 or 2");
  }
  int target = cfg.branch_specs[0].target_stride;
  for (int b = 0; b < 3; ++b) {
    const BranchSpec& spec = cfg.branch_specs[b];
    if (spec.tap_index != b) throw ConfigError("branch_specs[" + std::to_string(b) + "]: tap_index must be " + std::to_string(b));
    if (spec.channel_multiplier <= 0.0) throw ConfigError("branch multiplier must be positive");
    if (spec.target_stride <= 0) throw ConfigError("branch target_stride must be positive");
    if (spec.target_stride != target) throw ConfigError("all branch target_strides must be equal");
  }
  if (cfg.global_dim <= 0) throw ConfigError("global_dim must be positive");
}

// Builds the parameterized backbone; parameters are drawn deterministically
// from config.seed.
inline Backbone build_backbone(const NetworkConfig& cfg) {
  validate_network_config(cfg);
  Backbone bb;
  int in_c = 3;
  int stride = 1;
  Rng rng(derive_seed(cfg.seed, 0));
  for (std::size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
    const int out_c = cfg.backbone_channels[i];
    Conv2d conv(in_c, out_c, 3, cfg.backbone_strides[i]);
    conv.init_he(rng);
    bb.stages.push_back(std::move(conv));
    stride *= cfg.backbone_strides[i];
    bb.cum_stride.push_back(stride);
    in_c = out_c;
  }
  // Each tap attaches to the last stage at its stride.
  for (int t = 0; t < 3; ++t) {
    int found = -1;
    for (std::size_t i = 0; i < bb.stages.size(); ++i)
      if (bb.cum_stride[i] == cfg.tap_strides[t]) found = static_cast<int>(i);
    if (found < 0)
      throw ConfigError("tap stride " + std::to_string(cfg.tap_strides[t]) + " is not achievable by the stage layout");
    bb.tap_stage[t] = found;
  }
  for (int b = 0; b < 3; ++b) {
    const BranchSpec& spec = cfg.branch_specs[b];
    if (bb.tap_stride(b) % spec.target_stride != 0)
      throw ConfigError("branch " + std::to_string(b) + ": target_stride " + std::to_string(spec.target_stride) +
                        " must divide tap stride " + std::to_string(bb.tap_stride(b)));
    if (rounded_channels(spec.channel_multiplier, bb.tap_channels(b)) < 1)
      throw ConfigError("branch " + std::to_string(b) + ": multiplier yields zero channels");
  }
  return bb;
}

struct BackboneCache {
  Tensor3 input;                   // the image tensor
  std::vector<Tensor3> stage_out;  // post-ReLU output per stage
};

// Runs the trunk and returns the three taps (lower, mid, higher). Pure in
// (parameters, input); `cache` optionally records intermediates for backward.
inline std::array<FeatureMap, 3> backbone_forward(const Backbone& bb, const ImageTensor& image,
                                                  BackboneCache* cache = nullptr) {
  validate_image(image);
  if (cache != nullptr) {
    cache->input = image.data;
    cache->stage_out.clear();
  }
  Tensor3 x = image.data;
  std::array<FeatureMap, 3> taps;
  for (std::size_t i = 0; i < bb.stages.size(); ++i) {
    Tensor3 y = bb.stages[i].forward(x);
    relu_inplace(y);
    x = std::move(y);
    for (int t = 0; t < 3; ++t)
      if (bb.tap_stage[t] == static_cast<int>(i)) taps[t] = FeatureMap{x, bb.cum_stride[i]};
    if (cache != nullptr) cache->stage_out.push_back(x);
  }
  return taps;
}

struct BranchParams {
  Conv2d reduce;  // 1x1, ReLU6 after
  Conv2d smooth;  // 3x3, stride 1, same padding
};

inline BranchParams make_branch_params(int tap_channels, const BranchSpec& spec, Rng& rng) {
  const int out_c = rounded_channels(spec.channel_multiplier, tap_channels);
  BranchParams p;
  p.reduce = Conv2d(tap_channels, out_c, 1, 1);
  p.reduce.init_he(rng);
  p.smooth = Conv2d(out_c, out_c, 3, 1);
  p.smooth.init_he(rng);
  return p;
}

struct BranchCache {
  Tensor3 pre_act;   // 1x1 output before ReLU6
  Tensor3 upsampled; // after ReLU6 + upsample; input of the smoothing conv
  int factor = 1;
};

// 1x1 conv -> ReLU6 -> nearest upsample to the target stride -> 3x3 conv.
inline FeatureMap branch_forward(const FeatureMap& tap, const BranchSpec& spec, const BranchParams& params,
                                 BranchCache* cache = nullptr) {
  if (tap.data.c != params.reduce.in_c)
    throw ShapeError("branch: tap has " + std::to_string(tap.data.c) + " channels, params expect " +
                     std::to_string(params.reduce.in_c));
  if (tap.stride % spec.target_stride != 0)
    throw ShapeError("branch: target_stride must divide tap stride");
  const int factor = tap.stride / spec.target_stride;
  Tensor3 pre = params.reduce.forward(tap.data);
  Tensor3 act = pre;
  relu6_inplace(act);
  Tensor3 up = upsample_nearest(act, factor);
  Tensor3 out = params.smooth.forward(up);
  if (cache != nullptr) {
    cache->pre_act = std::move(pre);
    cache->upsampled = up;
    cache->factor = factor;
  }
  return FeatureMap{std::move(out), spec.target_stride};
}

// Backward through one branch. Returns the gradient with respect to the tap;
// parameter gradients are accumulated into dreduce_* / dsmooth_*.
inline Tensor3 branch_backward(const FeatureMap& tap, const BranchParams& params, const BranchCache& cache,
                               const Tensor3& dout, double* dreduce_w, double* dreduce_b, double* dsmooth_w,
                               double* dsmooth_b) {
  params.smooth.backward_params(cache.upsampled, dout, dsmooth_w, dsmooth_b);
  Tensor3 dup = params.smooth.backward_input(dout, cache.upsampled.h, cache.upsampled.w);
  Tensor3 dact = upsample_nearest_backward(dup, cache.factor);
  relu6_backward_inplace(dact, cache.pre_act);
  params.reduce.backward_params(tap.data, dact, dreduce_w, dreduce_b);
  return params.reduce.backward_input(dact, tap.data.h, tap.data.w);
}

// Channel-wise concatenation of the enabled branch outputs, low -> mid -> high.
inline FeatureMap aggregate(const std::vector<FeatureMap>& branch_outputs) {
  if (branch_outputs.empty()) throw ShapeError("aggregate: no branch outputs");
  const FeatureMap& first = branch_outputs.front();
  int total_c = 0;
  for (const FeatureMap& f : branch_outputs) {
    if (f.data.h != first.data.h || f.data.w != first.data.w || f.stride != first.stride)
      throw ShapeError("aggregate: branch outputs disagree on spatial shape or stride");
    total_c += f.data.c;
  }
  FeatureMap out;
  out.stride = first.stride;
  out.data = Tensor3(first.data.h, first.data.w, total_c);
  for (int i = 0; i < first.data.h; ++i)
    for (int j = 0; j < first.data.w; ++j) {
      double* dst = out.data.cell(i, j).data();
      for (const FeatureMap& f : branch_outputs) {
        const double* src = f.data.cell(i, j).data();
        for (int k = 0; k < f.data.c; ++k) *dst++ = src[k];
      }
    }
  return out;
}

}  // namespace denseloc
