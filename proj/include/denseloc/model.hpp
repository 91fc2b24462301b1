#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "denseloc/decoder.hpp"
#include "denseloc/net.hpp"

namespace denseloc {

// Full localization network: backbone taps -> per-branch heads -> channel
// concat -> attention decoder (+ fixed global projection).
struct Model {
  NetworkConfig config;
  Backbone backbone;
  std::array<BranchParams, 3> branches;  // only enabled branches hold parameters
  AttentionFilter attention;
  GlobalProjection projection;

  int dense_channels() const {
    int n = 0;
    for (int b = 0; b < 3; ++b)
      if (config.branch_enabled(b))
        n += rounded_channels(config.branch_specs[b].channel_multiplier, backbone.tap_channels(b));
    if (n == 0) n = backbone.tap_channels(2);  // branchless mode decodes the top tap
    return n;
  }
};

inline Model build_model(const NetworkConfig& cfg) {
  Model m;
  m.config = cfg;
  m.backbone = build_backbone(cfg);
  for (int b = 0; b < 3; ++b) {
    if (!cfg.branch_enabled(b)) continue;
    Rng rng(derive_seed(cfg.seed, 1 + static_cast<std::uint64_t>(b)));
    m.branches[b] = make_branch_params(m.backbone.tap_channels(b), cfg.branch_specs[b], rng);
  }
  const int n = m.dense_channels();
  m.attention = AttentionFilter(n);
  {
    Rng rng(derive_seed(cfg.seed, 4));
    m.attention.init_identity(rng, cfg.attention_init_noise);
  }
  m.projection = GlobalProjection(cfg.global_dim, n);
  {
    Rng rng(derive_seed(cfg.seed, 5));
    m.projection.init_gaussian(rng);
  }
  return m;
}

// Flat view over every trainable array, in a fixed order. Offsets index a
// single gradient/optimizer-state vector of size param_count(model).
struct ParamView {
  std::string name;
  double* data = nullptr;
  std::size_t size = 0;
  std::size_t offset = 0;
};

inline std::vector<ParamView> param_views(Model& m) {
  std::vector<ParamView> views;
  std::size_t off = 0;
  auto add = [&](const std::string& name, std::vector<double>& v) {
    views.push_back({name, v.data(), v.size(), off});
    off += v.size();
  };
  for (std::size_t i = 0; i < m.backbone.stages.size(); ++i) {
    add("backbone.stage" + std::to_string(i) + ".weight", m.backbone.stages[i].weight);
    add("backbone.stage" + std::to_string(i) + ".bias", m.backbone.stages[i].bias);
  }
  static const char* kBranchNames[3] = {"lower", "mid", "higher"};
  for (int b = 0; b < 3; ++b) {
    if (!m.config.branch_enabled(b)) continue;
    const std::string prefix = std::string("branch.") + kBranchNames[b];
    add(prefix + ".reduce.weight", m.branches[b].reduce.weight);
    add(prefix + ".reduce.bias", m.branches[b].reduce.bias);
    add(prefix + ".smooth.weight", m.branches[b].smooth.weight);
    add(prefix + ".smooth.bias", m.branches[b].smooth.bias);
  }
  add("decoder.attention", m.attention.theta);
  add("decoder.projection", m.projection.w);
  return views;
}

inline std::size_t param_count(Model& m) {
  const auto views = param_views(m);
  if (views.empty()) return 0;
  return views.back().offset + views.back().size;
}

struct KeypointOptions {
  int max_count = 64;
  int nms_radius = 1;
};

// Everything downstream consumers need from one image.
struct DecodedImage {
  std::string id;
  int stride = 0;
  DescriptorField descriptors;
  DetectionField detection;
  std::vector<Keypoint> keypoints;
  GlobalDescriptor global;
};

// Intermediates retained for the backward pass.
struct ForwardCache {
  BackboneCache backbone;
  std::array<FeatureMap, 3> taps;
  std::array<BranchCache, 3> branch;
  std::vector<int> enabled;      // branch indices that ran, in concat order
  std::vector<int> concat_off;   // channel offset per enabled branch
  FeatureMap dense;              // aggregated F
  AttentionCache attention;
  FeatureMap attn;               // A after ReLU
};

inline DecodedImage decode_image(const Model& m, const ImageTensor& image, const KeypointOptions& opts = {},
                                 ForwardCache* cache = nullptr) {
  BackboneCache bb_cache;
  const auto taps = backbone_forward(m.backbone, image, cache != nullptr ? &bb_cache : nullptr);

  std::vector<FeatureMap> branch_out;
  std::vector<int> enabled, offsets;
  int off = 0;
  for (int b = 0; b < 3; ++b) {
    if (!m.config.branch_enabled(b)) continue;
    BranchCache bc;
    FeatureMap out = branch_forward(taps[b], m.config.branch_specs[b], m.branches[b],
                                    cache != nullptr ? &bc : nullptr);
    enabled.push_back(b);
    offsets.push_back(off);
    off += out.data.c;
    if (cache != nullptr) cache->branch[b] = std::move(bc);
    branch_out.push_back(std::move(out));
  }
  FeatureMap dense = branch_out.empty() ? taps[2] : aggregate(branch_out);

  AttentionCache at_cache;
  FeatureMap attn = apply_attention(dense, m.attention, cache != nullptr ? &at_cache : nullptr);

  DecodedImage out;
  out.id = image.id;
  out.stride = dense.stride;
  out.descriptors = extract_descriptors(attn);
  out.detection = detection_scores(attn);
  out.keypoints = select_keypoints(out.detection, out.descriptors, dense.stride, opts.max_count, opts.nms_radius);
  out.global = global_descriptor(out.descriptors, out.detection, m.projection);

  if (cache != nullptr) {
    cache->backbone = std::move(bb_cache);
    cache->taps = taps;
    cache->enabled = std::move(enabled);
    cache->concat_off = std::move(offsets);
    cache->dense = std::move(dense);
    cache->attention = std::move(at_cache);
    cache->attn = std::move(attn);
  }
  return out;
}

// Gradient of some scalar objective with respect to this image's decoder
// outputs; sparse in practice, dense in storage.
struct DecodedGrad {
  Grid2 ds_tilde;   // d/d s_tilde
  Tensor3 ddesc;    // d/d descriptor field

  DecodedGrad() = default;
  DecodedGrad(int h, int w, int c) : ds_tilde(h, w), ddesc(h, w, c) {}
};

// Accumulates parameter gradients for one image into `grad` (laid out per
// param_views). The global projection takes no gradient: no training signal
// flows through the retrieval pooling path.
inline void model_backward(Model& m, const DecodedImage& dec, const ForwardCache& cache, const DecodedGrad& dgrad,
                           std::vector<double>& grad) {
  const auto views = param_views(m);
  auto view_data = [&](const std::string& name) -> double* {
    for (const auto& v : views)
      if (v.name == name) return grad.data() + v.offset;
    throw ShapeError("no parameter named " + name);
  };

  const Tensor3& A = cache.attn.data;
  Tensor3 dattn(A.h, A.w, A.c);
  detection_backward(A, dec.detection, dgrad.ds_tilde, &dattn);
  descriptors_backward(dec.descriptors, dgrad.ddesc, &dattn);

  Tensor3 ddense = attention_backward(cache.dense.data, m.attention, cache.attention, dattn,
                                      view_data("decoder.attention"));

  // Tap gradients, accumulated per backbone stage output.
  std::vector<Tensor3> dstage(m.backbone.stages.size());
  static const char* kBranchNames[3] = {"lower", "mid", "higher"};
  if (cache.enabled.empty()) {
    const int stage = m.backbone.tap_stage[2];
    dstage[stage] = std::move(ddense);
  } else {
    for (std::size_t e = 0; e < cache.enabled.size(); ++e) {
      const int b = cache.enabled[e];
      const int c0 = cache.concat_off[e];
      const FeatureMap& tap = cache.taps[b];
      const int bc = m.branches[b].smooth.out_c;
      Tensor3 dbranch(ddense.h, ddense.w, bc);
      for (int i = 0; i < ddense.h; ++i)
        for (int j = 0; j < ddense.w; ++j) {
          const double* src = ddense.cell(i, j).data() + c0;
          double* dst = dbranch.cell(i, j).data();
          for (int k = 0; k < bc; ++k) dst[k] = src[k];
        }
      const std::string prefix = std::string("branch.") + kBranchNames[b];
      Tensor3 dtap = branch_backward(tap, m.branches[b], cache.branch[b], dbranch,
                                     view_data(prefix + ".reduce.weight"), view_data(prefix + ".reduce.bias"),
                                     view_data(prefix + ".smooth.weight"), view_data(prefix + ".smooth.bias"));
      const int stage = m.backbone.tap_stage[b];
      if (dstage[stage].data.empty())
        dstage[stage] = std::move(dtap);
      else
        for (std::size_t k = 0; k < dtap.data.size(); ++k) dstage[stage].data[k] += dtap.data[k];
    }
  }

  // Walk the trunk in reverse; every stage output is post-ReLU, so the gate
  // tests the cached output.
  Tensor3 dcur;
  for (int i = static_cast<int>(m.backbone.stages.size()) - 1; i >= 0; --i) {
    if (!dstage[i].data.empty()) {
      if (dcur.data.empty())
        dcur = std::move(dstage[i]);
      else
        for (std::size_t k = 0; k < dcur.data.size(); ++k) dcur.data[k] += dstage[i].data[k];
    }
    if (dcur.data.empty()) continue;  // no gradient reaches above the top tap
    relu_backward_inplace(dcur, cache.backbone.stage_out[i]);
    const Tensor3& input = (i == 0) ? cache.backbone.input : cache.backbone.stage_out[i - 1];
    const std::string prefix = "backbone.stage" + std::to_string(i);
    m.backbone.stages[i].backward_params(input, dcur, view_data(prefix + ".weight"), view_data(prefix + ".bias"));
    if (i > 0) dcur = m.backbone.stages[i].backward_input(dcur, input.h, input.w);
  }
}

}  // namespace denseloc
