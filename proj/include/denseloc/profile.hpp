#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <vector>

#include "denseloc/model.hpp"

namespace denseloc {

// FLOP counts are multiply-add style (2 per MAC) for the convolution and
// matrix stages; data movement (upsampling, concat) and transcendental ops
// (softmax, normalization) are not counted. Wall times are medians over
// timed_runs after warmup_runs.
struct ProfileReport {
  std::int64_t flops_backbone = 0;
  std::int64_t flops_branches = 0;
  std::int64_t flops_decoder = 0;
  double wall_be_ms = 0.0;
  double wall_feb_ms = 0.0;
  double wall_fd_ms = 0.0;
  double ratio_r = 1.0;
};

struct ProfileOptions {
  int warmup_runs = 3;
  int timed_runs = 10;
  KeypointOptions keypoints;
};

inline std::int64_t count_backbone_flops(const Model& m, int in_h, int in_w) {
  std::int64_t total = 0;
  int h = in_h, w = in_w;
  for (const Conv2d& stage : m.backbone.stages) {
    total += stage.flops(h, w);
    h = stage.out_h(h);
    w = stage.out_w(w);
  }
  return total;
}

inline std::int64_t count_branch_flops(const Model& m, int in_h, int in_w) {
  std::int64_t total = 0;
  for (int b = 0; b < 3; ++b) {
    if (!m.config.branch_enabled(b)) continue;
    const int tap_stride = m.backbone.tap_stride(b);
    const int th = (in_h + tap_stride - 1) / tap_stride;
    const int tw = (in_w + tap_stride - 1) / tap_stride;
    total += m.branches[b].reduce.flops(th, tw);
    const int factor = tap_stride / m.config.branch_specs[b].target_stride;
    total += m.branches[b].smooth.flops(th * factor, tw * factor);
  }
  return total;
}

inline std::int64_t count_decoder_flops(const Model& m, int in_h, int in_w) {
  int stride = m.config.branch_specs[0].target_stride;
  if (m.config.ablation == AblationMode::none) stride = m.backbone.tap_stride(2);
  const std::int64_t cells = static_cast<std::int64_t>((in_h + stride - 1) / stride) * ((in_w + stride - 1) / stride);
  const std::int64_t n = m.attention.n;
  return 2 * cells * n * n          // attention matvec per cell
         + 2 * m.projection.out_dim * n;  // global projection
}

namespace profiledetail {

template <typename F>
double median_wall_ms(F&& body, int warmup_runs, int timed_runs) {
  for (int i = 0; i < warmup_runs; ++i) body();
  std::vector<double> samples;
  samples.reserve(timed_runs);
  for (int i = 0; i < timed_runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    body();
    const auto t1 = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(samples.begin(), samples.end());
  const std::size_t mid = samples.size() / 2;
  return samples.size() % 2 == 1 ? samples[mid] : 0.5 * (samples[mid - 1] + samples[mid]);
}

}  // namespace profiledetail

// Analytic FLOPs plus measured wall time for the three pipeline sections:
// backbone encoding, the feature-extraction branches, and the decoder.
// ratio_r = (BE + FEB + FD) / (BE + FD); with no branches it is exactly 1.
inline ProfileReport profile(const Model& m, int in_h, int in_w, const ProfileOptions& opts = {}) {
  if (opts.warmup_runs < 3 || opts.timed_runs < 10)
    throw ConfigError("profiling needs >= 3 warmup and >= 10 timed runs");
  ProfileReport report;
  report.flops_backbone = count_backbone_flops(m, in_h, in_w);
  report.flops_branches = count_branch_flops(m, in_h, in_w);
  report.flops_decoder = count_decoder_flops(m, in_h, in_w);
  const double with_branches =
      static_cast<double>(report.flops_backbone + report.flops_branches + report.flops_decoder);
  const double without = static_cast<double>(report.flops_backbone + report.flops_decoder);
  report.ratio_r = with_branches / without;

  ImageTensor input;
  input.id = "profile-input";
  input.data = Tensor3(in_h, in_w, 3);
  Rng rng(derive_seed(m.config.seed, 0x70726f66ull));
  for (double& v : input.data.data) v = rng.uniform();

  std::array<FeatureMap, 3> taps;
  report.wall_be_ms = profiledetail::median_wall_ms(
      [&] { taps = backbone_forward(m.backbone, input); }, opts.warmup_runs, opts.timed_runs);

  std::vector<FeatureMap> branch_out;
  FeatureMap dense;
  auto run_branches = [&] {
    branch_out.clear();
    for (int b = 0; b < 3; ++b) {
      if (!m.config.branch_enabled(b)) continue;
      branch_out.push_back(branch_forward(taps[b], m.config.branch_specs[b], m.branches[b]));
    }
    dense = branch_out.empty() ? taps[2] : aggregate(branch_out);
  };
  report.wall_feb_ms = profiledetail::median_wall_ms(run_branches, opts.warmup_runs, opts.timed_runs);

  report.wall_fd_ms = profiledetail::median_wall_ms(
      [&] {
        const FeatureMap attn = apply_attention(dense, m.attention);
        const DescriptorField descs = extract_descriptors(attn);
        const DetectionField det = detection_scores(attn);
        const std::vector<Keypoint> kps =
            select_keypoints(det, descs, dense.stride, opts.keypoints.max_count, opts.keypoints.nms_radius);
        const GlobalDescriptor g = global_descriptor(descs, det, m.projection);
        (void)kps;
        (void)g;
      },
      opts.warmup_runs, opts.timed_runs);
  return report;
}

}  // namespace denseloc
