#pragma once

// Shared helpers for the unit and acceptance suites: independent oracle
// implementations (written as direct transcriptions of the definitions, no
// shared code with the library paths they check) plus small fixture builders.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "denseloc/decoder.hpp"
#include "denseloc/model.hpp"
#include "denseloc/net.hpp"
#include "denseloc/objective.hpp"
#include "denseloc/rng.hpp"
#include "denseloc/tensor.hpp"

namespace testsupport {

using namespace denseloc;

inline ImageTensor make_image(int h, int w, std::uint64_t seed, const std::string& id = "img") {
  Rng rng(seed);
  ImageTensor img;
  img.id = id;
  img.data = Tensor3(h, w, 3);
  for (double& v : img.data.data) v = rng.uniform();
  return img;
}

inline Tensor3 random_tensor(int h, int w, int c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor3 t(h, w, c);
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Narrow five-stage trunk reaching stride 32; cheap enough for per-test
// forward/backward passes.
inline NetworkConfig tiny_config(std::uint64_t seed = 0) {
  NetworkConfig cfg;
  cfg.backbone_channels = {4, 6, 8, 10, 12};
  cfg.backbone_strides = {2, 2, 2, 2, 2};
  cfg.geometry_name = "custom";
  cfg.seed = seed;
  cfg.global_dim = 16;
  return cfg;
}

// Reference detection scoring: plain per-cell argmax, naive (unshifted)
// clipped-neighborhood softmax, then image-level normalization.
struct DetectionOracle {
  Grid2 s;
  Grid2 s_tilde;
  GridIdx k_star;
};

inline DetectionOracle detection_oracle(const Tensor3& A) {
  DetectionOracle out;
  out.s = Grid2(A.h, A.w);
  out.s_tilde = Grid2(A.h, A.w);
  out.k_star = GridIdx(A.h, A.w);
  for (int i = 0; i < A.h; ++i)
    for (int j = 0; j < A.w; ++j) {
      int best = 0;
      for (int k = 1; k < A.c; ++k)
        if (A.at(i, j, k) > A.at(i, j, best)) best = k;
      out.k_star.at(i, j) = best;
      double denom = 0.0;
      for (int p = i - 1; p <= i + 1; ++p)
        for (int q = j - 1; q <= j + 1; ++q) {
          if (p < 0 || p >= A.h || q < 0 || q >= A.w) continue;
          denom += std::exp(A.at(p, q, best));
        }
      out.s.at(i, j) = std::exp(A.at(i, j, best)) / denom;
    }
  double total = 0.0;
  for (const double v : out.s.data) total += v;
  for (int i = 0; i < A.h; ++i)
    for (int j = 0; j < A.w; ++j) out.s_tilde.at(i, j) = out.s.at(i, j) / total;
  return out;
}

// Reference keypoint selection: strict Chebyshev-window maxima over
// non-degenerate cells, sorted by (score desc, row, col), truncated.
inline std::vector<std::pair<int, int>> keypoint_oracle(const Grid2& s_tilde,
                                                        const std::vector<std::uint8_t>& degenerate,
                                                        int max_count, int radius) {
  struct C {
    double v;
    int i, j;
  };
  std::vector<C> c;
  for (int i = 0; i < s_tilde.h; ++i)
    for (int j = 0; j < s_tilde.w; ++j) {
      if (degenerate[static_cast<std::size_t>(i) * s_tilde.w + j] != 0) continue;
      bool strict = true;
      for (int p = i - radius; p <= i + radius && strict; ++p)
        for (int q = j - radius; q <= j + radius; ++q) {
          if (p < 0 || p >= s_tilde.h || q < 0 || q >= s_tilde.w) continue;
          if (p == i && q == j) continue;
          if (s_tilde.at(p, q) >= s_tilde.at(i, j)) {
            strict = false;
            break;
          }
        }
      if (strict) c.push_back({s_tilde.at(i, j), i, j});
    }
  std::sort(c.begin(), c.end(), [](const C& a, const C& b) {
    if (a.v != b.v) return a.v > b.v;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });
  if (static_cast<int>(c.size()) > max_count) c.resize(static_cast<std::size_t>(max_count));
  std::vector<std::pair<int, int>> out;
  for (const C& x : c) out.emplace_back(x.i, x.j);
  return out;
}

// Self-contained decoded view for objective-level tests: descriptor and
// detection fields set directly, no network involved.
inline DecodedImage make_decoded(const Tensor3& descriptors, const Grid2& s_tilde, int stride,
                                 const std::string& id = "synthetic") {
  DecodedImage img;
  img.id = id;
  img.stride = stride;
  img.descriptors.f = descriptors;
  img.descriptors.norm.assign(static_cast<std::size_t>(descriptors.h) * descriptors.w, 1.0);
  img.descriptors.degenerate.assign(static_cast<std::size_t>(descriptors.h) * descriptors.w, 0);
  img.detection.s_tilde = s_tilde;
  img.detection.k_star = GridIdx(s_tilde.h, s_tilde.w);
  return img;
}

// One-cell view whose single descriptor and score are given outright; the
// building block for closed-form loss arithmetic.
inline DecodedImage one_cell(const std::vector<double>& descriptor, double score = 1.0,
                             const std::string& id = "cell") {
  Tensor3 f(1, 1, static_cast<int>(descriptor.size()));
  for (std::size_t k = 0; k < descriptor.size(); ++k) f.data[k] = descriptor[k];
  Grid2 s(1, 1);
  s.at(0, 0) = score;
  return make_decoded(f, s, 1, id);
}

struct DecoderGradcheckResult {
  double loss = 0.0;
  double max_rel_err = 0.0;
  int probes = 0;
};

// Gradient check of the decoder alone, arranged so the composition is smooth:
// the channel filter starts at the exact identity and all dense inputs are
// strictly positive, making the ReLU transparent for small perturbations.
// Compares the analytic filter gradient against central differences of the
// frozen-correspondence triplet objective.
inline DecoderGradcheckResult decoder_gradcheck(int h, int w, int c, std::uint64_t seed, double eps = 1e-5) {
  const Tensor3 fq = random_tensor(h, w, c, derive_seed(seed, 1), 0.5, 1.5);
  const Tensor3 fp = random_tensor(h, w, c, derive_seed(seed, 2), 0.5, 1.5);
  const Tensor3 fn = random_tensor(h, w, c, derive_seed(seed, 3), 0.5, 1.5);
  AttentionFilter theta(c);
  for (int r = 0; r < c; ++r) theta.at(r, r) = 1.0;

  struct Decoded {
    DecodedImage img;
    AttentionCache cache;
    FeatureMap attn;
  };
  auto decode = [&](const Tensor3& dense, const std::string& id) {
    Decoded d;
    AttentionCache cache;
    d.attn = apply_attention(FeatureMap{dense, 1}, theta, &cache);
    d.cache = std::move(cache);
    d.img.id = id;
    d.img.stride = 1;
    d.img.descriptors = extract_descriptors(d.attn);
    d.img.detection = detection_scores(d.attn);
    return d;
  };

  Decoded q = decode(fq, "q"), p = decode(fp, "p"), n = decode(fn, "n");
  const Homography ident = Homography::identity();
  const CorrespondenceSet p_pos = build_correspondences(q.img, p.img, &ident);
  const CorrespondenceSet p_neg = build_correspondences(q.img, n.img, nullptr);
  const double r_pos = repeatability_term(p_pos, q.img, p.img).value;
  const double r_neg = repeatability_term(p_neg, q.img, n.img).value;
  const double margin = r_neg - r_pos + 0.5;  // forces a strictly active hinge

  DecoderGradcheckResult result;
  result.loss = margin + r_pos - r_neg;

  // analytic path: objective grads -> attention grads -> filter grads
  DecodedGrad gq(h, w, c), gp(h, w, c), gn(h, w, c);
  repeatability_backward(p_pos, q.img, p.img, 1.0, &gq, &gp);
  repeatability_backward(p_neg, q.img, n.img, -1.0, &gq, &gn);
  std::vector<double> dtheta(static_cast<std::size_t>(c) * c, 0.0);
  auto backprop = [&](Decoded& d, const DecodedGrad& g, const Tensor3& dense) {
    Tensor3 dattn(h, w, c);
    detection_backward(d.attn.data, d.img.detection, g.ds_tilde, &dattn);
    descriptors_backward(d.img.descriptors, g.ddesc, &dattn);
    attention_backward(dense, theta, d.cache, dattn, dtheta.data());
  };
  backprop(q, gq, fq);
  backprop(p, gp, fp);
  backprop(n, gn, fn);

  auto frozen_loss = [&]() {
    const Decoded tq = decode(fq, "q"), tp = decode(fp, "p"), tn = decode(fn, "n");
    return triplet_loss_frozen(tq.img, tp.img, tn.img, margin, p_pos, p_neg);
  };
  for (int r = 0; r < c; ++r)
    for (int col = 0; col < c; ++col) {
      const double saved = theta.at(r, col);
      theta.at(r, col) = saved + eps;
      const double up = frozen_loss();
      theta.at(r, col) = saved - eps;
      const double down = frozen_loss();
      theta.at(r, col) = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = dtheta[static_cast<std::size_t>(r) * c + col];
      const double rel = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      result.max_rel_err = std::max(result.max_rel_err, rel);
      ++result.probes;
    }
  return result;
}

}  // namespace testsupport
