#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "denseloc/geometry.hpp"
#include "denseloc/model.hpp"

namespace denseloc {

struct CellPair {
  int i1 = 0, j1 = 0;  // grid cell in image 1
  int i2 = 0, j2 = 0;  // grid cell in image 2
};

enum class CorrespondenceMode { homography, mutual_nn };

struct CorrespondenceSet {
  std::vector<CellPair> pairs;
  CorrespondenceMode mode = CorrespondenceMode::mutual_nn;
};

// With a ground-truth homography: each grid-cell center of image 1 is warped
// into image 2 and kept if it lands within half a cell (euclidean, cell
// units) of an in-bounds grid center. Without one: mutual nearest neighbors
// in descriptor space; degenerate (zero-norm) cells never participate.
inline CorrespondenceSet build_correspondences(const DecodedImage& img1, const DecodedImage& img2,
                                               const Homography* gt_homography = nullptr) {
  if (img1.stride != img2.stride) throw ShapeError("correspondences: images decoded at different strides");
  CorrespondenceSet out;
  const int h1 = img1.descriptors.f.h, w1 = img1.descriptors.f.w;
  const int h2 = img2.descriptors.f.h, w2 = img2.descriptors.f.w;
  if (gt_homography != nullptr) {
    out.mode = CorrespondenceMode::homography;
    const double s = static_cast<double>(img1.stride);
    for (int i = 0; i < h1; ++i)
      for (int j = 0; j < w1; ++j) {
        const Vec2 p = gt_homography->apply((j + 0.5) * s, (i + 0.5) * s);
        const double gj = p.x / s - 0.5;
        const double gi = p.y / s - 0.5;
        const int j2 = static_cast<int>(std::lround(gj));
        const int i2 = static_cast<int>(std::lround(gi));
        if (i2 < 0 || i2 >= h2 || j2 < 0 || j2 >= w2) continue;
        const double di = gi - i2, dj = gj - j2;
        if (std::sqrt(di * di + dj * dj) > 0.5) continue;
        out.pairs.push_back({i, j, i2, j2});
      }
    return out;
  }

  out.mode = CorrespondenceMode::mutual_nn;
  auto live_cells = [](const DecodedImage& img) {
    std::vector<int> cells;
    const int h = img.descriptors.f.h, w = img.descriptors.f.w;
    for (int c = 0; c < h * w; ++c)
      if (img.descriptors.degenerate[c] == 0) cells.push_back(c);
    return cells;
  };
  const std::vector<int> cells1 = live_cells(img1);
  const std::vector<int> cells2 = live_cells(img2);
  if (cells1.empty() || cells2.empty()) return out;
  const int c = img1.descriptors.f.c;
  if (img2.descriptors.f.c != c) throw ShapeError("correspondences: descriptor dimensions differ");

  auto nearest = [&](const Tensor3& from, const std::vector<int>& from_cells, const Tensor3& to,
                     const std::vector<int>& to_cells) {
    std::vector<int> nn(from_cells.size(), -1);
    for (std::size_t a = 0; a < from_cells.size(); ++a) {
      const double* fa = from.data.data() + static_cast<std::size_t>(from_cells[a]) * c;
      double best = std::numeric_limits<double>::infinity();
      int best_idx = -1;
      for (std::size_t b = 0; b < to_cells.size(); ++b) {
        const double* fb = to.data.data() + static_cast<std::size_t>(to_cells[b]) * c;
        double d = 0.0;
        for (int k = 0; k < c; ++k) {
          const double diff = fa[k] - fb[k];
          d += diff * diff;
        }
        if (d < best) {  // ties keep the earlier (row-major) cell
          best = d;
          best_idx = static_cast<int>(b);
        }
      }
      nn[a] = best_idx;
    }
    return nn;
  };
  const std::vector<int> nn12 = nearest(img1.descriptors.f, cells1, img2.descriptors.f, cells2);
  const std::vector<int> nn21 = nearest(img2.descriptors.f, cells2, img1.descriptors.f, cells1);
  for (std::size_t a = 0; a < cells1.size(); ++a) {
    const int b = nn12[a];
    if (b >= 0 && nn21[b] == static_cast<int>(a)) {
      const int c1 = cells1[a], c2 = cells2[b];
      out.pairs.push_back({c1 / w1, c1 % w1, c2 / w2, c2 % w2});
    }
  }
  return out;
}

struct RepeatabilityResult {
  double value = 0.0;
  bool degenerate = false;  // empty P or all-zero weights
};

// Detection-weighted mean descriptor distance over the correspondence set:
//   R = sum_p [u_p / sum u] * ||f1_p - f2_p||,   u_p = s1_p * s2_p.
// Bounded by [0, 2] for unit descriptors; invariant to common positive
// rescaling of either detection field.
inline RepeatabilityResult repeatability_term(const CorrespondenceSet& P, const DecodedImage& img1,
                                              const DecodedImage& img2) {
  RepeatabilityResult out;
  if (P.pairs.empty()) {
    out.degenerate = true;
    return out;
  }
  double wsum = 0.0, acc = 0.0;
  const int c = img1.descriptors.f.c;
  for (const CellPair& p : P.pairs) {
    const double u = img1.detection.s_tilde.at(p.i1, p.j1) * img2.detection.s_tilde.at(p.i2, p.j2);
    const double* f1 = img1.descriptors.f.cell(p.i1, p.j1).data();
    const double* f2 = img2.descriptors.f.cell(p.i2, p.j2).data();
    double sq = 0.0;
    for (int k = 0; k < c; ++k) {
      const double d = f1[k] - f2[k];
      sq += d * d;
    }
    wsum += u;
    acc += u * std::sqrt(sq);
  }
  if (wsum <= 0.0) {
    out.degenerate = true;
    return out;
  }
  out.value = acc / wsum;
  return out;
}

// Accumulates d(upstream * R)/d(fields) into the two images' output grads.
inline void repeatability_backward(const CorrespondenceSet& P, const DecodedImage& img1, const DecodedImage& img2,
                                   double upstream, DecodedGrad* g1, DecodedGrad* g2) {
  if (P.pairs.empty()) return;
  const int c = img1.descriptors.f.c;
  std::vector<double> u(P.pairs.size()), d(P.pairs.size());
  double wsum = 0.0, acc = 0.0;
  for (std::size_t p = 0; p < P.pairs.size(); ++p) {
    const CellPair& cp = P.pairs[p];
    u[p] = img1.detection.s_tilde.at(cp.i1, cp.j1) * img2.detection.s_tilde.at(cp.i2, cp.j2);
    const double* f1 = img1.descriptors.f.cell(cp.i1, cp.j1).data();
    const double* f2 = img2.descriptors.f.cell(cp.i2, cp.j2).data();
    double sq = 0.0;
    for (int k = 0; k < c; ++k) {
      const double diff = f1[k] - f2[k];
      sq += diff * diff;
    }
    d[p] = std::sqrt(sq);
    wsum += u[p];
    acc += u[p] * d[p];
  }
  if (wsum <= 0.0) return;
  const double r = acc / wsum;
  for (std::size_t p = 0; p < P.pairs.size(); ++p) {
    const CellPair& cp = P.pairs[p];
    // dR/du_p = (d_p - R) / sum u; u_p = s1 s2
    const double du = upstream * (d[p] - r) / wsum;
    g1->ds_tilde.at(cp.i1, cp.j1) += du * img2.detection.s_tilde.at(cp.i2, cp.j2);
    g2->ds_tilde.at(cp.i2, cp.j2) += du * img1.detection.s_tilde.at(cp.i1, cp.j1);
    if (d[p] > 0.0) {
      const double w_over_d = upstream * (u[p] / wsum) / d[p];
      const double* f1 = img1.descriptors.f.cell(cp.i1, cp.j1).data();
      const double* f2 = img2.descriptors.f.cell(cp.i2, cp.j2).data();
      double* df1 = g1->ddesc.cell(cp.i1, cp.j1).data();
      double* df2 = g2->ddesc.cell(cp.i2, cp.j2).data();
      for (int k = 0; k < c; ++k) {
        const double diff = (f1[k] - f2[k]) * w_over_d;
        df1[k] += diff;
        df2[k] -= diff;
      }
    }
  }
}

struct TripletLossResult {
  double loss = 0.0;
  double r_pos = 0.0;
  double r_neg = 0.0;
  bool pos_degenerate = false;
  bool neg_degenerate = false;
  CorrespondenceSet p_pos;
  CorrespondenceSet p_neg;
};

// Hinge ranking loss L = max(margin + R(q,pos) - R(q,neg), 0). Positive
// correspondences use the ground-truth homography when one is supplied;
// negatives always use mutual nearest neighbors.
inline TripletLossResult triplet_loss(const DecodedImage& query, const DecodedImage& pos, const DecodedImage& neg,
                                      double margin, const Homography* h_pos = nullptr) {
  if (margin < 0.0) throw ConfigError("margin must be non-negative");
  TripletLossResult out;
  out.p_pos = build_correspondences(query, pos, h_pos);
  out.p_neg = build_correspondences(query, neg, nullptr);
  const RepeatabilityResult rp = repeatability_term(out.p_pos, query, pos);
  const RepeatabilityResult rn = repeatability_term(out.p_neg, query, neg);
  out.r_pos = rp.value;
  out.r_neg = rn.value;
  out.pos_degenerate = rp.degenerate;
  out.neg_degenerate = rn.degenerate;
  out.loss = std::max(margin + out.r_pos - out.r_neg, 0.0);
  return out;
}

// Same loss on fixed correspondence sets; the finite-difference evaluations
// in the gradient check hold P constant while parameters move.
inline double triplet_loss_frozen(const DecodedImage& query, const DecodedImage& pos, const DecodedImage& neg,
                                  double margin, const CorrespondenceSet& p_pos, const CorrespondenceSet& p_neg) {
  const double rp = repeatability_term(p_pos, query, pos).value;
  const double rn = repeatability_term(p_neg, query, neg).value;
  return std::max(margin + rp - rn, 0.0);
}

// Adds d(scale * L)/d(params) for one active-hinge triplet into `grad`.
// Caches must come from the same decode that produced the DecodedImages.
inline void triplet_backward(Model& model, const DecodedImage& query, const DecodedImage& pos,
                             const DecodedImage& neg, const ForwardCache& cache_q, const ForwardCache& cache_p,
                             const ForwardCache& cache_n, const TripletLossResult& result, double scale,
                             std::vector<double>& grad) {
  if (result.loss <= 0.0) return;
  const int h = query.descriptors.f.h, w = query.descriptors.f.w, c = query.descriptors.f.c;
  DecodedGrad gq(h, w, c);
  DecodedGrad gp(pos.descriptors.f.h, pos.descriptors.f.w, c);
  DecodedGrad gn(neg.descriptors.f.h, neg.descriptors.f.w, c);
  repeatability_backward(result.p_pos, query, pos, scale, &gq, &gp);
  repeatability_backward(result.p_neg, query, neg, -scale, &gq, &gn);
  model_backward(model, query, cache_q, gq, grad);
  model_backward(model, pos, cache_p, gp, grad);
  model_backward(model, neg, cache_n, gn, grad);
}

struct GradcheckReport {
  bool hinge_active = false;
  double loss = 0.0;
  double max_rel_err = 0.0;
  int probes = 0;
};

// Central finite differences against the analytic gradient on a random
// parameter subset, at a point where the hinge is strictly active.
// Correspondence sets are frozen at the base point; the argmax channels are
// effectively constant under eps-sized perturbations away from ties.
inline GradcheckReport gradcheck(Model& model, const ImageTensor& query_img, const ImageTensor& pos_img,
                                 const ImageTensor& neg_img, const Homography* h_pos, double margin, double eps,
                                 int min_probes, Rng& rng) {
  GradcheckReport report;
  ForwardCache cq, cp, cn;
  const KeypointOptions kp_opts;
  DecodedImage q = decode_image(model, query_img, kp_opts, &cq);
  DecodedImage p = decode_image(model, pos_img, kp_opts, &cp);
  DecodedImage n = decode_image(model, neg_img, kp_opts, &cn);
  const TripletLossResult base = triplet_loss(q, p, n, margin, h_pos);
  report.loss = base.loss;
  if (base.loss <= 0.0) return report;  // caller resamples
  report.hinge_active = true;

  const std::size_t total = param_count(model);
  std::vector<double> analytic(total, 0.0);
  triplet_backward(model, q, p, n, cq, cp, cn, base, 1.0, analytic);

  const auto views = param_views(model);
  auto param_at = [&](std::size_t flat) -> double* {
    for (const auto& v : views)
      if (flat >= v.offset && flat < v.offset + v.size) return v.data + (flat - v.offset);
    throw ShapeError("parameter index out of range");
  };
  auto frozen_loss = [&]() {
    const DecodedImage fq = decode_image(model, query_img, kp_opts);
    const DecodedImage fp = decode_image(model, pos_img, kp_opts);
    const DecodedImage fn = decode_image(model, neg_img, kp_opts);
    return triplet_loss_frozen(fq, fp, fn, margin, base.p_pos, base.p_neg);
  };

  std::vector<std::size_t> picked;
  std::vector<bool> seen(total, false);
  while (static_cast<int>(picked.size()) < min_probes && picked.size() < total) {
    const std::size_t idx = rng.uniform_index(total);
    if (seen[idx]) continue;
    seen[idx] = true;
    picked.push_back(idx);
  }
  for (const std::size_t idx : picked) {
    double* slot = param_at(idx);
    const double saved = *slot;
    *slot = saved + eps;
    const double up = frozen_loss();
    *slot = saved - eps;
    const double down = frozen_loss();
    *slot = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double rel = std::abs(analytic[idx] - numeric) /
                       std::max(1e-8, std::abs(analytic[idx]) + std::abs(numeric));
    report.max_rel_err = std::max(report.max_rel_err, rel);
  }
  report.probes = static_cast<int>(picked.size());
  return report;
}

}  // namespace denseloc
