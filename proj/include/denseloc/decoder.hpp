#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "denseloc/rng.hpp"
#include "denseloc/tensor.hpp"

namespace denseloc {

inline constexpr double kNormEps = 1e-12;

// Learned n x n channel filter; attention = ReLU(theta . F) per cell.
struct AttentionFilter {
  int n = 0;
  std::vector<double> theta;  // row-major [out][in]

  AttentionFilter() = default;
  explicit AttentionFilter(int n_) : n(n_), theta(static_cast<std::size_t>(n_) * n_, 0.0) {}

  double& at(int r, int c) { return theta[static_cast<std::size_t>(r) * n + c]; }
  double at(int r, int c) const { return theta[static_cast<std::size_t>(r) * n + c]; }

  // Identity plus small noise: starts as a near-passthrough so early detection
  // scores follow raw feature magnitudes.
  void init_identity(Rng& rng, double noise) {
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) at(r, c) = (r == c ? 1.0 : 0.0) + noise * rng.normal();
  }
};

struct AttentionCache {
  Tensor3 pre;  // theta . F before the ReLU
};

inline FeatureMap apply_attention(const FeatureMap& feat, const AttentionFilter& filter,
                                  AttentionCache* cache = nullptr) {
  const Tensor3& F = feat.data;
  if (F.c != filter.n)
    throw ShapeError("attention: feature map has " + std::to_string(F.c) + " channels, filter expects " +
                     std::to_string(filter.n));
  Tensor3 out(F.h, F.w, F.c);
  const int n = filter.n;
  for (int i = 0; i < F.h; ++i)
    for (int j = 0; j < F.w; ++j) {
      const double* v = F.cell(i, j).data();
      double* o = out.cell(i, j).data();
      for (int r = 0; r < n; ++r) {
        const double* row = filter.theta.data() + static_cast<std::size_t>(r) * n;
        double acc = 0.0;
        for (int c = 0; c < n; ++c) acc += row[c] * v[c];
        o[r] = acc;
      }
    }
  if (cache != nullptr) cache->pre = out;
  for (double& x : out.data) x = x > 0.0 ? x : 0.0;
  return FeatureMap{std::move(out), feat.stride};
}

// Propagates dA back to the feature map; accumulates dtheta (size n*n).
inline Tensor3 attention_backward(const Tensor3& F, const AttentionFilter& filter, const AttentionCache& cache,
                                  const Tensor3& dattn, double* dtheta) {
  const int n = filter.n;
  Tensor3 dfeat(F.h, F.w, F.c);
  std::vector<double> gated(static_cast<std::size_t>(n));
  for (int i = 0; i < F.h; ++i)
    for (int j = 0; j < F.w; ++j) {
      const double* pre = cache.pre.cell(i, j).data();
      const double* da = dattn.cell(i, j).data();
      const double* v = F.cell(i, j).data();
      double* df = dfeat.cell(i, j).data();
      for (int r = 0; r < n; ++r) gated[r] = pre[r] > 0.0 ? da[r] : 0.0;
      for (int c = 0; c < n; ++c) df[c] = 0.0;
      for (int r = 0; r < n; ++r) {
        const double g = gated[r];
        if (g == 0.0) continue;
        const double* row = filter.theta.data() + static_cast<std::size_t>(r) * n;
        double* drow = dtheta + static_cast<std::size_t>(r) * n;
        for (int c = 0; c < n; ++c) {
          df[c] += g * row[c];
          drow[c] += g * v[c];
        }
      }
    }
  return dfeat;
}

// Per-cell L2-normalized attention vectors. Cells whose attention vector has
// norm below kNormEps become zero vectors and are flagged degenerate.
struct DescriptorField {
  Tensor3 f;                           // unit descriptors (or zero)
  std::vector<double> norm;            // pre-normalization norms, row-major
  std::vector<std::uint8_t> degenerate;

  bool cell_degenerate(int i, int j) const { return degenerate[static_cast<std::size_t>(i) * f.w + j] != 0; }
};

inline DescriptorField extract_descriptors(const FeatureMap& attn) {
  const Tensor3& A = attn.data;
  DescriptorField out;
  out.f = Tensor3(A.h, A.w, A.c);
  out.norm.assign(static_cast<std::size_t>(A.h) * A.w, 0.0);
  out.degenerate.assign(static_cast<std::size_t>(A.h) * A.w, 0);
  for (int i = 0; i < A.h; ++i)
    for (int j = 0; j < A.w; ++j) {
      const double* a = A.cell(i, j).data();
      double* f = out.f.cell(i, j).data();
      double sq = 0.0;
      for (int k = 0; k < A.c; ++k) sq += a[k] * a[k];
      const double r = std::sqrt(sq);
      const std::size_t cell = static_cast<std::size_t>(i) * A.w + j;
      out.norm[cell] = r;
      if (r < kNormEps) {
        out.degenerate[cell] = 1;
        for (int k = 0; k < A.c; ++k) f[k] = 0.0;
      } else {
        const double inv = 1.0 / r;
        for (int k = 0; k < A.c; ++k) f[k] = a[k] * inv;
      }
    }
  return out;
}

// dA contribution of descriptor gradients: d(a/|a|) = (df - f (f.df)) / |a|.
// Degenerate cells pass no gradient.
inline void descriptors_backward(const DescriptorField& descs, const Tensor3& ddesc, Tensor3* dattn) {
  const Tensor3& f = descs.f;
  for (int i = 0; i < f.h; ++i)
    for (int j = 0; j < f.w; ++j) {
      const std::size_t cell = static_cast<std::size_t>(i) * f.w + j;
      if (descs.degenerate[cell] != 0) continue;
      const double* fv = f.cell(i, j).data();
      const double* dv = ddesc.cell(i, j).data();
      double* da = dattn->cell(i, j).data();
      double dot = 0.0;
      for (int k = 0; k < f.c; ++k) dot += fv[k] * dv[k];
      const double inv = 1.0 / descs.norm[cell];
      for (int k = 0; k < f.c; ++k) da[k] += (dv[k] - fv[k] * dot) * inv;
    }
}

// Detection: at each cell pick the strongest channel k*, then soft-score it
// against the same channel over the clipped 3x3 neighborhood; finally
// normalize scores to sum to one over the image.
struct DetectionField {
  Grid2 s_tilde;           // image-normalized scores, sums to 1
  GridIdx k_star;          // winning channel per cell (ties -> lowest index)
  Grid2 s;                 // per-cell local softmax scores, before normalization
  Grid2 shift;             // neighborhood max used for overflow-safe exp
  Grid2 z;                 // softmax denominator after the shift
  double s_total = 0.0;    // sum of s over the image
};

inline DetectionField detection_scores(const FeatureMap& attn) {
  const Tensor3& A = attn.data;
  DetectionField out;
  out.s_tilde = Grid2(A.h, A.w);
  out.s = Grid2(A.h, A.w);
  out.shift = Grid2(A.h, A.w);
  out.z = Grid2(A.h, A.w);
  out.k_star = GridIdx(A.h, A.w);
  for (int i = 0; i < A.h; ++i)
    for (int j = 0; j < A.w; ++j) {
      const double* a = A.cell(i, j).data();
      int best = 0;
      for (int k = 1; k < A.c; ++k)
        if (a[k] > a[best]) best = k;
      out.k_star.at(i, j) = best;
      const int i0 = std::max(0, i - 1), i1 = std::min(A.h - 1, i + 1);
      const int j0 = std::max(0, j - 1), j1 = std::min(A.w - 1, j + 1);
      double m = -std::numeric_limits<double>::infinity();
      for (int p = i0; p <= i1; ++p)
        for (int q = j0; q <= j1; ++q) m = std::max(m, A.at(p, q, best));
      double z = 0.0;
      for (int p = i0; p <= i1; ++p)
        for (int q = j0; q <= j1; ++q) z += std::exp(A.at(p, q, best) - m);
      out.shift.at(i, j) = m;
      out.z.at(i, j) = z;
      out.s.at(i, j) = std::exp(a[best] - m) / z;
    }
  double total = 0.0;
  for (double v : out.s.data) total += v;
  out.s_total = total;
  for (int i = 0; i < A.h; ++i)
    for (int j = 0; j < A.w; ++j) out.s_tilde.at(i, j) = out.s.at(i, j) / total;
  return out;
}

// Backward from ds_tilde to dA. k* is treated as a fixed index (the argmax is
// piecewise constant), matching the finite-difference behavior away from ties.
inline void detection_backward(const Tensor3& A, const DetectionField& det, const Grid2& ds_tilde, Tensor3* dattn) {
  const int h = A.h, w = A.w;
  // s_tilde = s / T with T = sum(s):
  //   ds_ij = (ds_tilde_ij - sum(ds_tilde * s_tilde)) / T
  double inner = 0.0;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) inner += ds_tilde.at(i, j) * det.s_tilde.at(i, j);
  const double inv_t = 1.0 / det.s_total;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const double ds = (ds_tilde.at(i, j) - inner) * inv_t;
      if (ds == 0.0) continue;
      const int k = det.k_star.at(i, j);
      const double s_ij = det.s.at(i, j);
      const double m = det.shift.at(i, j);
      const double inv_z = 1.0 / det.z.at(i, j);
      const int i0 = std::max(0, i - 1), i1 = std::min(h - 1, i + 1);
      const int j0 = std::max(0, j - 1), j1 = std::min(w - 1, j + 1);
      // softmax jacobian: d s_ij / d a_q = s_ij ([q = center] - p_q)
      for (int p = i0; p <= i1; ++p)
        for (int q = j0; q <= j1; ++q) {
          const double pq = std::exp(A.at(p, q, k) - m) * inv_z;
          const double delta = (p == i && q == j) ? 1.0 : 0.0;
          dattn->at(p, q, k) += ds * s_ij * (delta - pq);
        }
    }
}

struct Keypoint {
  int gi = 0, gj = 0;        // grid cell
  double px = 0.0, py = 0.0; // pixel center: (grid + 0.5) * stride, (x, y)
  double score = 0.0;        // s_tilde at the cell
  int channel = 0;           // winning channel
  std::vector<double> descriptor;
};

// Strict local maxima of s_tilde under a Chebyshev-radius exclusion window,
// strongest first; ties break on (row, col). Cells with degenerate
// descriptors are skipped.
inline std::vector<Keypoint> select_keypoints(const DetectionField& det, const DescriptorField& descs, int stride,
                                              int max_count, int nms_radius) {
  if (max_count < 0) throw ConfigError("max_count must be non-negative");
  if (nms_radius < 0) throw ConfigError("nms_radius must be non-negative");
  const Grid2& s = det.s_tilde;
  struct Cand {
    double score;
    int i, j;
  };
  std::vector<Cand> cands;
  for (int i = 0; i < s.h; ++i)
    for (int j = 0; j < s.w; ++j) {
      const double v = s.at(i, j);
      bool strict_max = true;
      for (int p = std::max(0, i - nms_radius); p <= std::min(s.h - 1, i + nms_radius) && strict_max; ++p)
        for (int q = std::max(0, j - nms_radius); q <= std::min(s.w - 1, j + nms_radius); ++q) {
          if (p == i && q == j) continue;
          if (s.at(p, q) >= v) {
            strict_max = false;
            break;
          }
        }
      if (!strict_max) continue;
      if (descs.cell_degenerate(i, j)) continue;
      cands.push_back({v, i, j});
    }
  // two strict maxima can never lie within each other's radius, so the sort
  // plus truncation is the whole selection
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });
  std::vector<Keypoint> out;
  for (const Cand& c : cands) {
    if (static_cast<int>(out.size()) >= max_count) break;
    Keypoint kp;
    kp.gi = c.i;
    kp.gj = c.j;
    kp.px = (c.j + 0.5) * stride;
    kp.py = (c.i + 0.5) * stride;
    kp.score = c.score;
    kp.channel = det.k_star.at(c.i, c.j);
    const auto cell = descs.f.cell(c.i, c.j);
    kp.descriptor.assign(cell.begin(), cell.end());
    out.push_back(std::move(kp));
  }
  return out;
}

struct GlobalDescriptor {
  std::vector<double> g;
  bool degenerate = false;
};

// Fixed random projection of the detection-weighted descriptor sum, then
// L2 normalization. An all-zero pooled vector yields a zero descriptor with
// the degenerate flag set.
struct GlobalProjection {
  int out_dim = 0;
  int in_dim = 0;
  std::vector<double> w;  // row-major [out][in]

  GlobalProjection() = default;
  GlobalProjection(int out_dim_, int in_dim_) : out_dim(out_dim_), in_dim(in_dim_), w(static_cast<std::size_t>(out_dim_) * in_dim_, 0.0) {}

  void init_gaussian(Rng& rng) {
    const double std = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (double& x : w) x = std * rng.normal();
  }
};

inline GlobalDescriptor global_descriptor(const DescriptorField& descs, const DetectionField& det,
                                          const GlobalProjection& proj) {
  if (proj.in_dim != descs.f.c) throw ShapeError("global projection input dim mismatch");
  std::vector<double> pooled(static_cast<std::size_t>(descs.f.c), 0.0);
  for (int i = 0; i < descs.f.h; ++i)
    for (int j = 0; j < descs.f.w; ++j) {
      const double wgt = det.s_tilde.at(i, j);
      const double* f = descs.f.cell(i, j).data();
      for (int k = 0; k < descs.f.c; ++k) pooled[k] += wgt * f[k];
    }
  GlobalDescriptor out;
  out.g.assign(static_cast<std::size_t>(proj.out_dim), 0.0);
  for (int r = 0; r < proj.out_dim; ++r) {
    const double* row = proj.w.data() + static_cast<std::size_t>(r) * proj.in_dim;
    double acc = 0.0;
    for (int k = 0; k < proj.in_dim; ++k) acc += row[k] * pooled[k];
    out.g[r] = acc;
  }
  double sq = 0.0;
  for (double v : out.g) sq += v * v;
  const double nrm = std::sqrt(sq);
  if (nrm < kNormEps) {
    out.degenerate = true;
    std::fill(out.g.begin(), out.g.end(), 0.0);
  } else {
    for (double& v : out.g) v /= nrm;
  }
  return out;
}

}  // namespace denseloc
