#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "denseloc/common.hpp"
#include "denseloc/tensor.hpp"

namespace denseloc {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

// Row-major 3x3 projective transform on pixel coordinates.
struct Homography {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return Homography{}; }

  Vec2 apply(double x, double y) const {
    const double u = m[0] * x + m[1] * y + m[2];
    const double v = m[3] * x + m[4] * y + m[5];
    const double w = m[6] * x + m[7] * y + m[8];
    if (std::abs(w) < 1e-15) throw NumericalError("homography maps point to infinity");
    return Vec2{u / w, v / w};
  }

  Homography compose(const Homography& rhs) const {  // this * rhs
    Homography out;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) acc += m[i * 3 + k] * rhs.m[k * 3 + j];
        out.m[i * 3 + j] = acc;
      }
    return out;
  }

  Homography inverse() const {
    const auto& a = m;
    const double c00 = a[4] * a[8] - a[5] * a[7];
    const double c01 = a[5] * a[6] - a[3] * a[8];
    const double c02 = a[3] * a[7] - a[4] * a[6];
    const double det = a[0] * c00 + a[1] * c01 + a[2] * c02;
    if (std::abs(det) < 1e-15) throw NumericalError("homography is singular");
    const double inv = 1.0 / det;
    Homography out;
    out.m = {c00 * inv,
             (a[2] * a[7] - a[1] * a[8]) * inv,
             (a[1] * a[5] - a[2] * a[4]) * inv,
             c01 * inv,
             (a[0] * a[8] - a[2] * a[6]) * inv,
             (a[2] * a[3] - a[0] * a[5]) * inv,
             c02 * inv,
             (a[1] * a[6] - a[0] * a[7]) * inv,
             (a[0] * a[4] - a[1] * a[3]) * inv};
    return out;
  }
};

// Direct linear transform from four point correspondences, solving the 8x8
// system with h33 fixed to 1. Gaussian elimination with partial pivoting;
// near-degenerate quads raise NumericalError.
inline Homography homography_from_points(const std::array<Vec2, 4>& src, const std::array<Vec2, 4>& dst) {
  double a[8][9] = {};
  for (int p = 0; p < 4; ++p) {
    const double x = src[p].x, y = src[p].y;
    const double u = dst[p].x, v = dst[p].y;
    double* r0 = a[2 * p];
    double* r1 = a[2 * p + 1];
    r0[0] = x; r0[1] = y; r0[2] = 1; r0[6] = -u * x; r0[7] = -u * y; r0[8] = u;
    r1[3] = x; r1[4] = y; r1[5] = 1; r1[6] = -v * x; r1[7] = -v * y; r1[8] = v;
  }
  for (int col = 0; col < 8; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 8; ++r)
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    if (std::abs(a[pivot][col]) < 1e-12) throw NumericalError("degenerate point configuration for homography fit");
    if (pivot != col)
      for (int c = 0; c <= 8; ++c) std::swap(a[pivot][c], a[col][c]);
    for (int r = col + 1; r < 8; ++r) {
      const double f = a[r][col] / a[col][col];
      if (f == 0.0) continue;
      for (int c = col; c <= 8; ++c) a[r][c] -= f * a[col][c];
    }
  }
  std::array<double, 8> h{};
  for (int r = 7; r >= 0; --r) {
    double acc = a[r][8];
    for (int c = r + 1; c < 8; ++c) acc -= a[r][c] * h[c];
    h[r] = acc / a[r][r];
  }
  Homography out;
  for (int i = 0; i < 8; ++i) out.m[i] = h[i];
  out.m[8] = 1.0;
  return out;
}

// Bilinear sample with clamp-to-edge borders; coordinates are pixel centers.
inline double sample_bilinear(const Tensor3& img, double x, double y, int channel) {
  const double fx = std::clamp(x, 0.0, static_cast<double>(img.w - 1));
  const double fy = std::clamp(y, 0.0, static_cast<double>(img.h - 1));
  const int x0 = static_cast<int>(std::floor(fx));
  const int y0 = static_cast<int>(std::floor(fy));
  const int x1 = std::min(x0 + 1, img.w - 1);
  const int y1 = std::min(y0 + 1, img.h - 1);
  const double tx = fx - x0;
  const double ty = fy - y0;
  const double v00 = img.at(y0, x0, channel);
  const double v01 = img.at(y0, x1, channel);
  const double v10 = img.at(y1, x0, channel);
  const double v11 = img.at(y1, x1, channel);
  return (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
}

// Warps `src` into an out_h x out_w view: each output pixel samples src at
// H^-1 (x, y). H maps src pixel coordinates to output pixel coordinates.
inline Tensor3 warp_image(const Tensor3& src, const Homography& h, int out_h, int out_w) {
  const Homography inv = h.inverse();
  Tensor3 out(out_h, out_w, src.c);
  for (int i = 0; i < out_h; ++i)
    for (int j = 0; j < out_w; ++j) {
      const Vec2 p = inv.apply(j, i);
      for (int k = 0; k < src.c; ++k) out.at(i, j, k) = sample_bilinear(src, p.x, p.y, k);
    }
  return out;
}

}  // namespace denseloc
