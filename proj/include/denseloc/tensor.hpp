#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "denseloc/common.hpp"

namespace denseloc {

// Dense rank-3 array in HWC layout: the channel vector of a grid cell is
// contiguous, which is what the decoder (per-cell descriptors) and the
// convolution kernels both want.
struct Tensor3 {
  int h = 0, w = 0, c = 0;
  std::vector<double> data;

  Tensor3() = default;
  Tensor3(int h_, int w_, int c_) : h(h_), w(w_), c(c_), data(static_cast<std::size_t>(h_) * w_ * c_, 0.0) {}

  std::size_t size() const { return data.size(); }

  double& at(int i, int j, int k) { return data[(static_cast<std::size_t>(i) * w + j) * c + k]; }
  double at(int i, int j, int k) const { return data[(static_cast<std::size_t>(i) * w + j) * c + k]; }

  std::span<double> cell(int i, int j) {
    return {data.data() + (static_cast<std::size_t>(i) * w + j) * c, static_cast<std::size_t>(c)};
  }
  std::span<const double> cell(int i, int j) const {
    return {data.data() + (static_cast<std::size_t>(i) * w + j) * c, static_cast<std::size_t>(c)};
  }

  bool same_shape(const Tensor3& o) const { return h == o.h && w == o.w && c == o.c; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Rank-2 real grid (detection scores and similar per-cell scalars).
struct Grid2 {
  int h = 0, w = 0;
  std::vector<double> data;

  Grid2() = default;
  Grid2(int h_, int w_) : h(h_), w(w_), data(static_cast<std::size_t>(h_) * w_, 0.0) {}

  double& at(int i, int j) { return data[static_cast<std::size_t>(i) * w + j]; }
  double at(int i, int j) const { return data[static_cast<std::size_t>(i) * w + j]; }
};

struct GridIdx {
  int h = 0, w = 0;
  std::vector<int> data;

  GridIdx() = default;
  GridIdx(int h_, int w_) : h(h_), w(w_), data(static_cast<std::size_t>(h_) * w_, 0) {}

  int& at(int i, int j) { return data[static_cast<std::size_t>(i) * w + j]; }
  int at(int i, int j) const { return data[static_cast<std::size_t>(i) * w + j]; }
};

// Input image: rank-3 (h x w x 3), values in [0,1], dims multiples of 32.
struct ImageTensor {
  Tensor3 data;
  std::string id;
};

inline void validate_image(const ImageTensor& img) {
  const Tensor3& t = img.data;
  if (t.c != 3) throw ShapeError("image '" + img.id + "': expected 3 channels, got " + std::to_string(t.c));
  if (t.h <= 0 || t.w <= 0 || t.h % kImageAlign != 0 || t.w % kImageAlign != 0)
    throw ShapeError("image '" + img.id + "': dimensions " + std::to_string(t.h) + "x" + std::to_string(t.w) +
                     " must be positive multiples of " + std::to_string(kImageAlign));
  for (double v : t.data)
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw ShapeError("image '" + img.id + "': values must be finite and within [0,1]");
}

// Spatial feature tensor annotated with its stride relative to the input.
struct FeatureMap {
  Tensor3 data;
  int stride = 1;
};

}  // namespace denseloc
