#pragma once

#include <cstdint>
#include <vector>

#include "denseloc/rng.hpp"
#include "denseloc/tensor.hpp"

namespace denseloc {

// k x k convolution with same padding. Weight layout is [ky][kx][in_c][out_c]
// so the inner loops run contiguously over output channels: the forward pass
// broadcasts one input scalar against a weight row, which vectorizes without
// reordering any floating-point reduction (each output accumulator is an
// independent chain, so results are run-to-run identical).
struct Conv2d {
  int in_c = 0, out_c = 0, k = 3, stride = 1;
  std::vector<double> weight;  // [k][k][in_c][out_c]
  std::vector<double> bias;    // [out_c]

  Conv2d() = default;
  Conv2d(int in_c_, int out_c_, int k_, int stride_)
      : in_c(in_c_), out_c(out_c_), k(k_), stride(stride_),
        weight(static_cast<std::size_t>(k_) * k_ * in_c_ * out_c_, 0.0),
        bias(out_c_, 0.0) {}

  std::size_t widx(int ky, int kx, int ic, int oc) const {
    return ((static_cast<std::size_t>(ky) * k + kx) * in_c + ic) * out_c + oc;
  }

  // He fan-in initialization, zero bias.
  void init_he(Rng& rng) {
    const double std_dev = std::sqrt(2.0 / (static_cast<double>(k) * k * in_c));
    for (double& v : weight) v = rng.normal(0.0, std_dev);
    for (double& v : bias) v = 0.0;
  }

  int out_h(int in_h) const { return (in_h + stride - 1) / stride; }
  int out_w(int in_w) const { return (in_w + stride - 1) / stride; }

  Tensor3 forward(const Tensor3& in) const {
    if (in.c != in_c) throw ShapeError("conv: input has " + std::to_string(in.c) + " channels, expected " + std::to_string(in_c));
    const int oh = out_h(in.h), ow = out_w(in.w);
    const int pad = k / 2;
    Tensor3 out(oh, ow, out_c);
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        double* acc = out.cell(i, j).data();
        for (int oc = 0; oc < out_c; ++oc) acc[oc] = bias[oc];
      }
      for (int ky = 0; ky < k; ++ky) {
        const int yi = i * stride + ky - pad;
        if (yi < 0 || yi >= in.h) continue;
        for (int kx = 0; kx < k; ++kx) {
          for (int j = 0; j < ow; ++j) {
            const int xj = j * stride + kx - pad;
            if (xj < 0 || xj >= in.w) continue;
            double* acc = out.cell(i, j).data();
            const double* src = in.cell(yi, xj).data();
            for (int ic = 0; ic < in_c; ++ic) {
              const double x = src[ic];
              const double* wrow = weight.data() + widx(ky, kx, ic, 0);
              for (int oc = 0; oc < out_c; ++oc) acc[oc] += x * wrow[oc];
            }
          }
        }
      }
    }
    return out;
  }

  // Gradient with respect to the input, given the upstream gradient dout.
  Tensor3 backward_input(const Tensor3& dout, int in_h, int in_w) const {
    const int pad = k / 2;
    Tensor3 din(in_h, in_w, in_c);
    for (int i = 0; i < dout.h; ++i) {
      for (int ky = 0; ky < k; ++ky) {
        const int yi = i * stride + ky - pad;
        if (yi < 0 || yi >= in_h) continue;
        for (int kx = 0; kx < k; ++kx) {
          for (int j = 0; j < dout.w; ++j) {
            const int xj = j * stride + kx - pad;
            if (xj < 0 || xj >= in_w) continue;
            const double* g = dout.cell(i, j).data();
            double* dst = din.cell(yi, xj).data();
            for (int ic = 0; ic < in_c; ++ic) {
              const double* wrow = weight.data() + widx(ky, kx, ic, 0);
              double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
              int oc = 0;
              for (; oc + 4 <= out_c; oc += 4) {
                a0 += g[oc] * wrow[oc];
                a1 += g[oc + 1] * wrow[oc + 1];
                a2 += g[oc + 2] * wrow[oc + 2];
                a3 += g[oc + 3] * wrow[oc + 3];
              }
              double a = (a0 + a1) + (a2 + a3);
              for (; oc < out_c; ++oc) a += g[oc] * wrow[oc];
              dst[ic] += a;
            }
          }
        }
      }
    }
    return din;
  }

  // Accumulates dL/dweight and dL/dbias into caller-owned buffers laid out
  // like `weight` and `bias`.
  void backward_params(const Tensor3& in, const Tensor3& dout, double* dweight, double* dbias) const {
    const int pad = k / 2;
    for (int i = 0; i < dout.h; ++i) {
      for (int j = 0; j < dout.w; ++j) {
        const double* g = dout.cell(i, j).data();
        for (int oc = 0; oc < out_c; ++oc) dbias[oc] += g[oc];
      }
      for (int ky = 0; ky < k; ++ky) {
        const int yi = i * stride + ky - pad;
        if (yi < 0 || yi >= in.h) continue;
        for (int kx = 0; kx < k; ++kx) {
          for (int j = 0; j < dout.w; ++j) {
            const int xj = j * stride + kx - pad;
            if (xj < 0 || xj >= in.w) continue;
            const double* g = dout.cell(i, j).data();
            const double* src = in.cell(yi, xj).data();
            for (int ic = 0; ic < in_c; ++ic) {
              const double x = src[ic];
              double* dw = dweight + widx(ky, kx, ic, 0);
              for (int oc = 0; oc < out_c; ++oc) dw[oc] += x * g[oc];
            }
          }
        }
      }
    }
  }

  // Analytic cost of one forward pass: 2 * h_out * w_out * c_out * k^2 * c_in.
  std::int64_t flops(int in_h, int in_w) const {
    return 2LL * out_h(in_h) * out_w(in_w) * out_c * k * k * in_c;
  }
};

inline void relu_inplace(Tensor3& t) {
  for (double& v : t.data)
    if (v < 0.0) v = 0.0;
}

// Backward through ReLU given the *output* of the forward pass: the gradient
// passes where the output is strictly positive.
inline void relu_backward_inplace(Tensor3& grad, const Tensor3& out) {
  for (std::size_t i = 0; i < grad.data.size(); ++i)
    if (out.data[i] <= 0.0) grad.data[i] = 0.0;
}

inline void relu6_inplace(Tensor3& t) {
  for (double& v : t.data) v = v < 0.0 ? 0.0 : (v > 6.0 ? 6.0 : v);
}

// ReLU6 passes gradient only on the open interval (0, 6) of the
// pre-activation; `pre` is the value before clamping.
inline void relu6_backward_inplace(Tensor3& grad, const Tensor3& pre) {
  for (std::size_t i = 0; i < grad.data.size(); ++i) {
    const double x = pre.data[i];
    if (x <= 0.0 || x >= 6.0) grad.data[i] = 0.0;
  }
}

// Nearest-neighbor upsampling by an integer factor.
inline Tensor3 upsample_nearest(const Tensor3& in, int factor) {
  if (factor < 1) throw ShapeError("upsample: factor must be >= 1");
  if (factor == 1) return in;
  Tensor3 out(in.h * factor, in.w * factor, in.c);
  for (int i = 0; i < out.h; ++i) {
    const int si = i / factor;
    for (int j = 0; j < out.w; ++j) {
      const double* src = in.cell(si, j / factor).data();
      double* dst = out.cell(i, j).data();
      for (int k = 0; k < in.c; ++k) dst[k] = src[k];
    }
  }
  return out;
}

// Backward of nearest upsampling: each source cell collects the gradient of
// every replica.
inline Tensor3 upsample_nearest_backward(const Tensor3& dout, int factor) {
  if (factor == 1) return dout;
  Tensor3 din(dout.h / factor, dout.w / factor, dout.c);
  for (int i = 0; i < dout.h; ++i) {
    const int si = i / factor;
    for (int j = 0; j < dout.w; ++j) {
      const double* src = dout.cell(i, j).data();
      double* dst = din.cell(si, j / factor).data();
      for (int k = 0; k < dout.c; ++k) dst[k] += src[k];
    }
  }
  return din;
}

}  // namespace denseloc
