#include "canopy/nn.hpp"

#include <algorithm>
#include <cmath>

#include "../core/gemm.hpp"
#include "canopy/ops.hpp"

namespace canopy::nn {

using detail::attach;
using detail::grad_sink;
using detail::make_output;
using detail::result_dtype;

namespace {

struct Spatial {
  std::size_t n, h, w, c;
  bool batched;
};

Spatial spatial(const Tensor& x, const char* op) {
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2), false};
  fail(ErrorCode::kShapeMismatch, std::string(op) + ": expected [N,H,W,C] or [H,W,C], got " + to_string(x.shape()));
}

Shape spatial_shape(const Spatial& s, std::size_t h, std::size_t w, std::size_t c) {
  return s.batched ? Shape{s.n, h, w, c} : Shape{h, w, c};
}

// Patch matrix [gh*gw, k*k*c] of an h x w x c image for a k x k window with
// the given stride and zero padding, one row per output position.
void im2col(const double* img, std::size_t h, std::size_t w, std::size_t c, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t gh, std::size_t gw, double* cols) {
  const std::size_t kk = k * k * c;
  for (std::size_t oy = 0; oy < gh; ++oy) {
    for (std::size_t ox = 0; ox < gw; ++ox) {
      double* row = cols + (oy * gw + ox) * kk;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
          double* dst = row + (ky * k + kx) * c;
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) {
            std::fill_n(dst, c, 0.0);
          } else {
            std::copy_n(img + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c, c, dst);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds patch rows back into the image.
void col2im(const double* cols, std::size_t h, std::size_t w, std::size_t c, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t gh, std::size_t gw, double* img) {
  const std::size_t kk = k * k * c;
  for (std::size_t oy = 0; oy < gh; ++oy) {
    for (std::size_t ox = 0; ox < gw; ++ox) {
      const double* row = cols + (oy * gw + ox) * kk;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
          if (ix < 0 || ix >= static_cast<long>(w)) continue;
          const double* src = row + (ky * k + kx) * c;
          double* dst = img + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c;
          for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
        }
      }
    }
  }
}

void add_bias_rows(double* out, std::size_t rows, const std::vector<double>& bias) {
  const std::size_t c = bias.size();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += bias[j];
}

void bias_grad(std::span<double> sink, std::span<const double> g, std::size_t c) {
  if (sink.empty()) return;
  for (std::size_t i = 0; i < g.size(); ++i) sink[i % c] += g[i];
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t padding) {
  require(stride > 0, ErrorCode::kInvalidArgument, "conv stride must be positive");
  require(in + 2 * padding >= k, ErrorCode::kShapeMismatch,
          "kernel " + std::to_string(k) + " larger than padded input " + std::to_string(in + 2 * padding));
  return (in + 2 * padding - k) / stride + 1;
}

Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
  const auto s = spatial(x, "conv2d");
  const Tensor& kernel = p.kernel;
  require(kernel.rank() == 4 && kernel.dim(0) == kernel.dim(1), ErrorCode::kShapeMismatch,
          "conv2d: kernel must be [k,k,C_in,C_out], got " + to_string(kernel.shape()));
  const std::size_t k = kernel.dim(0);
  const std::size_t co = kernel.dim(3);
  require(kernel.dim(2) == s.c, ErrorCode::kShapeMismatch,
          "conv2d: input has " + std::to_string(s.c) + " channels, kernel expects " + std::to_string(kernel.dim(2)));
  require(p.bias.numel() == co, ErrorCode::kShapeMismatch, "conv2d: bias length mismatch");
  const std::size_t ho = conv_out_extent(s.h, k, p.stride, p.padding);
  const std::size_t wo = conv_out_extent(s.w, k, p.stride, p.padding);
  const std::size_t kk = k * k * s.c;
  const std::size_t rows = ho * wo;
  const bool pointwise = k == 1 && p.stride == 1 && p.padding == 0;

  std::vector<double> out(s.n * rows * co);
  std::vector<double> cols(pointwise ? 0 : rows * kk);
  const std::vector<double> bias(p.bias.data().begin(), p.bias.data().end());
  for (std::size_t b = 0; b < s.n; ++b) {
    const double* img = x.data().data() + b * s.h * s.w * s.c;
    const double* a = img;
    if (!pointwise) {
      im2col(img, s.h, s.w, s.c, k, p.stride, p.padding, ho, wo, cols.data());
      a = cols.data();
    }
    double* o = out.data() + b * rows * co;
    detail::gemm(a, kernel.data().data(), o, rows, kk, co, false, false, false);
    add_bias_rows(o, rows, bias);
  }
  Tensor y = make_output(spatial_shape(s, ho, wo, co), std::move(out), result_dtype({&x, &kernel}), "conv2d");

  auto px = x.ptr();
  auto pk = kernel.ptr();
  auto pb = p.bias.ptr();
  const std::size_t stride = p.stride, pad = p.padding;
  attach(y, "conv2d", {x, kernel, p.bias}, [=](std::span<const double> g) {
    auto dx = grad_sink(*px);
    auto dk = grad_sink(*pk);
    bias_grad(grad_sink(*pb), g, co);
    if (dx.empty() && dk.empty()) return;
    std::vector<double> buf(pointwise ? 0 : rows * kk);
    std::vector<double> dcols(dx.empty() || pointwise ? 0 : rows * kk);
    for (std::size_t b = 0; b < s.n; ++b) {
      const double* img = px->data.data() + b * s.h * s.w * s.c;
      const double* gb = g.data() + b * rows * co;
      if (!dk.empty()) {
        const double* a = img;
        if (!pointwise) {
          im2col(img, s.h, s.w, s.c, k, stride, pad, ho, wo, buf.data());
          a = buf.data();
        }
        detail::gemm(a, gb, dk.data(), kk, rows, co, true, false, true);
      }
      if (!dx.empty()) {
        double* dimg = dx.data() + b * s.h * s.w * s.c;
        if (pointwise) {
          detail::gemm(gb, pk->data.data(), dimg, rows, co, kk, false, true, true);
        } else {
          detail::gemm(gb, pk->data.data(), dcols.data(), rows, co, kk, false, true, false);
          col2im(dcols.data(), s.h, s.w, s.c, k, stride, pad, ho, wo, dimg);
        }
      }
    }
  });
  return y;
}

Tensor conv2d_transpose(const Tensor& x, const ConvT2dParams& p) {
  const auto s = spatial(x, "conv2d_transpose");
  const Tensor& kernel = p.kernel;
  require(kernel.rank() == 4 && kernel.dim(0) == kernel.dim(1), ErrorCode::kShapeMismatch,
          "conv2d_transpose: kernel must be [k,k,C_out,C_in], got " + to_string(kernel.shape()));
  require(p.stride > 0, ErrorCode::kInvalidArgument, "conv2d_transpose: stride must be positive");
  const std::size_t k = kernel.dim(0);
  const std::size_t co = kernel.dim(2);
  require(kernel.dim(3) == s.c, ErrorCode::kShapeMismatch,
          "conv2d_transpose: input has " + std::to_string(s.c) + " channels, kernel expects " +
              std::to_string(kernel.dim(3)));
  require(p.bias.numel() == co, ErrorCode::kShapeMismatch, "conv2d_transpose: bias length mismatch");
  const std::size_t stride = p.stride;
  const std::size_t ho = (s.h - 1) * stride + k;
  const std::size_t wo = (s.w - 1) * stride + k;
  const std::size_t rows = s.h * s.w;
  const std::size_t kk = k * k * co;

  std::vector<double> out(s.n * ho * wo * co, 0.0);
  std::vector<double> cols(rows * kk);
  for (std::size_t b = 0; b < s.n; ++b) {
    const double* xb = x.data().data() + b * rows * s.c;
    detail::gemm(xb, kernel.data().data(), cols.data(), rows, s.c, kk, false, true, false);
    col2im(cols.data(), ho, wo, co, k, stride, 0, s.h, s.w, out.data() + b * ho * wo * co);
  }
  const std::vector<double> bias(p.bias.data().begin(), p.bias.data().end());
  add_bias_rows(out.data(), s.n * ho * wo, bias);
  Tensor y = make_output(spatial_shape(s, ho, wo, co), std::move(out), result_dtype({&x, &kernel}),
                         "conv2d_transpose");

  auto px = x.ptr();
  auto pk = kernel.ptr();
  auto pb = p.bias.ptr();
  attach(y, "conv2d_transpose", {x, kernel, p.bias}, [=](std::span<const double> g) {
    auto dx = grad_sink(*px);
    auto dk = grad_sink(*pk);
    bias_grad(grad_sink(*pb), g, co);
    if (dx.empty() && dk.empty()) return;
    std::vector<double> dcols(rows * kk);
    for (std::size_t b = 0; b < s.n; ++b) {
      im2col(g.data() + b * ho * wo * co, ho, wo, co, k, stride, 0, s.h, s.w, dcols.data());
      if (!dx.empty())
        detail::gemm(dcols.data(), pk->data.data(), dx.data() + b * rows * s.c, rows, kk, s.c, false, false, true);
      if (!dk.empty())
        detail::gemm(dcols.data(), px->data.data() + b * rows * s.c, dk.data(), kk, rows, s.c, true, false, true);
    }
  });
  return y;
}

Tensor batch_norm(const Tensor& x, BatchNormState& st) {
  require(x.rank() >= 2, ErrorCode::kShapeMismatch, "batch_norm: rank must be >= 2");
  const std::size_t c = x.shape().back();
  require(st.gamma.numel() == c && st.beta.numel() == c && st.running_mean.numel() == c &&
              st.running_var.numel() == c,
          ErrorCode::kShapeMismatch, "batch_norm: state has wrong channel count");
  const std::size_t m = x.numel() / c;
  const auto xd = x.data();
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  const bool train = st.mode == NormMode::kTrain;
  if (train) {
    require(m >= 2, ErrorCode::kInvalidArgument, "batch_norm: train mode needs >= 2 samples per channel");
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) mean[j] += xd[i * c + j];
    for (auto& v : mean) v /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = xd[i * c + j] - mean[j];
        var[j] += d * d;
      }
    for (auto& v : var) v /= static_cast<double>(m);
    for (std::size_t j = 0; j < c; ++j)
      require(std::isfinite(mean[j]) && std::isfinite(var[j]), ErrorCode::kNumeric,
              "batch_norm: non-finite statistics");
    auto rm = st.running_mean.data_mut();
    auto rv = st.running_var.data_mut();
    const double unbias = static_cast<double>(m) / static_cast<double>(m - 1);
    for (std::size_t j = 0; j < c; ++j) {
      rm[j] = (1.0 - st.momentum) * rm[j] + st.momentum * mean[j];
      rv[j] = (1.0 - st.momentum) * rv[j] + st.momentum * var[j] * unbias;
    }
  } else {
    std::copy(st.running_mean.data().begin(), st.running_mean.data().end(), mean.begin());
    std::copy(st.running_var.data().begin(), st.running_var.data().end(), var.begin());
  }
  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + st.eps);
  std::vector<double> xhat(x.numel()), out(x.numel());
  const auto gd = st.gamma.data();
  const auto bd = st.beta.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t idx = i * c + j;
      xhat[idx] = (xd[idx] - mean[j]) * inv_std[j];
      out[idx] = gd[j] * xhat[idx] + bd[j];
    }
  Tensor y = make_output(x.shape(), std::move(out), result_dtype({&x}), "batch_norm");
  auto px = x.ptr();
  auto pg = st.gamma.ptr();
  auto pbeta = st.beta.ptr();
  attach(y, "batch_norm", {x, st.gamma, st.beta},
         [px, pg, pbeta, xhat = std::move(xhat), inv_std, m, c, train](std::span<const double> g) {
           auto dg = grad_sink(*pg);
           auto db = grad_sink(*pbeta);
           auto dx = grad_sink(*px);
           std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
           for (std::size_t i = 0; i < m; ++i)
             for (std::size_t j = 0; j < c; ++j) {
               sum_g[j] += g[i * c + j];
               sum_gx[j] += g[i * c + j] * xhat[i * c + j];
             }
           for (std::size_t j = 0; j < c; ++j) {
             if (!dg.empty()) dg[j] += sum_gx[j];
             if (!db.empty()) db[j] += sum_g[j];
           }
           if (dx.empty()) return;
           const double inv_m = 1.0 / static_cast<double>(m);
           for (std::size_t i = 0; i < m; ++i)
             for (std::size_t j = 0; j < c; ++j) {
               const std::size_t idx = i * c + j;
               const double scale = pg->data[j] * inv_std[j];
               if (train) {
                 dx[idx] += scale * (g[idx] - inv_m * sum_g[j] - xhat[idx] * inv_m * sum_gx[j]);
               } else {
                 dx[idx] += scale * g[idx];
               }
             }
         });
  return y;
}

namespace {

template <class Fwd, class Deriv>
Tensor pointwise(const Tensor& x, const char* op, Fwd&& f, Deriv&& df) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.data()[i]);
  Tensor y = make_output(x.shape(), std::move(out), result_dtype({&x}), op);
  auto px = x.ptr();
  attach(y, op, {x}, [px, df](std::span<const double> g) {
    auto dx = grad_sink(*px);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * df(px->data[i]);
  });
  return y;
}

double stable_softplus(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor leaky_relu(const Tensor& x, double slope) {
  return pointwise(
      x, "leaky_relu", [slope](double v) { return v >= 0.0 ? v : slope * v; },
      [slope](double v) { return v >= 0.0 ? 1.0 : slope; });
}

Tensor softplus(const Tensor& x) { return pointwise(x, "softplus", stable_softplus, sigmoid); }

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return pointwise(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v) { return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v); });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require(axis < x.rank(), ErrorCode::kInvalidArgument, "softmax axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xd[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  Tensor y = make_output(x.shape(), std::move(out), result_dtype({&x}), "softmax");
  auto px = x.ptr();
  auto py = y.ptr();
  attach(y, "softmax", {x}, [px, py, outer, inner, len](std::span<const double> g) {
    auto dx = grad_sink(*px);
    if (dx.empty()) return;
    const auto& yd = py->data;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * yd[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          dx[idx] += yd[idx] * (g[idx] - dot);
        }
      }
  });
  return y;
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  require(x.rank() >= 1, ErrorCode::kShapeMismatch, "layer_norm on rank-0 tensor");
  const std::size_t d = x.shape().back();
  require(d >= 2, ErrorCode::kInvalidArgument, "layer_norm: trailing extent must be >= 2");
  require(p.gamma.numel() == d && p.beta.numel() == d, ErrorCode::kShapeMismatch, "layer_norm: affine size mismatch");
  const std::size_t rows = x.numel() / d;
  const auto xd = x.data();
  std::vector<double> xhat(x.numel()), out(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xd[r * d + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double t = xd[r * d + j] - mean;
      var += t * t;
    }
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + p.eps);
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t idx = r * d + j;
      xhat[idx] = (xd[idx] - mean) * inv_std[r];
      out[idx] = p.gamma.data()[j] * xhat[idx] + p.beta.data()[j];
    }
  }
  Tensor y = make_output(x.shape(), std::move(out), result_dtype({&x}), "layer_norm");
  auto px = x.ptr();
  auto pg = p.gamma.ptr();
  auto pb = p.beta.ptr();
  attach(y, "layer_norm", {x, p.gamma, p.beta},
         [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](std::span<const double> g) {
           auto dx = grad_sink(*px);
           auto dg = grad_sink(*pg);
           auto db = grad_sink(*pb);
           const double inv_d = 1.0 / static_cast<double>(d);
           for (std::size_t r = 0; r < rows; ++r) {
             double sum_gh = 0.0, sum_ghx = 0.0;
             for (std::size_t j = 0; j < d; ++j) {
               const std::size_t idx = r * d + j;
               if (!dg.empty()) dg[j] += g[idx] * xhat[idx];
               if (!db.empty()) db[j] += g[idx];
               const double gh = g[idx] * pg->data[j];
               sum_gh += gh;
               sum_ghx += gh * xhat[idx];
             }
             if (dx.empty()) continue;
             for (std::size_t j = 0; j < d; ++j) {
               const std::size_t idx = r * d + j;
               const double gh = g[idx] * pg->data[j];
               dx[idx] += inv_std[r] * (gh - inv_d * sum_gh - xhat[idx] * inv_d * sum_ghx);
             }
           }
         });
  return y;
}

Tensor linear(const Tensor& x, const LinearParams& p) {
  require(p.weight.rank() == 2, ErrorCode::kShapeMismatch, "linear: weight must be 2-D");
  const std::size_t din = p.weight.dim(0), dout = p.weight.dim(1);
  require(x.rank() >= 1 && x.shape().back() == din, ErrorCode::kShapeMismatch,
          "linear: input " + to_string(x.shape()) + " vs weight " + to_string(p.weight.shape()));
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor flat = x.rank() == 2 ? x : ops::reshape(x, {x.numel() / din, din});
  Tensor y = ops::add_bias(ops::matmul(flat, p.weight), p.bias);
  return x.rank() == 2 ? y : ops::reshape(y, out_shape);
}

Tensor mhsa(const Tensor& tokens, const MhsaParams& p, std::vector<Tensor>* weights) {
  require(tokens.rank() == 2, ErrorCode::kShapeMismatch, "mhsa expects tokens [N, D]");
  const std::size_t d = tokens.dim(1);
  require(p.heads > 0 && d % p.heads == 0, ErrorCode::kInvalidArgument,
          "mhsa: width " + std::to_string(d) + " not divisible by " + std::to_string(p.heads) + " heads");
  const std::size_t dh = d / p.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = linear(tokens, p.q);
  Tensor k = linear(tokens, p.k);
  Tensor v = linear(tokens, p.v);
  std::vector<Tensor> heads;
  if (weights) weights->clear();
  for (std::size_t h = 0; h < p.heads; ++h) {
    Tensor qh = p.heads == 1 ? q : ops::slice(q, 1, h * dh, (h + 1) * dh);
    Tensor kh = p.heads == 1 ? k : ops::slice(k, 1, h * dh, (h + 1) * dh);
    Tensor vh = p.heads == 1 ? v : ops::slice(v, 1, h * dh, (h + 1) * dh);
    Tensor scores = ops::mul(ops::matmul(qh, ops::transpose(kh)), scale);
    Tensor attn = softmax(scores, 1);
    if (weights) weights->push_back(attn);
    heads.push_back(ops::matmul(attn, vh));
  }
  Tensor merged = p.heads == 1 ? heads[0] : ops::concat(heads, 1);
  return linear(merged, p.out);
}

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  const auto s = spatial(x, "bilinear_resize");
  require(out_h >= 1 && out_w >= 1, ErrorCode::kInvalidArgument, "bilinear_resize: target must be >= 1");
  if (out_h == s.h && out_w == s.w) return ops::reshape(x, x.shape());

  struct Tap {
    std::size_t i0, i1;
    double w1;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      if (src < 0.0) src = 0.0;
      auto i0 = static_cast<std::size_t>(src);
      if (i0 > in - 1) i0 = in - 1;
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(s.h, out_h);
  const auto tx = taps(s.w, out_w);
  const std::size_t c = s.c;
  std::vector<double> out(s.n * out_h * out_w * c, 0.0);
  const auto xd = x.data();
  for (std::size_t b = 0; b < s.n; ++b)
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& a = ty[oy];
        const auto& bx = tx[ox];
        const double w00 = (1 - a.w1) * (1 - bx.w1), w01 = (1 - a.w1) * bx.w1;
        const double w10 = a.w1 * (1 - bx.w1), w11 = a.w1 * bx.w1;
        const double* base = xd.data() + b * s.h * s.w * c;
        double* o = out.data() + ((b * out_h + oy) * out_w + ox) * c;
        for (std::size_t j = 0; j < c; ++j)
          o[j] = w00 * base[(a.i0 * s.w + bx.i0) * c + j] + w01 * base[(a.i0 * s.w + bx.i1) * c + j] +
                 w10 * base[(a.i1 * s.w + bx.i0) * c + j] + w11 * base[(a.i1 * s.w + bx.i1) * c + j];
      }
  Tensor y = make_output(spatial_shape(s, out_h, out_w, c), std::move(out), result_dtype({&x}), "bilinear_resize");
  auto px = x.ptr();
  attach(y, "bilinear_resize", {x}, [px, s, ty, tx, out_h, out_w, c](std::span<const double> g) {
    auto dx = grad_sink(*px);
    if (dx.empty()) return;
    for (std::size_t b = 0; b < s.n; ++b)
      for (std::size_t oy = 0; oy < out_h; ++oy)
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const auto& a = ty[oy];
          const auto& bx = tx[ox];
          const double w00 = (1 - a.w1) * (1 - bx.w1), w01 = (1 - a.w1) * bx.w1;
          const double w10 = a.w1 * (1 - bx.w1), w11 = a.w1 * bx.w1;
          double* base = dx.data() + b * s.h * s.w * c;
          const double* go = g.data() + ((b * out_h + oy) * out_w + ox) * c;
          for (std::size_t j = 0; j < c; ++j) {
            base[(a.i0 * s.w + bx.i0) * c + j] += w00 * go[j];
            base[(a.i0 * s.w + bx.i1) * c + j] += w01 * go[j];
            base[(a.i1 * s.w + bx.i0) * c + j] += w10 * go[j];
            base[(a.i1 * s.w + bx.i1) * c + j] += w11 * go[j];
          }
        }
  });
  return y;
}

}  // namespace canopy::nn
