#pragma once

#include <cstddef>
#include <vector>

#include "canopy/tensor.hpp"

// Neural building blocks. Spatial tensors are channel-last: [N, H, W, C]
// (batched) or [H, W, C] (single tile); both are accepted by every spatial op
// and the result keeps the caller's rank.
namespace canopy::nn {

inline constexpr double kLeakySlope = 0.01;

struct Conv2dParams {
  Tensor kernel;  // [k, k, C_in, C_out]
  Tensor bias;    // [C_out]
  std::size_t stride = 1;
  std::size_t padding = 0;
};

struct ConvT2dParams {
  Tensor kernel;  // [k, k, C_out, C_in]
  Tensor bias;    // [C_out]
  std::size_t stride = 2;
};

enum class NormMode { kTrain, kEval };

struct BatchNormState {
  Tensor gamma, beta;                  // learnable, [C]
  Tensor running_mean, running_var;    // buffers, [C]
  double momentum = 0.1;
  double eps = 1e-5;
  NormMode mode = NormMode::kTrain;
};

struct LinearParams {
  Tensor weight;  // [D_in, D_out]
  Tensor bias;    // [D_out]
};

struct LayerNormParams {
  Tensor gamma, beta;  // [D]
  double eps = 1e-6;
};

struct MhsaParams {
  std::size_t heads = 1;
  LinearParams q, k, v, out;  // all [D, D]
};

std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t padding);

/// Cross-correlation plus bias.
Tensor conv2d(const Tensor& x, const Conv2dParams& p);
/// Adjoint of the matching strided conv2d (zero padding); output extent
/// (in - 1) * stride + k, i.e. stride * in for k == stride.
Tensor conv2d_transpose(const Tensor& x, const ConvT2dParams& p);
/// Train mode normalizes by the batch statistics over every non-channel axis
/// and updates the running statistics; eval mode uses the running statistics.
Tensor batch_norm(const Tensor& x, BatchNormState& s);
Tensor leaky_relu(const Tensor& x, double slope = kLeakySlope);
Tensor softplus(const Tensor& x);
Tensor gelu(const Tensor& x);
/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);
/// Per-token normalization over the trailing axis with an affine rescale.
Tensor layer_norm(const Tensor& x, const LayerNormParams& p);
/// x[..., D_in] . W + b
Tensor linear(const Tensor& x, const LinearParams& p);

/// Scaled dot-product self-attention over tokens [N, D], heads concatenated
/// and passed through the output projection. When `weights` is non-null it
/// receives one [N, N] attention matrix per head.
Tensor mhsa(const Tensor& tokens, const MhsaParams& p, std::vector<Tensor>* weights = nullptr);

/// Bilinear resampling with half-pixel centers (align-corners false).
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

}  // namespace canopy::nn
