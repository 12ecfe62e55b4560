#pragma once

#include <string>
#include <vector>

#include "canopy/nn.hpp"
#include "canopy/params.hpp"

// Building blocks shared by the U-Net family and Hy-TeC. All spatial tensors
// are channel-last, batched [N, H, W, C] or single [H, W, C].
namespace canopy::models {

/// Conv3x3 (padding 1) -> BatchNorm -> LeakyReLU.
struct ConvBnAct {
  nn::Conv2dParams conv;
  nn::BatchNormState bn;
};

ConvBnAct make_conv_bn_act(nn::ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out,
                           nn::Rng& rng);
Tensor conv_bn_act(const Tensor& x, ConvBnAct& p);

struct SingleHead {
  nn::Conv2dParams conv;  // 1x1, C -> 1
};

struct DualHead {
  nn::Conv2dParams cls;  // 1x1, C -> K, softmax branch
  nn::Conv2dParams reg;  // 1x1, C -> K
  nn::Conv2dParams out;  // 1x1, K -> 1
};

struct DualHeadOutput {
  Tensor probs;   // [..., H, W, K]
  Tensor height;  // [..., H, W]
};

SingleHead make_single_head(nn::ParamStore& store, const std::string& name, std::size_t c, nn::Rng& rng);
DualHead make_dual_head(nn::ParamStore& store, const std::string& name, std::size_t c, std::size_t k, nn::Rng& rng);

/// 1x1 conv to one channel then softplus; the channel axis is dropped.
Tensor head_single(const Tensor& x, const SingleHead& p);
/// softmax(A x) is the class map; softplus(out(softmax(A x) * (B x))) the height.
DualHeadOutput head_dual(const Tensor& x, const DualHead& p);

/// Drops a trailing unit channel.
Tensor squeeze_channel(const Tensor& x);

/// Collects pointers to BatchNorm states so a model can switch them together.
class NormRegistry {
 public:
  void track(nn::BatchNormState& s) { states_.push_back(&s); }
  void set_mode(nn::NormMode mode) {
    for (auto* s : states_) s->mode = mode;
  }

 private:
  std::vector<nn::BatchNormState*> states_;
};

}  // namespace canopy::models
