#include "canopy/blocks.hpp"

#include "canopy/ops.hpp"

namespace canopy::models {

ConvBnAct make_conv_bn_act(nn::ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out,
                           nn::Rng& rng) {
  return {nn::make_conv(store, name + ".conv", 3, c_in, c_out, 1, 1, rng), nn::make_batch_norm(store, name + ".bn", c_out)};
}

Tensor conv_bn_act(const Tensor& x, ConvBnAct& p) { return nn::leaky_relu(nn::batch_norm(nn::conv2d(x, p.conv), p.bn)); }

SingleHead make_single_head(nn::ParamStore& store, const std::string& name, std::size_t c, nn::Rng& rng) {
  return {nn::make_conv(store, name + ".conv", 1, c, 1, 1, 0, rng)};
}

DualHead make_dual_head(nn::ParamStore& store, const std::string& name, std::size_t c, std::size_t k, nn::Rng& rng) {
  return {nn::make_conv(store, name + ".cls", 1, c, k, 1, 0, rng), nn::make_conv(store, name + ".reg", 1, c, k, 1, 0, rng),
          nn::make_conv(store, name + ".out", 1, k, 1, 1, 0, rng)};
}

Tensor squeeze_channel(const Tensor& x) {
  require(x.shape().back() == 1, ErrorCode::kShapeMismatch, "expected a single channel, got " + to_string(x.shape()));
  Shape s = x.shape();
  s.pop_back();
  return ops::reshape(x, std::move(s));
}

Tensor head_single(const Tensor& x, const SingleHead& p) { return squeeze_channel(nn::softplus(nn::conv2d(x, p.conv))); }

DualHeadOutput head_dual(const Tensor& x, const DualHead& p) {
  const std::size_t channel_axis = x.rank() - 1;
  DualHeadOutput out;
  out.probs = nn::softmax(nn::conv2d(x, p.cls), channel_axis);
  auto mixed = ops::mul(out.probs, nn::conv2d(x, p.reg));
  out.height = squeeze_channel(nn::softplus(nn::conv2d(mixed, p.out)));
  return out;
}

}  // namespace canopy::models
