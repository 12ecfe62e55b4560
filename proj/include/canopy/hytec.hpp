#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "canopy/blocks.hpp"

namespace canopy::models {

/// Hybrid ViT encoder / conv decoder. Input bands are ordered
/// B, G, R, NIR, RE1..RE4, SWIR1, SWIR2; group 1 is the first four, group 2
/// the remaining six.
struct HyTecConfig {
  std::size_t image = 256;  // W = H
  std::size_t patch = 16;
  std::size_t embed = 1536;
  std::size_t blocks = 12;
  std::size_t heads = 12;
  std::size_t mlp_ratio = 4;
  std::size_t l_hat = 256;
  std::size_t bins = 10;
  std::size_t group1 = 4;
  std::size_t group2 = 6;
  /// 1-based encoder blocks feeding RB1..RB4; empty selects ceil(i * T / 4).
  std::vector<std::size_t> taps;

  std::size_t grid() const { return image / patch; }
  std::size_t tokens_per_group() const { return grid() * grid(); }
  std::array<std::size_t, 4> tap_blocks() const;
  void validate() const;
};

struct EncoderBlock {
  nn::LayerNormParams ln1, ln2;
  nn::MhsaParams attn;
  nn::LinearParams fc1, fc2;
};

/// Stage 1 halves (strided 2x2 conv), 2 keeps, 3 doubles and 4 quadruples
/// (transpose convs) after a 1x1 conv L -> L_hat.
struct RbParams {
  std::size_t stage = 1;
  nn::Conv2dParams reduce;
  nn::Conv2dParams down;
  nn::ConvT2dParams up;
};

/// Two ConvBnAct stages then ConvT k = s = factor to C/8 channels.
struct DbParams {
  ConvBnAct a, b;
  nn::ConvT2dParams up;
};

EncoderBlock make_encoder_block(nn::ParamStore& store, const std::string& name, std::size_t d, std::size_t heads,
                                std::size_t mlp_ratio, nn::Rng& rng);
RbParams make_rb(nn::ParamStore& store, const std::string& name, std::size_t stage, std::size_t l, std::size_t l_hat,
                 nn::Rng& rng);
DbParams make_db(nn::ParamStore& store, const std::string& name, std::size_t c, std::size_t factor, nn::Rng& rng);

/// Non-overlapping P x P patches of an [H, W, B] image, flattened row-major
/// (dy, dx, band), projected to D and offset by `pos` [N, D]. Rows follow the
/// patch grid row-major.
Tensor patch_embed(const Tensor& img, std::size_t patch, const nn::LinearParams& proj, const Tensor& pos);

/// LayerNorm -> MHSA -> residual; LayerNorm -> MLP (GELU) -> residual.
Tensor encoder_block_forward(const Tensor& tokens, const EncoderBlock& b);
/// Every block output, in order.
std::vector<Tensor> encoder_forward(const Tensor& tokens, const std::vector<EncoderBlock>& blocks);

/// First n rows of `tokens` reshaped onto a sqrt(n) x sqrt(n) grid [G, G, D].
Tensor spatial_concat(const Tensor& tokens, std::size_t n);

Tensor rb_forward(const Tensor& f, const RbParams& p);
Tensor db_forward(const Tensor& f, DbParams& p);

struct HyTecOutput {
  DualHeadOutput main;         // [N, W, W, K] and [N, W, W]
  std::array<Tensor, 3> aux;   // [N, W/16, W/16], [N, W/8, W/8], [N, W/4, W/4] for P = 16
};

class HyTec {
 public:
  HyTec(const HyTecConfig& cfg, std::uint64_t seed);
  HyTec(const HyTec&) = delete;
  HyTec& operator=(const HyTec&) = delete;

  /// s2: [N, W, W, group1 + group2].
  HyTecOutput forward(const Tensor& s2);
  /// 2N x D token matrix of one sample [W, W, bands], before the encoder.
  Tensor embed(const Tensor& sample) const;

  void set_mode(nn::NormMode mode) { norms_.set_mode(mode); }
  nn::ParamStore& store() { return store_; }
  const HyTecConfig& config() const { return cfg_; }
  Tensor positional() const { return pos_; }
  const std::vector<EncoderBlock>& blocks() const { return blocks_; }

 private:
  HyTecConfig cfg_;
  nn::ParamStore store_;
  NormRegistry norms_;
  nn::LinearParams proj1_, proj2_;
  Tensor pos_;
  std::vector<EncoderBlock> blocks_;
  std::array<RbParams, 4> rb_;
  std::array<nn::ConvT2dParams, 3> fuse_;
  std::array<SingleHead, 3> aux_heads_;
  DbParams db_;
  DualHead head_;
};

}  // namespace canopy::models
