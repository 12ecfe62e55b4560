#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "canopy/blocks.hpp"

namespace canopy::models {

enum class Arch { k2mou, k2mdu, kA2mdu, kTeacherS1, kTeacherS2, kHytec };

Arch parse_arch(std::string_view name);
std::string_view arch_name(Arch arch);
bool is_unet(Arch arch);
bool has_dual_encoder(Arch arch);
bool has_dual_head(Arch arch);

/// Encoder block: two ConvBnAct stages C -> 2C -> 2C, then a strided 2x2 conv.
struct CebParams {
  ConvBnAct a, b;
  nn::Conv2dParams down;
};

/// Decoder block: ConvT 2x2/2 C -> C/2, concat with the skip, two ConvBnAct
/// stages C -> C/2 -> C/2.
struct CdbParams {
  nn::ConvT2dParams up;
  ConvBnAct a, b;
};

/// Residual single-head self-attention over flattened positions.
struct SaaParams {
  nn::MhsaParams attn;
};

CebParams make_ceb(nn::ParamStore& store, const std::string& name, std::size_t c, nn::Rng& rng);
CdbParams make_cdb(nn::ParamStore& store, const std::string& name, std::size_t c, nn::Rng& rng);
SaaParams make_saa(nn::ParamStore& store, const std::string& name, std::size_t c, nn::Rng& rng);

/// [W, H, C] -> [W/2, H/2, 2C]. `inner` receives the pre-downsampling features [W, H, 2C].
Tensor ceb_forward(const Tensor& x, CebParams& p, Tensor* inner = nullptr);
/// [W, H, C] with skip [2W, 2H, C/2] -> [2W, 2H, C/2].
Tensor cdb_forward(const Tensor& x, const Tensor& skip, CdbParams& p);
/// Channel concat of e1 and the optional e2 followed by x + attention(x).
Tensor saa_forward(const Tensor& e1, const Tensor* e2, const SaaParams& p);

struct UNetConfig {
  Arch arch = Arch::k2mdu;
  std::size_t s2_channels = 10;
  std::size_t s1_channels = 2;
  std::size_t stem_width = 16;
  std::size_t bins = 10;
};

struct ModelOutput {
  Tensor height;  // [N, H, W]
  Tensor probs;   // [N, H, W, K]; undefined for single-head models
};

/// 2MOU / 2MDU / alpha-2MDU and the single-modality teachers. Inputs are
/// batched [N, H, W, C] with H and W divisible by 16.
class UNet {
 public:
  UNet(const UNetConfig& cfg, std::uint64_t seed);
  UNet(const UNet&) = delete;
  UNet& operator=(const UNet&) = delete;

  /// `s1` is ignored by teacher_s2; `s2` is ignored by teacher_s1.
  ModelOutput forward(const Tensor& s2, const Tensor& s1);

  void set_mode(nn::NormMode mode) { norms_.set_mode(mode); }
  nn::ParamStore& store() { return store_; }
  const UNetConfig& config() const { return cfg_; }

 private:
  struct Encoder {
    ConvBnAct stem;
    std::array<CebParams, 4> ceb;
  };
  struct Encoded {
    Tensor bottleneck;
    std::array<Tensor, 4> skips;  // deepest first
  };

  Encoder make_encoder(const std::string& name, std::size_t c_in, nn::Rng& rng);
  Encoded encode(const Tensor& x, Encoder& enc, bool inner_skips);
  void track(Encoder& enc);

  UNetConfig cfg_;
  nn::ParamStore store_;
  NormRegistry norms_;
  Encoder primary_, secondary_;
  SaaParams saa_;
  std::array<CdbParams, 4> cdb_;
  SingleHead single_;
  DualHead dual_;
};

}  // namespace canopy::models
