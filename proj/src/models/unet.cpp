#include "canopy/unet.hpp"

#include "canopy/ops.hpp"

namespace canopy::models {

namespace {

struct ArchName {
  Arch arch;
  std::string_view name;
};

constexpr std::array<ArchName, 6> kArchNames = {{{Arch::k2mou, "2mou"},
                                                 {Arch::k2mdu, "2mdu"},
                                                 {Arch::kA2mdu, "a2mdu"},
                                                 {Arch::kTeacherS1, "teacher_s1"},
                                                 {Arch::kTeacherS2, "teacher_s2"},
                                                 {Arch::kHytec, "hytec"}}};

std::size_t spatial_axis(const Tensor& x) { return x.rank() == 4 ? 1 : 0; }

void require_spatial(const Tensor& x, const char* who) {
  require(x.rank() == 3 || x.rank() == 4, ErrorCode::kShapeMismatch,
          std::string(who) + ": expected [N,H,W,C] or [H,W,C], got " + to_string(x.shape()));
}

}  // namespace

Arch parse_arch(std::string_view name) {
  for (const auto& a : kArchNames)
    if (a.name == name) return a.arch;
  fail(ErrorCode::kInvalidArgument, "unknown arch '" + std::string(name) + "'");
}

std::string_view arch_name(Arch arch) {
  for (const auto& a : kArchNames)
    if (a.arch == arch) return a.name;
  fail(ErrorCode::kInternal, "unnamed arch");
}

bool is_unet(Arch arch) { return arch != Arch::kHytec; }
bool has_dual_encoder(Arch arch) { return arch == Arch::k2mou || arch == Arch::k2mdu || arch == Arch::kA2mdu; }
bool has_dual_head(Arch arch) { return arch == Arch::k2mdu || arch == Arch::kA2mdu; }

CebParams make_ceb(nn::ParamStore& store, const std::string& name, std::size_t c, nn::Rng& rng) {
  CebParams p;
  p.a = make_conv_bn_act(store, name + ".a", c, 2 * c, rng);
  p.b = make_conv_bn_act(store, name + ".b", 2 * c, 2 * c, rng);
  p.down = nn::make_conv(store, name + ".down", 2, 2 * c, 2 * c, 2, 0, rng);
  return p;
}

CdbParams make_cdb(nn::ParamStore& store, const std::string& name, std::size_t c, nn::Rng& rng) {
  require(c % 2 == 0, ErrorCode::kInvalidArgument, "decoder block width must be even");
  CdbParams p;
  p.up = nn::make_conv_transpose(store, name + ".up", 2, c, c / 2, 2, rng);
  p.a = make_conv_bn_act(store, name + ".a", c, c / 2, rng);
  p.b = make_conv_bn_act(store, name + ".b", c / 2, c / 2, rng);
  return p;
}

SaaParams make_saa(nn::ParamStore& store, const std::string& name, std::size_t c, nn::Rng& rng) {
  return {nn::make_mhsa(store, name + ".attn", c, 1, rng)};
}

Tensor ceb_forward(const Tensor& x, CebParams& p, Tensor* inner) {
  require_spatial(x, "ceb");
  const std::size_t ax = spatial_axis(x);
  const std::size_t h = x.dim(ax), w = x.dim(ax + 1), c = x.shape().back();
  require(h % 2 == 0 && w % 2 == 0, ErrorCode::kShapeMismatch, "ceb: odd spatial extent " + to_string(x.shape()));
  auto f = conv_bn_act(conv_bn_act(x, p.a), p.b);
  if (inner) *inner = f;
  auto y = nn::conv2d(f, p.down);
  require(y.dim(ax) == h / 2 && y.dim(ax + 1) == w / 2 && y.shape().back() == 2 * c, ErrorCode::kInternal,
          "ceb: shape law violated, " + to_string(x.shape()) + " -> " + to_string(y.shape()));
  return y;
}

Tensor cdb_forward(const Tensor& x, const Tensor& skip, CdbParams& p) {
  require_spatial(x, "cdb");
  const std::size_t ax = spatial_axis(x);
  const std::size_t h = x.dim(ax), w = x.dim(ax + 1), c = x.shape().back();
  Shape expect = x.shape();
  expect[ax] = 2 * h;
  expect[ax + 1] = 2 * w;
  expect.back() = c / 2;
  require(c % 2 == 0 && skip.shape() == expect, ErrorCode::kShapeMismatch,
          "cdb: skip " + to_string(skip.shape()) + " does not match " + to_string(expect));
  auto up = nn::conv2d_transpose(x, p.up);
  auto y = conv_bn_act(conv_bn_act(ops::concat({up, skip}, x.rank() - 1), p.a), p.b);
  require(y.shape() == expect, ErrorCode::kInternal, "cdb: shape law violated, got " + to_string(y.shape()));
  return y;
}

Tensor saa_forward(const Tensor& e1, const Tensor* e2, const SaaParams& p) {
  require_spatial(e1, "saa");
  Tensor x = e1;
  if (e2) {
    Shape a = e1.shape(), b = e2->shape();
    a.pop_back();
    b.pop_back();
    require(a == b, ErrorCode::kShapeMismatch,
            "saa: spatial mismatch " + to_string(e1.shape()) + " vs " + to_string(e2->shape()));
    x = ops::concat({e1, *e2}, e1.rank() - 1);
  }
  const bool batched = x.rank() == 4;
  const std::size_t n = batched ? x.dim(0) : 1;
  const std::size_t c = x.shape().back();
  const std::size_t positions = x.numel() / (n * c);
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < n; ++i) {
    auto sample = batched ? ops::slice(x, 0, i, i + 1) : x;
    auto attended = nn::mhsa(ops::reshape(sample, {positions, c}), p.attn);
    parts.push_back(ops::reshape(attended, sample.shape()));
  }
  auto attn = n == 1 ? parts.front() : ops::concat(parts, 0);
  return ops::add(x, attn);
}

UNet::UNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  require(is_unet(cfg.arch), ErrorCode::kInvalidArgument, "UNet cannot build arch " + std::string(arch_name(cfg.arch)));
  require(cfg.stem_width > 0 && cfg.bins > 0, ErrorCode::kInvalidArgument, "UNet widths must be positive");
  nn::Rng rng(seed);
  const std::size_t f = cfg.stem_width;
  const bool dual = has_dual_encoder(cfg.arch);
  const std::size_t primary_in = cfg.arch == Arch::kTeacherS1 ? cfg.s1_channels : cfg.s2_channels;
  primary_ = make_encoder(dual ? "s2" : "enc", primary_in, rng);
  track(primary_);
  if (dual) {
    secondary_ = make_encoder("s1", cfg.s1_channels, rng);
    track(secondary_);
  }
  const std::size_t bottleneck = dual ? 32 * f : 16 * f;
  saa_ = make_saa(store_, "saa", bottleneck, rng);
  std::size_t c = bottleneck;
  for (std::size_t i = 0; i < 4; ++i) {
    cdb_[i] = make_cdb(store_, "cdb" + std::to_string(i + 1), c, rng);
    norms_.track(cdb_[i].a.bn);
    norms_.track(cdb_[i].b.bn);
    c /= 2;
  }
  if (has_dual_head(cfg.arch))
    dual_ = make_dual_head(store_, "head", c, cfg.bins, rng);
  else
    single_ = make_single_head(store_, "head", c, rng);
}

UNet::Encoder UNet::make_encoder(const std::string& name, std::size_t c_in, nn::Rng& rng) {
  Encoder e;
  e.stem = make_conv_bn_act(store_, name + ".stem", c_in, cfg_.stem_width, rng);
  std::size_t c = cfg_.stem_width;
  for (std::size_t i = 0; i < 4; ++i) {
    e.ceb[i] = make_ceb(store_, name + ".ceb" + std::to_string(i + 1), c, rng);
    c *= 2;
  }
  return e;
}

void UNet::track(Encoder& enc) {
  norms_.track(enc.stem.bn);
  for (auto& b : enc.ceb) {
    norms_.track(b.a.bn);
    norms_.track(b.b.bn);
  }
}

UNet::Encoded UNet::encode(const Tensor& x, Encoder& enc, bool inner_skips) {
  Encoded out;
  auto f = conv_bn_act(x, enc.stem);
  std::array<Tensor, 4> inner, outs;
  Tensor prev = f;
  for (std::size_t i = 0; i < 4; ++i) {
    outs[i] = ceb_forward(prev, enc.ceb[i], &inner[i]);
    prev = outs[i];
  }
  out.bottleneck = outs[3];
  if (inner_skips)
    out.skips = {inner[3], inner[2], inner[1], inner[0]};
  else
    out.skips = {outs[2], outs[1], outs[0], f};
  return out;
}

ModelOutput UNet::forward(const Tensor& s2, const Tensor& s1) {
  const bool dual = has_dual_encoder(cfg_.arch);
  const Tensor& primary = cfg_.arch == Arch::kTeacherS1 ? s1 : s2;
  require(primary.defined() && primary.rank() == 4, ErrorCode::kShapeMismatch, "unet expects a batched [N,H,W,C] input");
  const std::size_t h = primary.dim(1), w = primary.dim(2);
  require(h % 16 == 0 && w % 16 == 0, ErrorCode::kShapeMismatch,
          "unet input extents must be divisible by 16, got " + to_string(primary.shape()));

  Encoded a = encode(primary, primary_, dual);
  Tensor fused;
  if (dual) {
    require(s1.defined() && s1.rank() == 4 && s1.dim(0) == primary.dim(0) && s1.dim(1) == h && s1.dim(2) == w,
            ErrorCode::kShapeMismatch, "S1 input must match the S2 batch and extents");
    Encoded b = encode(s1, secondary_, true);
    fused = saa_forward(a.bottleneck, &b.bottleneck, saa_);
  } else {
    fused = saa_forward(a.bottleneck, nullptr, saa_);
  }
  Tensor d = fused;
  for (std::size_t i = 0; i < 4; ++i) d = cdb_forward(d, a.skips[i], cdb_[i]);

  ModelOutput out;
  if (has_dual_head(cfg_.arch)) {
    auto o = head_dual(d, dual_);
    out.height = o.height;
    out.probs = o.probs;
  } else {
    out.height = head_single(d, single_);
  }
  return out;
}

}  // namespace canopy::models
