#include "canopy/hytec.hpp"

#include <cmath>

#include "canopy/ops.hpp"

namespace canopy::models {

std::array<std::size_t, 4> HyTecConfig::tap_blocks() const {
  std::array<std::size_t, 4> out{};
  for (std::size_t i = 0; i < 4; ++i)
    out[i] = taps.empty() ? std::max<std::size_t>(1, ((i + 1) * blocks + 3) / 4) : taps[i];
  return out;
}

void HyTecConfig::validate() const {
  require(patch >= 4 && patch % 4 == 0, ErrorCode::kInvalidArgument, "hytec patch must be a positive multiple of 4");
  require(image % patch == 0, ErrorCode::kInvalidArgument,
          "image side " + std::to_string(image) + " is not divisible by patch " + std::to_string(patch));
  require(grid() % 2 == 0, ErrorCode::kInvalidArgument, "hytec patch grid side must be even");
  require(heads > 0 && embed % heads == 0, ErrorCode::kInvalidArgument, "embed width must be divisible by heads");
  require(blocks >= 1 && mlp_ratio >= 1, ErrorCode::kInvalidArgument, "hytec needs >= 1 block and mlp ratio >= 1");
  require(l_hat >= 8 && l_hat % 8 == 0, ErrorCode::kInvalidArgument, "l_hat must be a positive multiple of 8");
  require(group1 > 0 && group2 > 0 && bins > 0, ErrorCode::kInvalidArgument, "hytec band groups and bins must be positive");
  require(taps.empty() || taps.size() == 4, ErrorCode::kInvalidArgument, "hytec needs exactly four taps");
  for (auto t : taps) require(t >= 1 && t <= blocks, ErrorCode::kInvalidArgument, "tap outside the encoder depth");
}

EncoderBlock make_encoder_block(nn::ParamStore& store, const std::string& name, std::size_t d, std::size_t heads,
                                std::size_t mlp_ratio, nn::Rng& rng) {
  EncoderBlock b;
  b.ln1 = nn::make_layer_norm(store, name + ".ln1", d);
  b.attn = nn::make_mhsa(store, name + ".attn", d, heads, rng);
  b.ln2 = nn::make_layer_norm(store, name + ".ln2", d);
  b.fc1 = nn::make_linear(store, name + ".fc1", d, mlp_ratio * d, rng);
  b.fc2 = nn::make_linear(store, name + ".fc2", mlp_ratio * d, d, rng);
  return b;
}

RbParams make_rb(nn::ParamStore& store, const std::string& name, std::size_t stage, std::size_t l, std::size_t l_hat,
                 nn::Rng& rng) {
  require(stage >= 1 && stage <= 4, ErrorCode::kInvalidArgument, "reprojection stage must be 1..4");
  RbParams p;
  p.stage = stage;
  p.reduce = nn::make_conv(store, name + ".reduce", 1, l, l_hat, 1, 0, rng);
  if (stage == 1) p.down = nn::make_conv(store, name + ".down", 2, l_hat, l_hat, 2, 0, rng);
  if (stage == 3) p.up = nn::make_conv_transpose(store, name + ".up", 2, l_hat, l_hat, 2, rng);
  if (stage == 4) p.up = nn::make_conv_transpose(store, name + ".up", 4, l_hat, l_hat, 4, rng);
  return p;
}

DbParams make_db(nn::ParamStore& store, const std::string& name, std::size_t c, std::size_t factor, nn::Rng& rng) {
  require(c % 8 == 0, ErrorCode::kInvalidArgument, "decoder block width must be divisible by 8");
  DbParams p;
  p.a = make_conv_bn_act(store, name + ".a", c, c, rng);
  p.b = make_conv_bn_act(store, name + ".b", c, c, rng);
  p.up = nn::make_conv_transpose(store, name + ".up", factor, c, c / 8, factor, rng);
  return p;
}

Tensor patch_embed(const Tensor& img, std::size_t patch, const nn::LinearParams& proj, const Tensor& pos) {
  require(img.rank() == 3, ErrorCode::kShapeMismatch, "patch_embed expects [H,W,B], got " + to_string(img.shape()));
  const std::size_t h = img.dim(0), w = img.dim(1), b = img.dim(2);
  require(patch > 0 && h % patch == 0 && w % patch == 0, ErrorCode::kShapeMismatch,
          "image " + to_string(img.shape()) + " is not divisible into " + std::to_string(patch) + "px patches");
  const std::size_t gh = h / patch, gw = w / patch;
  auto grid = ops::reshape(img, {gh, patch, gw, patch, b});
  auto rows = ops::reshape(ops::permute(grid, {0, 2, 1, 3, 4}), {gh * gw, patch * patch * b});
  auto tokens = nn::linear(rows, proj);
  require(pos.shape() == tokens.shape(), ErrorCode::kShapeMismatch,
          "positional table " + to_string(pos.shape()) + " does not match tokens " + to_string(tokens.shape()));
  return ops::add(tokens, pos);
}

Tensor encoder_block_forward(const Tensor& tokens, const EncoderBlock& b) {
  auto t = ops::add(tokens, nn::mhsa(nn::layer_norm(tokens, b.ln1), b.attn));
  auto mlp = nn::linear(nn::gelu(nn::linear(nn::layer_norm(t, b.ln2), b.fc1)), b.fc2);
  return ops::add(t, mlp);
}

std::vector<Tensor> encoder_forward(const Tensor& tokens, const std::vector<EncoderBlock>& blocks) {
  std::vector<Tensor> outs;
  Tensor t = tokens;
  for (const auto& b : blocks) {
    t = encoder_block_forward(t, b);
    require(t.shape() == tokens.shape(), ErrorCode::kInternal, "encoder block changed the token matrix shape");
    outs.push_back(t);
  }
  return outs;
}

Tensor spatial_concat(const Tensor& tokens, std::size_t n) {
  require(tokens.rank() == 2 && n <= tokens.dim(0), ErrorCode::kShapeMismatch,
          "spatial_concat: need " + std::to_string(n) + " rows from " + to_string(tokens.shape()));
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  require(g * g == n, ErrorCode::kShapeMismatch, "spatial_concat: " + std::to_string(n) + " is not a perfect square");
  auto rows = n == tokens.dim(0) ? tokens : ops::slice(tokens, 0, 0, n);
  return ops::reshape(rows, {g, g, tokens.dim(1)});
}

Tensor rb_forward(const Tensor& f, const RbParams& p) {
  require(f.rank() == 3 || f.rank() == 4, ErrorCode::kShapeMismatch, "rb expects a spatial tensor");
  const std::size_t ax = f.rank() == 4 ? 1 : 0;
  const std::size_t g = f.dim(ax);
  auto y = nn::conv2d(f, p.reduce);
  std::size_t expect = g;
  switch (p.stage) {
    case 1:
      require(g % 2 == 0, ErrorCode::kShapeMismatch, "rb stage 1 needs an even grid");
      y = nn::conv2d(y, p.down);
      expect = g / 2;
      break;
    case 2:
      break;
    case 3:
      y = nn::conv2d_transpose(y, p.up);
      expect = 2 * g;
      break;
    case 4:
      y = nn::conv2d_transpose(y, p.up);
      expect = 4 * g;
      break;
    default:
      fail(ErrorCode::kInvalidArgument, "invalid reprojection stage " + std::to_string(p.stage));
  }
  require(y.dim(ax) == expect && y.dim(ax + 1) == expect, ErrorCode::kInternal,
          "rb stage " + std::to_string(p.stage) + " shape law violated: " + to_string(y.shape()));
  return y;
}

Tensor db_forward(const Tensor& f, DbParams& p) {
  require(f.rank() == 3 || f.rank() == 4, ErrorCode::kShapeMismatch, "db expects a spatial tensor");
  const std::size_t ax = f.rank() == 4 ? 1 : 0;
  const std::size_t c = f.shape().back();
  require(c % 8 == 0, ErrorCode::kShapeMismatch, "db input channels must be divisible by 8");
  auto y = nn::conv2d_transpose(conv_bn_act(conv_bn_act(f, p.a), p.b), p.up);
  const std::size_t factor = p.up.stride;
  require(y.dim(ax) == factor * f.dim(ax) && y.dim(ax + 1) == factor * f.dim(ax + 1) && y.shape().back() == c / 8,
          ErrorCode::kInternal, "db shape law violated: " + to_string(f.shape()) + " -> " + to_string(y.shape()));
  return y;
}

HyTec::HyTec(const HyTecConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  nn::Rng rng(seed);
  const std::size_t p = cfg_.patch, d = cfg_.embed, n = cfg_.tokens_per_group();
  proj1_ = nn::make_linear(store_, "embed.proj1", p * p * cfg_.group1, d, rng);
  proj2_ = nn::make_linear(store_, "embed.proj2", p * p * cfg_.group2, d, rng);
  pos_ = store_.add_param("embed.pos", nn::normal({2 * n, d}, 0.02, rng));
  for (std::size_t i = 0; i < cfg_.blocks; ++i)
    blocks_.push_back(make_encoder_block(store_, "block" + std::to_string(i + 1), d, cfg_.heads, cfg_.mlp_ratio, rng));
  for (std::size_t i = 0; i < 4; ++i) rb_[i] = make_rb(store_, "rb" + std::to_string(i + 1), i + 1, d, cfg_.l_hat, rng);
  for (std::size_t i = 0; i < 3; ++i) {
    fuse_[i] = nn::make_conv_transpose(store_, "fuse" + std::to_string(i + 1), 2, cfg_.l_hat, cfg_.l_hat, 2, rng);
    aux_heads_[i] = make_single_head(store_, "aux" + std::to_string(i + 1), cfg_.l_hat, rng);
  }
  db_ = make_db(store_, "db", cfg_.l_hat, p / 4, rng);
  norms_.track(db_.a.bn);
  norms_.track(db_.b.bn);
  head_ = make_dual_head(store_, "head", cfg_.l_hat / 8, cfg_.bins, rng);
}

Tensor HyTec::embed(const Tensor& sample) const {
  require(sample.rank() == 3 && sample.dim(0) == cfg_.image && sample.dim(1) == cfg_.image &&
              sample.dim(2) == cfg_.group1 + cfg_.group2,
          ErrorCode::kShapeMismatch, "hytec sample must be [W,W,bands], got " + to_string(sample.shape()));
  const std::size_t n = cfg_.tokens_per_group();
  auto t1 = patch_embed(ops::slice(sample, 2, 0, cfg_.group1), cfg_.patch, proj1_, ops::slice(pos_, 0, 0, n));
  auto t2 = patch_embed(ops::slice(sample, 2, cfg_.group1, cfg_.group1 + cfg_.group2), cfg_.patch, proj2_,
                        ops::slice(pos_, 0, n, 2 * n));
  return ops::concat({t1, t2}, 0);
}

HyTecOutput HyTec::forward(const Tensor& s2) {
  require(s2.rank() == 4, ErrorCode::kShapeMismatch, "hytec expects [N,W,W,bands], got " + to_string(s2.shape()));
  const std::size_t batch = s2.dim(0), n = cfg_.tokens_per_group(), g = cfg_.grid();
  const auto taps = cfg_.tap_blocks();

  std::array<std::vector<Tensor>, 4> grids;
  for (std::size_t s = 0; s < batch; ++s) {
    auto sample = ops::reshape(batch == 1 ? s2 : ops::slice(s2, 0, s, s + 1), {cfg_.image, cfg_.image, s2.dim(3)});
    auto outs = encoder_forward(embed(sample), blocks_);
    for (std::size_t i = 0; i < 4; ++i)
      grids[i].push_back(ops::reshape(spatial_concat(outs[taps[i] - 1], n), {1, g, g, cfg_.embed}));
  }
  std::array<Tensor, 4> f;
  for (std::size_t i = 0; i < 4; ++i) {
    auto stacked = batch == 1 ? grids[i].front() : ops::concat(grids[i], 0);
    auto r = rb_forward(stacked, rb_[i]);
    f[i] = i == 0 ? r : ops::add(r, nn::conv2d_transpose(f[i - 1], fuse_[i - 1]));
  }
  HyTecOutput out;
  for (std::size_t i = 0; i < 3; ++i) out.aux[i] = head_single(f[i + 1], aux_heads_[i]);
  out.main = head_dual(db_forward(f[3], db_), head_);
  require(out.main.height.dim(1) == cfg_.image && out.main.height.dim(2) == cfg_.image, ErrorCode::kInternal,
          "hytec main output extent differs from the input");
  return out;
}

}  // namespace canopy::models
