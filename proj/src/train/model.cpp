#include <charconv>
#include <cmath>
#include <sstream>

#include "canopy/ops.hpp"
#include "canopy/train.hpp"

namespace canopy::train {
namespace {

std::string fmt(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

const std::string& need(const nn::Metadata& meta, const std::string& key) {
  const auto it = meta.find(key);
  require(it != meta.end(), ErrorCode::kState, "checkpoint metadata lacks '" + key + "'");
  return it->second;
}

template <typename T>
T num(const nn::Metadata& meta, const std::string& key) {
  const std::string& s = need(meta, key);
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(ec == std::errc{} && p == s.data() + s.size(), ErrorCode::kParse,
          "checkpoint metadata '" + key + "' is not a number: " + s);
  return v;
}

std::vector<double> split_list(const nn::Metadata& meta, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(need(meta, key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    double v{};
    auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    require(ec == std::errc{} && p == item.data() + item.size(), ErrorCode::kParse, "bad list in '" + key + "'");
    out.push_back(v);
  }
  return out;
}

void band_stats(const std::vector<const data::SynthTile*>& tiles, Tensor data::SynthTile::*band,
                std::vector<double>& mean, std::vector<double>& sd) {
  require(!tiles.empty(), ErrorCode::kInvalidArgument, "input normalization needs at least one tile");
  const std::size_t c = ((*tiles.front()).*band).dim(2);
  std::vector<double> s(c, 0.0), s2(c, 0.0);
  std::size_t n = 0;
  for (const auto* t : tiles) {
    const auto d = (t->*band).data();
    for (std::size_t i = 0; i < d.size(); ++i) s[i % c] += d[i];
    n += d.size() / c;
  }
  mean.assign(c, 0.0);
  sd.assign(c, 1.0);
  for (std::size_t k = 0; k < c; ++k) mean[k] = s[k] / static_cast<double>(n);
  for (const auto* t : tiles) {
    const auto d = (t->*band).data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double r = d[i] - mean[i % c];
      s2[i % c] += r * r;
    }
  }
  for (std::size_t k = 0; k < c; ++k) {
    const double v = std::sqrt(s2[k] / static_cast<double>(n));
    sd[k] = v > 1e-12 ? v : 1.0;
  }
}

Tensor standardize(const Tensor& x, const std::vector<double>& mean, const std::vector<double>& sd) {
  const std::size_t c = mean.size();
  require(x.rank() >= 1 && x.shape().back() == c, ErrorCode::kShapeMismatch,
          "expected " + std::to_string(c) + " bands, got " + to_string(x.shape()));
  std::vector<double> out(x.numel());
  const auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (d[i] - mean[i % c]) / sd[i % c];
  return Tensor::from_data(x.shape(), std::move(out));
}

Tensor add_batch_axis(const Tensor& t) {
  Shape s = t.shape();
  s.insert(s.begin(), 1);
  return Tensor::from_data(std::move(s), std::vector<double>(t.data().begin(), t.data().end()));
}

}  // namespace

// ---- InputNorm -----------------------------------------------------------

InputNorm InputNorm::fit(const std::vector<const data::SynthTile*>& tiles) {
  InputNorm n;
  band_stats(tiles, &data::SynthTile::s2, n.s2_mean, n.s2_std);
  band_stats(tiles, &data::SynthTile::s1, n.s1_mean, n.s1_std);
  return n;
}

Tensor InputNorm::apply_s2(const Tensor& s2) const { return standardize(s2, s2_mean, s2_std); }
Tensor InputNorm::apply_s1(const Tensor& s1) const { return standardize(s1, s1_mean, s1_std); }

void InputNorm::to_metadata(nn::Metadata& meta) const {
  meta["norm.s2_mean"] = join(s2_mean);
  meta["norm.s2_std"] = join(s2_std);
  meta["norm.s1_mean"] = join(s1_mean);
  meta["norm.s1_std"] = join(s1_std);
}

InputNorm InputNorm::from_metadata(const nn::Metadata& meta) {
  InputNorm n{split_list(meta, "norm.s2_mean"), split_list(meta, "norm.s2_std"), split_list(meta, "norm.s1_mean"),
              split_list(meta, "norm.s1_std")};
  require(n.s2_mean.size() == data::kS2Bands && n.s2_std.size() == data::kS2Bands &&
              n.s1_mean.size() == data::kS1Bands && n.s1_std.size() == data::kS1Bands,
          ErrorCode::kState, "checkpoint normalization has the wrong band count");
  return n;
}

// ---- ModelSpec -----------------------------------------------------------

ModelSpec ModelSpec::from_config(const config::RunConfig& cfg) {
  ModelSpec s;
  s.arch = models::parse_arch(cfg.arch);
  s.stem_width = cfg.stem_width;
  s.bins = cfg.bins;
  s.bin_width = cfg.bin_width;
  s.bin_overlap = cfg.bin_overlap;
  s.hytec.image = cfg.patch;
  s.hytec.patch = cfg.vit_patch;
  s.hytec.embed = cfg.embed;
  s.hytec.blocks = cfg.blocks;
  s.hytec.heads = cfg.heads;
  s.hytec.mlp_ratio = cfg.mlp_ratio;
  s.hytec.l_hat = cfg.l_hat;
  s.hytec.bins = cfg.bins;
  return s;
}

losses::HeightBinning ModelSpec::binning() const {
  losses::HeightBinning b;
  for (std::size_t j = 0; j <= bins; ++j) b.base_edges.push_back(bin_width * static_cast<double>(j));
  b.overlap = bin_overlap;
  b.validate();
  return b;
}

void ModelSpec::to_metadata(nn::Metadata& meta) const {
  meta["arch"] = std::string(models::arch_name(arch));
  meta["stem_width"] = std::to_string(stem_width);
  meta["bins"] = std::to_string(bins);
  meta["bin_width"] = fmt(bin_width);
  meta["bin_overlap"] = fmt(bin_overlap);
  if (arch == models::Arch::kHytec) {
    meta["hytec.image"] = std::to_string(hytec.image);
    meta["hytec.patch"] = std::to_string(hytec.patch);
    meta["hytec.embed"] = std::to_string(hytec.embed);
    meta["hytec.blocks"] = std::to_string(hytec.blocks);
    meta["hytec.heads"] = std::to_string(hytec.heads);
    meta["hytec.mlp_ratio"] = std::to_string(hytec.mlp_ratio);
    meta["hytec.l_hat"] = std::to_string(hytec.l_hat);
  }
}

ModelSpec ModelSpec::from_metadata(const nn::Metadata& meta) {
  ModelSpec s;
  s.arch = models::parse_arch(need(meta, "arch"));
  s.stem_width = num<std::size_t>(meta, "stem_width");
  s.bins = num<std::size_t>(meta, "bins");
  s.bin_width = num<double>(meta, "bin_width");
  s.bin_overlap = num<double>(meta, "bin_overlap");
  s.hytec.bins = s.bins;
  if (s.arch == models::Arch::kHytec) {
    s.hytec.image = num<std::size_t>(meta, "hytec.image");
    s.hytec.patch = num<std::size_t>(meta, "hytec.patch");
    s.hytec.embed = num<std::size_t>(meta, "hytec.embed");
    s.hytec.blocks = num<std::size_t>(meta, "hytec.blocks");
    s.hytec.heads = num<std::size_t>(meta, "hytec.heads");
    s.hytec.mlp_ratio = num<std::size_t>(meta, "hytec.mlp_ratio");
    s.hytec.l_hat = num<std::size_t>(meta, "hytec.l_hat");
  }
  return s;
}

// ---- batches -------------------------------------------------------------

Batch stack_patches(const std::vector<data::Patch>& patches) {
  require(!patches.empty(), ErrorCode::kInvalidArgument, "empty batch");
  auto stack = [&](Tensor data::Patch::*field) {
    const Shape& one = (patches.front().*field).shape();
    Shape shape = one;
    shape.insert(shape.begin(), patches.size());
    std::vector<double> v;
    v.reserve(numel(shape));
    for (const auto& p : patches) {
      require((p.*field).shape() == one, ErrorCode::kShapeMismatch, "batch patches differ in shape");
      v.insert(v.end(), (p.*field).data().begin(), (p.*field).data().end());
    }
    return Tensor::from_data(std::move(shape), std::move(v));
  };
  return {stack(&data::Patch::s2), stack(&data::Patch::s1), stack(&data::Patch::target), stack(&data::Patch::mask)};
}

// ---- Model ---------------------------------------------------------------

Model::Model(const ModelSpec& spec, InputNorm norm, std::uint64_t seed) : spec_(spec), norm_(std::move(norm)) {
  if (models::is_unet(spec_.arch)) {
    unet_ = std::make_unique<models::UNet>(
        models::UNetConfig{spec_.arch, data::kS2Bands, data::kS1Bands, spec_.stem_width, spec_.bins}, seed);
  } else {
    spec_.hytec.bins = spec_.bins;
    hytec_ = std::make_unique<models::HyTec>(spec_.hytec, seed);
  }
}

nn::ParamStore& Model::store() { return unet_ ? unet_->store() : hytec_->store(); }

void Model::set_mode(nn::NormMode mode) {
  if (unet_) {
    unet_->set_mode(mode);
  } else {
    hytec_->set_mode(mode);
  }
}

Prediction Model::forward(const Tensor& s2, const Tensor& s1) {
  Prediction p;
  if (unet_) {
    const bool needs_s1 = spec_.arch != models::Arch::kTeacherS2;
    const bool needs_s2 = spec_.arch != models::Arch::kTeacherS1;
    auto out = unet_->forward(needs_s2 ? norm_.apply_s2(s2) : s2, needs_s1 ? norm_.apply_s1(s1) : s1);
    p.height = out.height;
    p.probs = out.probs;
  } else {
    auto out = hytec_->forward(norm_.apply_s2(s2));
    p.height = out.main.height;
    p.probs = out.main.probs;
    p.aux = out.aux;
  }
  return p;
}

Tensor Model::predict_tile(const Tensor& s2, const Tensor& s1) {
  NoGradScope no_grad;
  require(s2.rank() == 3 && s1.rank() == 3, ErrorCode::kShapeMismatch, "predict_tile expects [H, W, C] rasters");
  const std::size_t h = s2.dim(0), w = s2.dim(1);
  if (unet_) {
    require(h % 16 == 0 && w % 16 == 0, ErrorCode::kShapeMismatch, "tile sides must be multiples of 16");
    auto out = forward(add_batch_axis(s2), add_batch_axis(s1)).height;
    return Tensor::from_data({h, w}, std::vector<double>(out.data().begin(), out.data().end()));
  }
  const std::size_t win = spec_.hytec.image;
  require(h % win == 0 && w % win == 0, ErrorCode::kShapeMismatch,
          "tile " + std::to_string(h) + "x" + std::to_string(w) + " is not a multiple of the window " +
              std::to_string(win));
  std::vector<double> out(h * w, 0.0);
  for (std::size_t y = 0; y < h; y += win) {
    for (std::size_t x = 0; x < w; x += win) {
      const data::PatchDraw d{y, x, win, false, false};
      auto pred = forward(add_batch_axis(data::apply_patch(s2, d)), add_batch_axis(data::apply_patch(s1, d))).height;
      const auto v = pred.data();
      for (std::size_t i = 0; i < win; ++i)
        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(i * win), win,
                    out.begin() + static_cast<std::ptrdiff_t>((y + i) * w + x));
    }
  }
  return Tensor::from_data({h, w}, std::move(out));
}

void Model::save(const std::filesystem::path& dir, nn::Metadata extra) {
  spec_.to_metadata(extra);
  norm_.to_metadata(extra);
  nn::save_checkpoint(dir, store(), extra);
}

std::unique_ptr<Model> Model::load(const std::filesystem::path& dir) {
  const auto meta = nn::read_checkpoint_metadata(dir);
  auto model = std::make_unique<Model>(ModelSpec::from_metadata(meta), InputNorm::from_metadata(meta), 0);
  nn::load_checkpoint(dir, model->store());
  return model;
}

}  // namespace canopy::train
