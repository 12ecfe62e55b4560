#include <charconv>
#include <fstream>

#include "canopy/ops.hpp"
#include "canopy/train.hpp"

namespace canopy::train {
namespace {

std::string opt_num(const std::optional<double>& v) {
  if (!v) return "NA";
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, *v);
  return std::string(buf, end);
}

struct TileOutcome {
  std::vector<double> y, yhat;              // retained GEDI targets
  std::vector<double> dense_y, dense_yhat;  // every pixel
  std::vector<EvalResult::PatchGsi> gsi;
};

TileOutcome score_tile(Model& model, const data::SynthTile& tile, std::size_t gsi_patch) {
  TileOutcome o;
  const Tensor pred = model.predict_tile(tile.s2, tile.s1);
  const auto p = pred.data(), t = tile.target.data(), m = tile.mask.data(), h = tile.height.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (m[i] != 0.0) {
      o.y.push_back(t[i]);
      o.yhat.push_back(p[i]);
    }
    o.dense_y.push_back(h[i]);
    o.dense_yhat.push_back(p[i]);
  }

  NoGradScope no_grad;
  const std::size_t rows = pred.dim(0), cols = pred.dim(1);
  const std::size_t side = std::min({gsi_patch, rows, cols});
  const Tensor reference_bands = ops::slice(tile.s2, 2, 0, 4);
  for (std::size_t y = 0; y + side <= rows; y += side) {
    for (std::size_t x = 0; x + side <= cols; x += side) {
      const data::PatchDraw d{y, x, side, false, false};
      o.gsi.push_back({tile.id, y, x, side,
                       metrics::gsi(data::apply_patch(pred, d), data::apply_patch(reference_bands, d))});
    }
  }
  return o;
}

}  // namespace

EvalResult evaluate(Model& model, const data::SynthDataset& ds, const config::RunConfig& cfg) {
  cfg.validate();
  const data::Split want = cfg.split == "train" ? data::Split::kTrain : data::Split::kVal;
  EvalResult r;
  std::vector<std::size_t> index;
  for (std::size_t i = 0; i < ds.tiles.size(); ++i)
    if (data::tile_split(ds.tiles[i].id) == want) {
      index.push_back(i);
      r.tiles.push_back(ds.tiles[i].id);
    }
  require(!index.empty(), ErrorCode::kInvalidArgument, "no tiles in the '" + cfg.split + "' split");

  model.set_mode(nn::NormMode::kEval);
  std::vector<TileOutcome> outcomes(index.size());
  parallel_for(index.size(), cfg.workers,
               [&](std::size_t k) { outcomes[k] = score_tile(model, ds.tiles[index[k]], cfg.gsi_patch); });

  std::vector<double> y, yhat, dy, dyhat;
  double gsi_sum = 0.0;
  std::size_t gsi_n = 0;
  for (auto& o : outcomes) {
    y.insert(y.end(), o.y.begin(), o.y.end());
    yhat.insert(yhat.end(), o.yhat.begin(), o.yhat.end());
    dy.insert(dy.end(), o.dense_y.begin(), o.dense_y.end());
    dyhat.insert(dyhat.end(), o.dense_yhat.begin(), o.dense_yhat.end());
    for (auto& g : o.gsi) {
      if (g.sharpness.gsi) {
        gsi_sum += *g.sharpness.gsi;
        ++gsi_n;
      }
      r.gsi.push_back(g);
    }
  }
  require(!y.empty(), ErrorCode::kInvalidArgument, "evaluation split has no GEDI targets");
  const auto edges = metrics::five_metre_edges(cfg.edges_max);
  r.overall = metrics::summary_stats(y, yhat);
  r.binned = metrics::binned_report(y, yhat, edges);
  r.binned_dense = metrics::binned_report(dy, dyhat, edges);
  if (gsi_n > 0) r.mean_gsi = gsi_sum / static_cast<double>(gsi_n);
  return r;
}

void write_eval(const std::filesystem::path& out, const EvalResult& r) {
  std::filesystem::create_directories(out);
  auto open = [&](const char* name) {
    std::ofstream os(out / name, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::kIo, "cannot write " + (out / name).string());
    return os;
  };
  {
    auto os = open("metrics.csv");
    metrics::write_report_csv(os, r.overall);
  }
  {
    auto os = open("binned.csv");
    metrics::write_binned_csv(os, r.binned);
  }
  {
    auto os = open("binned_dense.csv");
    metrics::write_binned_csv(os, r.binned_dense);
  }
  {
    auto os = open("gsi.csv");
    os << "tile,y,x,size,si_output,si_reference,gsi,effective_resolution\n";
    for (const auto& g : r.gsi)
      os << g.tile << ',' << g.y << ',' << g.x << ',' << g.size << ',' << opt_num(g.sharpness.si_output) << ','
         << opt_num(g.sharpness.si_reference) << ',' << opt_num(g.sharpness.gsi) << ','
         << opt_num(g.sharpness.effective_resolution) << '\n';
  }
  {
    auto os = open("gsi_summary.csv");
    os << "patches,mean_gsi,effective_resolution\n"
       << r.gsi.size() << ',' << opt_num(r.mean_gsi) << ','
       << opt_num(r.mean_gsi ? std::optional(metrics::gsi_to_resolution(*r.mean_gsi)) : std::nullopt) << '\n';
  }
}

}  // namespace canopy::train
