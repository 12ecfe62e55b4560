#include "canopy/commands.hpp"

#include <charconv>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "canopy/datapipe.hpp"
#include "canopy/log.hpp"
#include "canopy/metrics.hpp"
#include "canopy/ops.hpp"
#include "canopy/tnsr_io.hpp"
#include "canopy/train.hpp"

namespace canopy::app {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string opt_num(const std::optional<double>& v) { return v ? fmt(*v) : "NA"; }

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::kIo, "cannot write " + path.string());
  return os;
}

data::SynthDataset load_dataset(const config::RunConfig& cfg) {
  require(!cfg.dataset.empty(), ErrorCode::kInvalidArgument, "[data] dataset is not set");
  require(fs::is_directory(cfg.dataset), ErrorCode::kIo, "dataset directory " + cfg.dataset + " does not exist");
  return data::read_dataset(cfg.dataset);
}

std::string tile_dir(std::size_t id) {
  std::string s = std::to_string(id);
  return std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

struct Filtered {
  std::vector<data::GediShot> retained;
  data::FilterResult result;
};

Filtered run_filter(const std::vector<data::GediShot>& shots) {
  Filtered f;
  f.result = data::filter_gedi(shots, data::cover_sigma(shots));
  for (auto i : f.result.retained) f.retained.push_back(shots[i]);
  return f;
}

}  // namespace

std::string cmd_synth(const config::RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  const data::SynthSpec spec{cfg.tiles, cfg.tile_size, cfg.shot_density, cfg.reject_fraction, cfg.seed};
  const auto ds = data::synth_dataset(spec);
  data::write_dataset(out, ds);
  std::size_t planted = 0;
  for (const auto& p : ds.planted) planted += p.rule.has_value();
  {
    auto os = open_out(out / "manifest.csv");
    os << "key,value\n"
       << "seed," << cfg.seed << "\ntiles," << ds.tiles.size() << "\ntile_size," << cfg.tile_size << "\nshots,"
       << ds.shots.size() << "\nplanted_rejects," << planted << '\n';
  }
  std::ostringstream s;
  s << "tiles=" << ds.tiles.size() << "\nshots=" << ds.shots.size() << "\nplanted_rejects=" << planted << '\n';
  return s.str();
}

std::string cmd_filter(const config::RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  const auto ds = load_dataset(cfg);
  const auto f = run_filter(ds.shots);
  fs::create_directories(out);
  std::array<std::size_t, data::kFilterRuleCount> planted{};
  for (const auto& p : ds.planted)
    if (p.rule) ++planted[static_cast<std::size_t>(*p.rule)];
  data::write_shots_csv(out / "retained_shots.csv", f.retained);
  {
    auto os = open_out(out / "filter_report.csv");
    os << "rule,planted,violating,rejected_first\n";
    for (std::size_t r = 0; r < data::kFilterRuleCount; ++r)
      os << data::rule_name(static_cast<data::FilterRule>(r)) << ',' << planted[r] << ',' << f.result.violating[r]
         << ',' << f.result.rejected_by[r] << '\n';
  }
  std::ostringstream s;
  s << "shots=" << ds.shots.size() << "\nretained=" << f.retained.size() << '\n';
  for (std::size_t r = 0; r < data::kFilterRuleCount; ++r)
    s << "rejected." << data::rule_name(static_cast<data::FilterRule>(r)) << '=' << f.result.rejected_by[r] << '\n';
  return s.str();
}

std::string cmd_composite(const config::RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  const auto ds = load_dataset(cfg);
  struct Row {
    std::size_t frames = 0, kept = 0, missing = 0;
  };
  std::vector<Row> rows(ds.tiles.size());
  train::parallel_for(ds.tiles.size(), cfg.workers, [&](std::size_t i) {
    const auto& tile = ds.tiles[i];
    const auto st = data::synth_stack(tile, cfg.composite_frames, cfg.seed);
    const auto keep_days = data::rainfall_gate(st.stack.timestamps, st.rain);
    data::ImageStack gated;
    std::size_t k = 0;
    for (std::size_t f = 0; f < st.stack.frames.size(); ++f) {
      if (k < keep_days.size() && keep_days[k] == st.stack.timestamps[f]) {
        gated.frames.push_back(st.stack.frames[f]);
        gated.masks.push_back(st.stack.masks[f]);
        gated.timestamps.push_back(st.stack.timestamps[f]);
        ++k;
      }
    }
    Row r{st.stack.frames.size(), gated.frames.size(), 0};
    Tensor image;
    if (gated.frames.empty()) {
      image = Tensor::full(tile.s2.shape(), std::numeric_limits<double>::quiet_NaN());
      r.missing = image.numel();
    } else {
      auto c = data::median_composite(gated);
      image = c.image;
      r.missing = c.missing;
    }
    const fs::path dir = out / "tiles" / tile_dir(tile.id);
    fs::create_directories(dir);
    io::write_tnsr(dir / "composite.tnsr", image);
    rows[i] = r;
  });
  std::size_t missing = 0, kept = 0;
  {
    auto os = open_out(out / "composite_report.csv");
    os << "tile_id,frames,kept_frames,missing_entries\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      os << ds.tiles[i].id << ',' << rows[i].frames << ',' << rows[i].kept << ',' << rows[i].missing << '\n';
      missing += rows[i].missing;
      kept += rows[i].kept;
    }
  }
  std::ostringstream s;
  s << "tiles=" << rows.size() << "\nkept_frames=" << kept << "\nmissing_entries=" << missing << '\n';
  return s.str();
}

std::string cmd_grid(const config::RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  const auto ds = load_dataset(cfg);
  const auto f = run_filter(ds.shots);
  require(!ds.tiles.empty(), ErrorCode::kInvalidArgument, "dataset has no tiles");
  data::AreaBounds area{ds.tiles.front().bounds.x0, ds.tiles.front().bounds.y0, ds.tiles.front().bounds.x0,
                        ds.tiles.front().bounds.y0};
  for (const auto& t : ds.tiles) {
    area.x0 = std::min(area.x0, t.bounds.x0);
    area.y0 = std::min(area.y0, t.bounds.y0);
    area.x1 = std::max(area.x1, t.bounds.x0 + static_cast<double>(t.bounds.width) * t.bounds.pixel);
    area.y1 = std::max(area.y1, t.bounds.y0 + static_cast<double>(t.bounds.height) * t.bounds.pixel);
  }
  const data::GridOptions opt{cfg.cell_size, cfg.min_shots, cfg.train_fraction, cfg.seed};
  const auto cells = data::build_grid(f.retained, area, opt);
  if (cells.empty()) log::warn("grid: no cell qualified; lower [grid] cell_size or min_shots for small areas");
  {
    auto os = open_out(out / "grid.csv");
    data::write_grid_csv(os, cells);
  }
  std::map<int, std::array<std::size_t, 3>> sets;  // cells, train, val
  for (const auto& c : cells) {
    auto& s = sets[c.set_id];
    ++s[0];
    ++s[c.split == data::Split::kTrain ? 1 : 2];
  }
  {
    auto os = open_out(out / "grid_sets.csv");
    os << "set,cells,train,val,duplication\n";
    for (const auto& [id, s] : sets)
      os << id << ',' << s[0] << ',' << s[1] << ',' << s[2] << ',' << data::table_duplication(id) << '\n';
  }
  const auto list = data::training_list(cells);
  {
    auto os = open_out(out / "training_list.csv");
    os << "cell_id\n";
    for (auto id : list) os << id << '\n';
  }
  std::ostringstream s;
  s << "cells=" << cells.size() << "\ntraining_samples=" << list.size() << '\n';
  return s.str();
}

std::string cmd_train(const config::RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  const auto ds = load_dataset(cfg);
  const auto r = train::train_model(cfg, ds, out);
  std::ostringstream s;
  s << "steps=" << r.steps << "\nprobe_initial=" << fmt(r.probe_initial) << "\nprobe_final=" << fmt(r.probe_final)
    << "\nmodel=" << r.model_dir.string() << '\n';
  return s.str();
}

std::string cmd_eval(const config::RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  require(!cfg.checkpoint.empty(), ErrorCode::kInvalidArgument, "[eval] checkpoint is not set");
  const auto ds = load_dataset(cfg);
  auto model = train::Model::load(cfg.checkpoint);
  const auto r = train::evaluate(*model, ds, cfg);
  train::write_eval(out, r);
  std::ostringstream s;
  s << "tiles=" << r.tiles.size() << "\nn=" << r.overall.n << "\nrmse=" << fmt(r.overall.rmse)
    << "\nbias=" << fmt(r.overall.bias) << "\nr=" << opt_num(r.overall.r) << "\nmean_gsi=" << opt_num(r.mean_gsi)
    << '\n';
  return s.str();
}

std::string cmd_gsi(const config::RunConfig& cfg, const fs::path& input, const fs::path& reference,
                    const fs::path& out) {
  cfg.validate();
  const Tensor map = io::read_tnsr(input);
  const Tensor ref = io::read_tnsr(reference);
  require(map.rank() == 2, ErrorCode::kShapeMismatch, "gsi input must be [H, W], got " + to_string(map.shape()));
  require(ref.rank() == 3 && ref.dim(0) == map.dim(0) && ref.dim(1) == map.dim(1), ErrorCode::kShapeMismatch,
          "gsi reference must be [H, W, C] matching the input");
  const std::size_t side = std::min({cfg.gsi_patch, map.dim(0), map.dim(1)});
  std::vector<data::PatchDraw> draws;
  for (std::size_t y = 0; y + side <= map.dim(0); y += side)
    for (std::size_t x = 0; x + side <= map.dim(1); x += side) draws.push_back({y, x, side, false, false});
  std::vector<metrics::SharpnessReport> reports(draws.size());
  train::parallel_for(draws.size(), cfg.workers, [&](std::size_t i) {
    reports[i] = metrics::gsi(data::apply_patch(map, draws[i]), data::apply_patch(ref, draws[i]));
  });
  double sum = 0.0;
  std::size_t n = 0;
  {
    auto os = open_out(out / "gsi.csv");
    os << "y,x,size,si_output,si_reference,gsi,effective_resolution\n";
    for (std::size_t i = 0; i < draws.size(); ++i) {
      const auto& r = reports[i];
      os << draws[i].y << ',' << draws[i].x << ',' << side << ',' << opt_num(r.si_output) << ','
         << opt_num(r.si_reference) << ',' << opt_num(r.gsi) << ',' << opt_num(r.effective_resolution) << '\n';
      if (r.gsi) {
        sum += *r.gsi;
        ++n;
      }
    }
  }
  const std::optional<double> mean = n ? std::optional(sum / static_cast<double>(n)) : std::nullopt;
  {
    auto os = open_out(out / "gsi_summary.csv");
    os << "patches,mean_gsi,effective_resolution\n"
       << draws.size() << ',' << opt_num(mean) << ','
       << opt_num(mean ? std::optional(metrics::gsi_to_resolution(*mean)) : std::nullopt) << '\n';
  }
  std::ostringstream s;
  s << "patches=" << draws.size() << "\nmean_gsi=" << opt_num(mean) << '\n';
  return s.str();
}

}  // namespace canopy::app
