#include <cstdio>
#include <fstream>
#include <sstream>

#include "canopy/datapipe.hpp"
#include "canopy/error.hpp"
#include "canopy/tnsr_io.hpp"

namespace canopy::data {
namespace {

namespace fs = std::filesystem;

fs::path tile_dir(const fs::path& root, std::size_t id) {
  char name[16];
  std::snprintf(name, sizeof name, "%04zu", id);
  return root / "tiles" / name;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  return out;
}

}  // namespace

void write_dataset(const fs::path& dir, const SynthDataset& ds) {
  std::error_code ec;
  fs::create_directories(dir / "tiles", ec);
  require(!ec, ErrorCode::kIo, "cannot create " + (dir / "tiles").string() + ": " + ec.message());

  std::ofstream manifest(dir / "tiles.csv", std::ios::binary);
  require(static_cast<bool>(manifest), ErrorCode::kIo, "cannot write " + (dir / "tiles.csv").string());
  manifest << "tile_id,split,x0,y0,width,height\n";
  for (const auto& t : ds.tiles) {
    const fs::path td = tile_dir(dir, t.id);
    fs::create_directories(td, ec);
    require(!ec, ErrorCode::kIo, "cannot create " + td.string());
    io::write_tnsr(td / "s2.tnsr", t.s2);
    io::write_tnsr(td / "s1.tnsr", t.s1);
    io::write_tnsr(td / "height.tnsr", t.height);
    io::write_tnsr(td / "target.tnsr", t.target);
    io::write_tnsr(td / "mask.tnsr", t.mask);
    manifest << t.id << ',' << (tile_split(t.id) == Split::kTrain ? "train" : "val") << ','
             << static_cast<long long>(t.bounds.x0) << ',' << static_cast<long long>(t.bounds.y0) << ','
             << t.bounds.width << ',' << t.bounds.height << '\n';
  }
  require(static_cast<bool>(manifest), ErrorCode::kIo, "write failed for tiles.csv");

  write_shots_csv(dir / "shots.csv", ds.shots);
  std::ofstream planted(dir / "planted.csv", std::ios::binary);
  require(static_cast<bool>(planted), ErrorCode::kIo, "cannot write planted.csv");
  planted << "shot_index,planted\n";
  for (const auto& p : ds.planted) planted << p.index << ',' << (p.rule ? rule_name(*p.rule) : "none") << '\n';
  require(static_cast<bool>(planted), ErrorCode::kIo, "write failed for planted.csv");
}

SynthDataset read_dataset(const fs::path& dir) {
  SynthDataset ds;
  std::ifstream manifest(dir / "tiles.csv", std::ios::binary);
  require(static_cast<bool>(manifest), ErrorCode::kIo, "missing dataset manifest " + (dir / "tiles.csv").string());
  std::string line;
  std::getline(manifest, line);
  require(line == "tile_id,split,x0,y0,width,height", ErrorCode::kParse, "tiles.csv: unexpected header");
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    require(f.size() == 6, ErrorCode::kParse, "tiles.csv: expected 6 fields in '" + line + "'");
    SynthTile t;
    try {
      t.id = std::stoul(f[0]);
      t.bounds = TileBounds{std::stod(f[2]), std::stod(f[3]), std::stoul(f[4]), std::stoul(f[5]), kPixelSize};
    } catch (const std::logic_error&) {
      fail(ErrorCode::kParse, "tiles.csv: bad number in '" + line + "'");
    }
    const fs::path td = tile_dir(dir, t.id);
    t.s2 = io::read_tnsr(td / "s2.tnsr");
    t.s1 = io::read_tnsr(td / "s1.tnsr");
    t.height = io::read_tnsr(td / "height.tnsr");
    t.target = io::read_tnsr(td / "target.tnsr");
    t.mask = io::read_tnsr(td / "mask.tnsr");
    const Shape plane{t.bounds.height, t.bounds.width};
    require(t.height.shape() == plane && t.target.shape() == plane && t.mask.shape() == plane &&
                t.s2.rank() == 3 && t.s1.rank() == 3 && t.s2.dim(0) == plane[0] && t.s1.dim(0) == plane[0],
            ErrorCode::kShapeMismatch, "tile " + std::to_string(t.id) + " rasters disagree with the manifest");
    ds.tiles.push_back(std::move(t));
  }

  if (fs::exists(dir / "shots.csv")) ds.shots = read_shots_csv(dir / "shots.csv");
  std::ifstream planted(dir / "planted.csv", std::ios::binary);
  if (planted) {
    std::getline(planted, line);
    while (std::getline(planted, line)) {
      if (line.empty()) continue;
      const auto f = split_fields(line);
      require(f.size() == 2, ErrorCode::kParse, "planted.csv: expected 2 fields");
      PlantedShot p;
      p.index = std::stoul(f[0]);
      if (f[1] != "none") {
        p.rule = parse_rule(f[1]);
        require(p.rule.has_value(), ErrorCode::kParse, "planted.csv: unknown rule '" + f[1] + "'");
      }
      ds.planted.push_back(p);
    }
  }
  return ds;
}

}  // namespace canopy::data
