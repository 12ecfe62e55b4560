#include "canopy/datapipe.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "canopy/error.hpp"

namespace canopy::data {
namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

// Exactly uniform in [0, n) by rejection over the raw 64-bit stream.
std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t v = rng();
  while (v >= limit) v = rng();
  return static_cast<std::size_t>(v % bound);
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Box-Muller on the raw stream so values do not depend on the standard
// library's distribution implementations.
double gaussian(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---- backscatter ---------------------------------------------------------

double normalize_backscatter(const BackscatterSample& s) {
  require(s.theta > 0.0 && s.theta < 90.0, ErrorCode::kInvalidArgument, "incidence angle must lie in (0, 90) degrees");
  require(s.theta_ref > 0.0 && s.theta_ref < 90.0, ErrorCode::kInvalidArgument,
          "reference angle must lie in (0, 90) degrees");
  require(s.sigma0 >= 0.0, ErrorCode::kInvalidArgument, "backscatter must be non-negative");
  const double cr = std::cos(s.theta_ref * kDegToRad);
  const double c = std::cos(s.theta * kDegToRad);
  return s.sigma0 * ((cr * cr) / (c * c));
}

// ---- rainfall ------------------------------------------------------------

std::vector<std::int64_t> rainfall_gate(const std::vector<std::int64_t>& days, const DailyRainfall& rain) {
  const auto last_day = rain.first_day + static_cast<std::int64_t>(rain.mm.size()) - 1;
  std::vector<std::int64_t> kept;
  for (std::int64_t d : days) {
    if (d - kRainLookbackDays < rain.first_day || d > last_day) {
      fail(ErrorCode::kInvalidArgument, "rainfall series does not cover day " + std::to_string(d) + " minus " +
                                            std::to_string(kRainLookbackDays) + " days");
    }
    bool event = false;
    // Windows lying inside [d - lookback, d].
    for (std::int64_t end = d - kRainLookbackDays + kRainWindowDays - 1; end <= d && !event; ++end) {
      double total = 0.0;
      for (std::int64_t k = end - kRainWindowDays + 1; k <= end; ++k) {
        total += rain.mm[static_cast<std::size_t>(k - rain.first_day)];
      }
      event = total > kRainEventMm;
    }
    if (!event) kept.push_back(d);
  }
  return kept;
}

// ---- compositing ---------------------------------------------------------

Composite median_composite(const ImageStack& stack) {
  require(!stack.frames.empty(), ErrorCode::kInvalidArgument, "median_composite: empty stack");
  require(stack.masks.size() == stack.frames.size(), ErrorCode::kInvalidArgument,
          "median_composite: one mask per frame required");
  const Shape& shape = stack.frames.front().shape();
  require(shape.size() == 3, ErrorCode::kShapeMismatch, "median_composite: frames must be [H, W, C]");
  for (std::size_t f = 0; f < stack.frames.size(); ++f) {
    require(stack.frames[f].shape() == shape, ErrorCode::kShapeMismatch, "median_composite: frame shapes differ");
    require(stack.masks[f].shape() == Shape{shape[0], shape[1]}, ErrorCode::kShapeMismatch,
            "median_composite: mask must be [H, W]");
  }
  const std::size_t pixels = shape[0] * shape[1];
  const std::size_t c = shape[2];
  std::vector<double> out(pixels * c);
  std::size_t missing = 0;
  std::vector<double> samples;
  samples.reserve(stack.frames.size());
  for (std::size_t p = 0; p < pixels; ++p) {
    for (std::size_t b = 0; b < c; ++b) {
      samples.clear();
      for (std::size_t f = 0; f < stack.frames.size(); ++f) {
        if (stack.masks[f].at(p) != 0.0) samples.push_back(stack.frames[f].at(p * c + b));
      }
      double& v = out[p * c + b];
      if (samples.empty()) {
        v = std::numeric_limits<double>::quiet_NaN();
        ++missing;
        continue;
      }
      std::sort(samples.begin(), samples.end());
      const std::size_t n = samples.size();
      v = n % 2 == 1 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
    }
  }
  return {Tensor::from_data(shape, std::move(out)), missing};
}

// ---- GEDI filter ---------------------------------------------------------

namespace {
constexpr std::array<std::string_view, kFilterRuleCount> kRuleNames{"modes",     "snr_view", "sensitivity",
                                                                    "elevation", "waveform", "cover"};
constexpr std::array<std::string_view, 15> kShotColumns{
    "lon",        "lat",  "rh98",            "num_detectedmodes", "snr_db",       "view_angle",
    "sensitivity", "elm", "srtm",            "rx_sample_count",   "search_end",   "canopy_cover",
    "ndvi30",     "acquired_at", "beam_kind"};
}  // namespace

std::string_view rule_name(FilterRule r) { return kRuleNames.at(static_cast<std::size_t>(r)); }

std::optional<FilterRule> parse_rule(std::string_view name) {
  for (std::size_t i = 0; i < kFilterRuleCount; ++i) {
    if (kRuleNames[i] == name) return static_cast<FilterRule>(i);
  }
  return std::nullopt;
}

double cover_sigma(const std::vector<GediShot>& shots) {
  if (shots.empty()) return 0.0;
  double mean = 0.0;
  for (const auto& s : shots) mean += std::abs(s.canopy_cover - s.ndvi30);
  mean /= static_cast<double>(shots.size());
  double var = 0.0;
  for (const auto& s : shots) {
    const double d = std::abs(s.canopy_cover - s.ndvi30) - mean;
    var += d * d;
  }
  return std::sqrt(var / static_cast<double>(shots.size()));
}

FilterResult filter_gedi(const std::vector<GediShot>& shots, double sigma_cover, const FilterOptions& opt) {
  require(sigma_cover >= 0.0, ErrorCode::kInvalidArgument, "filter_gedi: sigma_cover must be non-negative");
  FilterResult res;
  res.violations.resize(shots.size(), 0);
  for (std::size_t i = 0; i < shots.size(); ++i) {
    const GediShot& s = shots[i];
    const std::array<bool, kFilterRuleCount> hit{
        s.num_detectedmodes == 0,
        s.snr_db < opt.min_snr_db || s.view_angle > opt.max_view_angle,
        s.sensitivity < opt.min_sensitivity,
        std::abs(s.elm - s.srtm) > opt.max_elevation_diff,
        s.rx_sample_count - s.search_end <= opt.min_waveform_margin,
        std::abs(s.canopy_cover - s.ndvi30) > opt.cover_sigmas * sigma_cover,
    };
    std::uint8_t bits = 0;
    for (std::size_t r = 0; r < kFilterRuleCount; ++r) {
      if (opt.enabled[r] && hit[r]) {
        bits |= static_cast<std::uint8_t>(1u << r);
        ++res.violating[r];
      }
    }
    res.violations[i] = bits;
    if (bits == 0) {
      res.retained.push_back(i);
    } else {
      ++res.rejected_by[static_cast<std::size_t>(std::countr_zero(bits))];
    }
  }
  return res;
}

// ---- shot CSV ------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view field, std::size_t line_no) {
  T v{};
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc{} || ptr != field.data() + field.size()) {
    fail(ErrorCode::kParse, "shots csv line " + std::to_string(line_no) + ": bad number '" + std::string(field) + "'");
  }
  return v;
}

}  // namespace

void write_shots_csv(std::ostream& os, const std::vector<GediShot>& shots) {
  for (std::size_t i = 0; i < kShotColumns.size(); ++i) os << (i ? "," : "") << kShotColumns[i];
  os << '\n';
  for (const auto& s : shots) {
    os << fmt_double(s.lon) << ',' << fmt_double(s.lat) << ',' << fmt_double(s.rh98) << ',' << s.num_detectedmodes
       << ',' << fmt_double(s.snr_db) << ',' << fmt_double(s.view_angle) << ',' << fmt_double(s.sensitivity) << ','
       << fmt_double(s.elm) << ',' << fmt_double(s.srtm) << ',' << s.rx_sample_count << ',' << s.search_end << ','
       << fmt_double(s.canopy_cover) << ',' << fmt_double(s.ndvi30) << ',' << s.acquired_at << ','
       << (s.beam_kind == BeamKind::kCoverage ? "coverage" : "full_power") << '\n';
  }
}

std::vector<GediShot> read_shots_csv(std::istream& is) {
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), ErrorCode::kParse, "shots csv: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv(line);
  require(header.size() == kShotColumns.size() && std::equal(header.begin(), header.end(), kShotColumns.begin()),
          ErrorCode::kParse, "shots csv: unexpected header '" + line + "'");
  std::vector<GediShot> shots;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv(line);
    require(f.size() == kShotColumns.size(), ErrorCode::kParse,
            "shots csv line " + std::to_string(line_no) + ": expected " + std::to_string(kShotColumns.size()) +
                " fields");
    GediShot s;
    s.lon = parse_number<double>(f[0], line_no);
    s.lat = parse_number<double>(f[1], line_no);
    s.rh98 = parse_number<double>(f[2], line_no);
    s.num_detectedmodes = parse_number<int>(f[3], line_no);
    s.snr_db = parse_number<double>(f[4], line_no);
    s.view_angle = parse_number<double>(f[5], line_no);
    s.sensitivity = parse_number<double>(f[6], line_no);
    s.elm = parse_number<double>(f[7], line_no);
    s.srtm = parse_number<double>(f[8], line_no);
    s.rx_sample_count = parse_number<int>(f[9], line_no);
    s.search_end = parse_number<int>(f[10], line_no);
    s.canopy_cover = parse_number<double>(f[11], line_no);
    s.ndvi30 = parse_number<double>(f[12], line_no);
    s.acquired_at = parse_number<std::int64_t>(f[13], line_no);
    if (f[14] == "coverage") {
      s.beam_kind = BeamKind::kCoverage;
    } else if (f[14] == "full_power") {
      s.beam_kind = BeamKind::kFullPower;
    } else {
      fail(ErrorCode::kParse, "shots csv line " + std::to_string(line_no) + ": unknown beam_kind");
    }
    require(s.sensitivity >= 0.0 && s.sensitivity <= 1.0 && s.rh98 >= 0.0, ErrorCode::kParse,
            "shots csv line " + std::to_string(line_no) + ": sensitivity or rh98 out of range");
    shots.push_back(s);
  }
  return shots;
}

void write_shots_csv(const std::filesystem::path& path, const std::vector<GediShot>& shots) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::kIo, "cannot write " + path.string());
  write_shots_csv(os, shots);
  require(static_cast<bool>(os), ErrorCode::kIo, "write failed for " + path.string());
}

std::vector<GediShot> read_shots_csv(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::kIo, "cannot read " + path.string());
  return read_shots_csv(is);
}

// ---- rasterization -------------------------------------------------------

Raster rasterize_targets(const std::vector<GediShot>& shots, const TileBounds& b) {
  require(b.pixel > 0.0 && b.width > 0 && b.height > 0, ErrorCode::kInvalidArgument, "rasterize_targets: empty tile");
  const std::size_t n = b.width * b.height;
  std::vector<double> target(n, 0.0), mask(n, 0.0);
  std::vector<std::int64_t> stamp(n, std::numeric_limits<std::int64_t>::min());
  for (const auto& s : shots) {
    const double cx = std::floor((s.lon - b.x0) / b.pixel);
    const double cy = std::floor((s.lat - b.y0) / b.pixel);
    if (!(cx >= 0 && cy >= 0 && cx < static_cast<double>(b.width) && cy < static_cast<double>(b.height))) continue;
    const std::size_t p = static_cast<std::size_t>(cy) * b.width + static_cast<std::size_t>(cx);
    if (mask[p] == 0.0 || s.acquired_at >= stamp[p]) {
      target[p] = s.rh98;
      mask[p] = 1.0;
      stamp[p] = s.acquired_at;
    }
  }
  return {Tensor::from_data({b.height, b.width}, std::move(target)),
          Tensor::from_data({b.height, b.width}, std::move(mask))};
}

// ---- grid ----------------------------------------------------------------

const std::array<SetRule, kHeightRanges>& set_table() {
  static const std::array<SetRule, kHeightRanges> table{{
      {1, 0.50, 0},
      {2, 0.25, 1},
      {3, 0.10, 0},
      {4, 0.10, 3},
      {5, 0.05, 4},
      {6, 0.025, 4},
      {7, 0.025, 8},
      {8, 0.025, 8},
      {9, 0.025, 4},
  }};
  return table;
}

int table_duplication(int set_id) {
  require(set_id >= 1 && set_id <= static_cast<int>(kHeightRanges), ErrorCode::kInvalidArgument,
          "set id must be in 1..9");
  return set_table()[static_cast<std::size_t>(set_id - 1)].duplication;
}

std::size_t height_range(double h) {
  if (h <= 5.0) return 0;
  if (h > 40.0) return kHeightRanges - 1;
  return static_cast<std::size_t>(std::ceil(h / 5.0)) - 1;
}

int assign_set(const std::array<double, kHeightRanges>& ratios) {
  for (std::size_t i = kHeightRanges; i-- > 0;) {
    if (ratios[i] > set_table()[i].min_ratio) return set_table()[i].set_id;
  }
  return 0;
}

std::vector<GridCell> build_grid(const std::vector<GediShot>& shots, const AreaBounds& area, const GridOptions& opt) {
  require(area.x1 > area.x0 && area.y1 > area.y0 && opt.cell_size > 0.0, ErrorCode::kInvalidArgument,
          "build_grid: empty area");
  require(opt.train_fraction >= 0.0 && opt.train_fraction <= 1.0, ErrorCode::kInvalidArgument,
          "build_grid: train_fraction must be in [0, 1]");
  const auto cols = static_cast<std::size_t>(std::ceil((area.x1 - area.x0) / opt.cell_size));
  const auto rows = static_cast<std::size_t>(std::ceil((area.y1 - area.y0) / opt.cell_size));
  std::vector<std::vector<std::size_t>> members(rows * cols);
  for (std::size_t i = 0; i < shots.size(); ++i) {
    const double x = shots[i].lon, y = shots[i].lat;
    if (!(x >= area.x0 && x < area.x1 && y >= area.y0 && y < area.y1)) continue;
    const auto c = std::min(cols - 1, static_cast<std::size_t>((x - area.x0) / opt.cell_size));
    const auto r = std::min(rows - 1, static_cast<std::size_t>((y - area.y0) / opt.cell_size));
    members[r * cols + c].push_back(i);
  }

  std::vector<GridCell> cells;
  for (std::size_t id = 0; id < members.size(); ++id) {
    if (members[id].size() < opt.min_shots) continue;
    GridCell cell;
    cell.id = id;
    cell.x0 = area.x0 + static_cast<double>(id % cols) * opt.cell_size;
    cell.y0 = area.y0 + static_cast<double>(id / cols) * opt.cell_size;
    cell.x1 = cell.x0 + opt.cell_size;
    cell.y1 = cell.y0 + opt.cell_size;
    cell.shots = std::move(members[id]);
    std::array<std::size_t, kHeightRanges> counts{};
    for (std::size_t s : cell.shots) ++counts[height_range(shots[s].rh98)];
    for (std::size_t k = 0; k < kHeightRanges; ++k) {
      cell.ratios[k] = static_cast<double>(counts[k]) / static_cast<double>(cell.shots.size());
    }
    cell.set_id = assign_set(cell.ratios);
    if (cell.set_id != 0) cells.push_back(std::move(cell));
  }

  for (int set = 1; set <= static_cast<int>(kHeightRanges); ++set) {
    std::vector<GridCell*> group;
    for (auto& c : cells) {
      if (c.set_id == set) group.push_back(&c);
    }
    std::sort(group.begin(), group.end(), [&](const GridCell* a, const GridCell* b) {
      const auto ha = mix_seed(opt.seed, a->id), hb = mix_seed(opt.seed, b->id);
      return ha != hb ? ha < hb : a->id < b->id;
    });
    const auto n_train = static_cast<std::size_t>(std::floor(opt.train_fraction * static_cast<double>(group.size()) + 0.5));
    for (std::size_t i = 0; i < group.size(); ++i) {
      const bool train = i < n_train;
      group[i]->split = train ? Split::kTrain : Split::kVal;
      group[i]->duplication = train ? table_duplication(set) : 0;
    }
  }
  return cells;
}

std::vector<std::size_t> training_list(const std::vector<GridCell>& cells) {
  std::vector<std::size_t> out;
  for (const auto& c : cells) {
    if (c.split != Split::kTrain) continue;
    out.insert(out.end(), static_cast<std::size_t>(1 + c.duplication), c.id);
  }
  return out;
}

void write_grid_csv(std::ostream& os, const std::vector<GridCell>& cells) {
  os << "cell_id,x0,y0,x1,y1,shots,set,split,duplication\n";
  for (const auto& c : cells) {
    os << c.id << ',' << fmt_double(c.x0) << ',' << fmt_double(c.y0) << ',' << fmt_double(c.x1) << ','
       << fmt_double(c.y1) << ',' << c.shots.size() << ',' << c.set_id << ','
       << (c.split == Split::kTrain ? "train" : "val") << ',' << c.duplication << '\n';
  }
}

// ---- patches -------------------------------------------------------------

PatchDraw draw_patch(std::size_t h, std::size_t w, std::size_t size, std::uint64_t seed) {
  require(size > 0 && size <= h && size <= w, ErrorCode::kInvalidArgument,
          "draw_patch: patch of " + std::to_string(size) + " does not fit a " + std::to_string(h) + "x" +
              std::to_string(w) + " tile");
  std::mt19937_64 rng(mix_seed(seed, 0));
  PatchDraw d;
  d.size = size;
  d.y = uniform_index(rng, h - size + 1);
  d.x = uniform_index(rng, w - size + 1);
  d.flip_h = (rng() >> 63) != 0;
  d.flip_v = (rng() >> 63) != 0;
  return d;
}

Tensor apply_patch(const Tensor& t, const PatchDraw& d) {
  require(t.rank() == 2 || t.rank() == 3, ErrorCode::kShapeMismatch, "apply_patch: expected [H, W] or [H, W, C]");
  const std::size_t h = t.dim(0), w = t.dim(1), c = t.rank() == 3 ? t.dim(2) : 1;
  require(d.y + d.size <= h && d.x + d.size <= w, ErrorCode::kShapeMismatch, "apply_patch: crop outside tensor");
  std::vector<double> out(d.size * d.size * c);
  const auto src = t.data();
  for (std::size_t i = 0; i < d.size; ++i) {
    const std::size_t si = d.y + (d.flip_v ? d.size - 1 - i : i);
    for (std::size_t j = 0; j < d.size; ++j) {
      const std::size_t sj = d.x + (d.flip_h ? d.size - 1 - j : j);
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((si * w + sj) * c), c,
                  out.begin() + static_cast<std::ptrdiff_t>((i * d.size + j) * c));
    }
  }
  Shape shape = t.rank() == 3 ? Shape{d.size, d.size, c} : Shape{d.size, d.size};
  return Tensor::from_data(std::move(shape), std::move(out));
}

Tensor flip(const Tensor& t, bool flip_h, bool flip_v) {
  require(t.rank() >= 2 && t.dim(0) == t.dim(1), ErrorCode::kShapeMismatch, "flip: expected a square [h, w(, C)]");
  return apply_patch(t, PatchDraw{0, 0, t.dim(0), flip_h, flip_v});
}

// ---- synthetic data ------------------------------------------------------

namespace {

struct BandModel {
  double base, amp, scale;
};

// Bare-ground reflectance, vegetated offset and saturation height (m).
constexpr std::array<BandModel, kS2Bands> kS2Model{{
    {0.08, -0.05, 6.0},
    {0.10, -0.04, 6.0},
    {0.14, -0.10, 5.0},
    {0.25, 0.20, 8.0},
    {0.16, -0.06, 6.0},
    {0.22, 0.10, 7.0},
    {0.24, 0.16, 8.0},
    {0.25, 0.18, 9.0},
    {0.30, -0.14, 7.0},
    {0.22, -0.14, 6.0},
}};
constexpr std::array<BandModel, kS1Bands> kS1Model{{
    {0.05, 0.15, 25.0},
    {0.01, 0.05, 30.0},
}};
constexpr double kS2Noise = 0.01;
constexpr std::array<double, kS1Bands> kS1Noise{0.02, 0.006};

// Bilinear interpolation of a coarse uniform lattice, values in [0, 1].
std::vector<double> value_noise(std::size_t h, std::size_t w, std::size_t step, std::mt19937_64& rng) {
  const std::size_t gh = h / step + 2, gw = w / step + 2;
  std::vector<double> lattice(gh * gw);
  for (double& v : lattice) v = uniform01(rng);
  std::vector<double> out(h * w);
  for (std::size_t i = 0; i < h; ++i) {
    const double fy = static_cast<double>(i) / static_cast<double>(step);
    const auto y0 = static_cast<std::size_t>(fy);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t j = 0; j < w; ++j) {
      const double fx = static_cast<double>(j) / static_cast<double>(step);
      const auto x0 = static_cast<std::size_t>(fx);
      const double tx = fx - static_cast<double>(x0);
      const double a = lattice[y0 * gw + x0], b = lattice[y0 * gw + x0 + 1];
      const double c = lattice[(y0 + 1) * gw + x0], d = lattice[(y0 + 1) * gw + x0 + 1];
      out[i * w + j] = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d);
    }
  }
  return out;
}

// Low background with plateau-shaped stands whose size is independent of height.
std::vector<double> height_field(std::size_t n, std::mt19937_64& rng) {
  auto bg = value_noise(n, n, 8, rng);
  std::vector<double> h(n * n);
  for (std::size_t p = 0; p < h.size(); ++p) h[p] = 1.0 + 8.0 * bg[p] * bg[p];
  const double area = static_cast<double>(n * n) / (64.0 * 64.0);
  const auto stands = static_cast<std::size_t>(std::max(1.0, std::round(2.0 * area)));
  for (std::size_t s = 0; s < stands; ++s) {
    const double peak = uniform01(rng) < 0.5 ? uniform(rng, 12.0, 25.0) : 25.0 + 25.0 * std::pow(uniform01(rng), 0.7);
    const double radius = uniform(rng, 3.0, 7.5);
    const double cy = uniform(rng, 0.0, static_cast<double>(n)), cx = uniform(rng, 0.0, static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double dy = static_cast<double>(i) + 0.5 - cy, dx = static_cast<double>(j) + 0.5 - cx;
        const double d = std::sqrt(dy * dy + dx * dx) / radius;
        if (d >= 1.0) continue;
        const double f = std::min(1.0, 2.5 * (1.0 - d));
        h[i * n + j] = std::max(h[i * n + j], peak * f);
      }
    }
  }
  for (double& v : h) v = std::clamp(v + 0.5 * gaussian(rng), 0.0, kMaxSynthHeight);
  return h;
}

GediShot clean_shot(double x, double y, double rh98, std::int64_t t, std::mt19937_64& rng) {
  GediShot s;
  s.lon = x;
  s.lat = y;
  s.rh98 = rh98;
  s.num_detectedmodes = 1 + static_cast<int>(uniform_index(rng, 6));
  s.snr_db = uniform01(rng) < 0.05 ? 12.0 : uniform(rng, 12.5, 30.0);
  s.view_angle = uniform01(rng) < 0.05 ? 5.0 : uniform(rng, 0.0, 4.5);
  s.sensitivity = uniform01(rng) < 0.05 ? 0.95 : uniform(rng, 0.955, 1.0);
  s.srtm = std::round(uniform(rng, 50.0, 400.0) * 4.0) / 4.0;  // keeps srtm + 75 exact
  s.elm = s.srtm + (uniform01(rng) < 0.05 ? 75.0 : uniform(rng, -60.0, 60.0));
  s.search_end = 400 + static_cast<int>(uniform_index(rng, 400));
  s.rx_sample_count = s.search_end + (uniform01(rng) < 0.05 ? 2 : 3 + static_cast<int>(uniform_index(rng, 300)));
  s.canopy_cover = uniform(rng, 0.1, 0.9);
  s.ndvi30 = s.canopy_cover + uniform(rng, -0.05, 0.05);
  s.acquired_at = t;
  s.beam_kind = uniform01(rng) < 0.5 ? BeamKind::kCoverage : BeamKind::kFullPower;
  return s;
}

// One rule broken with a clear margin (or on its exact boundary); every
// other field stays clean.
void plant_violation(GediShot& s, FilterRule rule, std::mt19937_64& rng) {
  switch (rule) {
    case FilterRule::kModes:
      s.num_detectedmodes = 0;
      break;
    case FilterRule::kSnrView:
      if (uniform01(rng) < 0.5) {
        s.snr_db = uniform01(rng) < 0.2 ? 11.9 : uniform(rng, 5.0, 11.5);
      } else {
        s.view_angle = uniform(rng, 5.2, 12.0);
      }
      break;
    case FilterRule::kSensitivity:
      s.sensitivity = uniform01(rng) < 0.2 ? 0.94 : uniform(rng, 0.5, 0.945);
      break;
    case FilterRule::kElevation:
      s.elm = s.srtm + (uniform01(rng) < 0.5 ? 1.0 : -1.0) * uniform(rng, 76.0, 300.0);
      break;
    case FilterRule::kWaveform:
      s.rx_sample_count = s.search_end + 1 - static_cast<int>(uniform_index(rng, 5));
      break;
    case FilterRule::kCover:
      s.canopy_cover = uniform(rng, 0.85, 1.0);
      s.ndvi30 = s.canopy_cover - uniform(rng, 0.6, 0.8);
      break;
  }
}

}  // namespace

SynthDataset synth_dataset(const SynthSpec& spec) {
  require(spec.tiles > 0 && spec.tile_size >= 8, ErrorCode::kInvalidArgument,
          "synth_dataset: need at least one tile of size >= 8");
  require(spec.shot_density > 0.0 && spec.shot_density <= 1.0 && spec.reject_fraction >= 0.0,
          ErrorCode::kInvalidArgument, "synth_dataset: bad shot density or reject fraction");
  const std::size_t n = spec.tile_size;
  SynthDataset ds;
  for (std::size_t t = 0; t < spec.tiles; ++t) {
    std::mt19937_64 rng(mix_seed(spec.seed, t + 1));
    SynthTile tile;
    tile.id = t;
    tile.bounds = TileBounds{static_cast<double>(t * n) * kPixelSize, 0.0, n, n, kPixelSize};
    const auto h = height_field(n, rng);
    const auto soil = value_noise(n, n, 16, rng);

    std::vector<double> s2(n * n * kS2Bands), s1(n * n * kS1Bands);
    for (std::size_t p = 0; p < n * n; ++p) {
      const double texture = 0.02 * std::min(h[p], 20.0) / 20.0 * gaussian(rng);
      for (std::size_t b = 0; b < kS2Bands; ++b) {
        const auto& m = kS2Model[b];
        s2[p * kS2Bands + b] = m.base + 0.02 * soil[p] + m.amp * (1.0 - std::exp(-h[p] / m.scale)) + texture +
                               kS2Noise * gaussian(rng);
      }
      for (std::size_t b = 0; b < kS1Bands; ++b) {
        const auto& m = kS1Model[b];
        s1[p * kS1Bands + b] =
            std::max(0.0, m.base + m.amp * (1.0 - std::exp(-h[p] / m.scale)) + kS1Noise[b] * gaussian(rng));
      }
    }
    tile.s2 = Tensor::from_data({n, n, kS2Bands}, std::move(s2));
    tile.s1 = Tensor::from_data({n, n, kS1Bands}, std::move(s1));

    // Clean shots at sampled pixels, then planted rejects, shuffled together.
    struct Draft {
      GediShot shot;
      std::optional<FilterRule> rule;
    };
    std::vector<Draft> drafts;
    const std::int64_t t0 = static_cast<std::int64_t>(t) * 100'000'000;
    for (std::size_t p = 0; p < n * n; ++p) {
      if (uniform01(rng) >= spec.shot_density) continue;
      const double x = tile.bounds.x0 + (static_cast<double>(p % n) + uniform(rng, 0.1, 0.9)) * kPixelSize;
      const double y = tile.bounds.y0 + (static_cast<double>(p / n) + uniform(rng, 0.1, 0.9)) * kPixelSize;
      const double rh = std::clamp(h[p] + 0.3 * gaussian(rng), 0.0, kMaxSynthHeight);
      drafts.push_back({clean_shot(x, y, rh, t0 + static_cast<std::int64_t>(uniform_index(rng, 50'000'000)), rng),
                        std::nullopt});
    }
    const auto rejects =
        static_cast<std::size_t>(std::round(spec.reject_fraction * static_cast<double>(drafts.size())));
    for (std::size_t r = 0; r < rejects; ++r) {
      const double x = tile.bounds.x0 + uniform(rng, 0.0, static_cast<double>(n)) * kPixelSize;
      const double y = tile.bounds.y0 + uniform(rng, 0.0, static_cast<double>(n)) * kPixelSize;
      const auto rule = static_cast<FilterRule>(uniform_index(rng, kFilterRuleCount));
      Draft d{clean_shot(x, y, uniform(rng, 0.0, kMaxSynthHeight),
                         t0 + static_cast<std::int64_t>(uniform_index(rng, 50'000'000)), rng),
              rule};
      plant_violation(d.shot, rule, rng);
      drafts.push_back(d);
    }
    for (std::size_t i = drafts.size(); i > 1; --i) std::swap(drafts[i - 1], drafts[uniform_index(rng, i)]);

    std::vector<GediShot> clean;
    for (const auto& d : drafts) {
      if (!d.rule) clean.push_back(d.shot);
      ds.planted.push_back({ds.shots.size(), d.rule});
      ds.shots.push_back(d.shot);
    }
    auto raster = rasterize_targets(clean, tile.bounds);
    tile.target = raster.target;
    tile.mask = raster.mask;
    tile.height = Tensor::from_data({n, n}, h);
    ds.tiles.push_back(std::move(tile));
  }
  return ds;
}

Patch sample_patch(const SynthTile& tile, std::size_t size, std::uint64_t seed) {
  Patch p;
  p.draw = draw_patch(tile.height.dim(0), tile.height.dim(1), size, seed);
  p.s2 = apply_patch(tile.s2, p.draw);
  p.s1 = apply_patch(tile.s1, p.draw);
  p.target = apply_patch(tile.target, p.draw);
  p.mask = apply_patch(tile.mask, p.draw);
  return p;
}

SynthStack synth_stack(const SynthTile& tile, std::size_t frames, std::uint64_t seed) {
  require(frames > 0, ErrorCode::kInvalidArgument, "synth_stack: need at least one frame");
  std::mt19937_64 rng(mix_seed(seed, 1'000'000 + tile.id));
  const std::size_t h = tile.s2.dim(0), w = tile.s2.dim(1), c = tile.s2.dim(2);
  SynthStack out;
  std::int64_t day = 10;
  for (std::size_t f = 0; f < frames; ++f) {
    day += 3 + static_cast<std::int64_t>(uniform_index(rng, 8));
    std::vector<double> px(tile.s2.data().begin(), tile.s2.data().end());
    for (double& v : px) v += 0.005 * gaussian(rng);
    const auto cloud = value_noise(h, w, 8, rng);
    std::vector<double> mask(h * w);
    for (std::size_t p = 0; p < h * w; ++p) mask[p] = cloud[p] < 0.75 ? 1.0 : 0.0;
    out.stack.frames.push_back(Tensor::from_data({h, w, c}, std::move(px)));
    out.stack.masks.push_back(Tensor::from_data({h, w}, std::move(mask)));
    out.stack.timestamps.push_back(day);
  }
  out.rain.first_day = 0;
  out.rain.mm.resize(static_cast<std::size_t>(day + 1));
  for (double& mm : out.rain.mm) mm = uniform01(rng) < 0.1 ? uniform(rng, 5.0, 60.0) : 0.0;
  return out;
}

// ---- dataset directory ---------------------------------------------------

Split tile_split(std::size_t tile_id) { return tile_id % 4 == 3 ? Split::kVal : Split::kTrain; }

}  // namespace canopy::data
