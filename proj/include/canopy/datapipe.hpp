#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "canopy/tensor.hpp"

// Raw inputs to training batches. Spatial coordinates are local meters
// (x east, y north); rasters are 10 m pixels, row 0 at the tile's minimum y.
namespace canopy::data {

inline constexpr double kPixelSize = 10.0;

// ---- backscatter ---------------------------------------------------------

struct BackscatterSample {
  double sigma0 = 0.0;      // linear scale
  double theta = 40.0;      // incidence angle, degrees
  double theta_ref = 40.0;  // degrees
};

/// sigma0 * cos^2(theta_ref) / cos^2(theta).
double normalize_backscatter(const BackscatterSample& s);

// ---- rainfall ------------------------------------------------------------

/// Daily totals in mm; day `first_day + i` holds mm[i].
struct DailyRainfall {
  std::int64_t first_day = 0;
  std::vector<double> mm;
};

inline constexpr double kRainEventMm = 40.0;
inline constexpr std::int64_t kRainWindowDays = 4;
inline constexpr std::int64_t kRainLookbackDays = 4;

/// Keeps acquisition days d with no 4-day window inside [d - 4, d] summing
/// to more than 40 mm. Order is preserved.
std::vector<std::int64_t> rainfall_gate(const std::vector<std::int64_t>& acquisition_days,
                                        const DailyRainfall& rain);

// ---- compositing ---------------------------------------------------------

/// Frames are [H, W, C]; masks are [H, W] with 1 marking a valid pixel.
struct ImageStack {
  std::vector<Tensor> frames;
  std::vector<Tensor> masks;
  std::vector<std::int64_t> timestamps;
};

struct Composite {
  Tensor image;               // [H, W, C]; NaN where no valid sample exists
  std::size_t missing = 0;    // count of pixel-band entries without samples
};

Composite median_composite(const ImageStack& stack);

// ---- GEDI shots ----------------------------------------------------------

enum class BeamKind { kCoverage, kFullPower };

struct GediShot {
  double lon = 0.0;  // local x, meters
  double lat = 0.0;  // local y, meters
  double rh98 = 0.0;
  int num_detectedmodes = 1;
  double snr_db = 20.0;
  double view_angle = 0.0;
  double sensitivity = 1.0;
  double elm = 0.0;
  double srtm = 0.0;
  int rx_sample_count = 1000;
  int search_end = 900;
  double canopy_cover = 0.5;
  double ndvi30 = 0.5;
  std::int64_t acquired_at = 0;
  BeamKind beam_kind = BeamKind::kFullPower;
};

enum class FilterRule : std::size_t { kModes, kSnrView, kSensitivity, kElevation, kWaveform, kCover };
inline constexpr std::size_t kFilterRuleCount = 6;
std::string_view rule_name(FilterRule r);
std::optional<FilterRule> parse_rule(std::string_view name);

struct FilterOptions {
  std::array<bool, kFilterRuleCount> enabled{true, true, true, true, true, true};
  double min_snr_db = 12.0;
  double max_view_angle = 5.0;
  double min_sensitivity = 0.95;
  double max_elevation_diff = 75.0;
  int min_waveform_margin = 1;  // rx_sample_count - search_end must exceed this
  double cover_sigmas = 1.5;
};

struct FilterResult {
  std::vector<std::size_t> retained;  // indices into the input, ascending
  /// Per shot: bit r set when enabled rule r rejects it.
  std::vector<std::uint8_t> violations;
  /// Rejections attributed to the first violated rule in enum order, so
  /// retained.size() + sum(rejected_by) equals the input count.
  std::array<std::size_t, kFilterRuleCount> rejected_by{};
  /// Shots violating each rule, overlaps counted once per rule.
  std::array<std::size_t, kFilterRuleCount> violating{};
};

/// Population standard deviation of |canopy_cover - ndvi30|.
double cover_sigma(const std::vector<GediShot>& shots);

FilterResult filter_gedi(const std::vector<GediShot>& shots, double sigma_cover, const FilterOptions& opt = {});

void write_shots_csv(std::ostream& os, const std::vector<GediShot>& shots);
std::vector<GediShot> read_shots_csv(std::istream& is);
void write_shots_csv(const std::filesystem::path& path, const std::vector<GediShot>& shots);
std::vector<GediShot> read_shots_csv(const std::filesystem::path& path);

// ---- rasterization -------------------------------------------------------

struct TileBounds {
  double x0 = 0.0;
  double y0 = 0.0;
  std::size_t width = 0;   // pixels
  std::size_t height = 0;  // pixels
  double pixel = kPixelSize;
};

struct Raster {
  Tensor target;  // [H, W]
  Tensor mask;    // [H, W]
};

/// Later acquired_at wins a pixel; equal timestamps keep the later input row.
/// Shots outside the bounds are ignored.
Raster rasterize_targets(const std::vector<GediShot>& shots, const TileBounds& bounds);

// ---- grid sampling -------------------------------------------------------

inline constexpr std::size_t kHeightRanges = 9;

struct SetRule {
  int set_id;
  double min_ratio;  // strict lower bound on the fraction in the set's range
  int duplication;
};

/// Set i (1-based) looks at height range i - 1.
const std::array<SetRule, kHeightRanges>& set_table();
int table_duplication(int set_id);

/// Range index of a height: 0 for h <= 5, k for 5k < h <= 5k + 5, 8 for h > 40.
std::size_t height_range(double h);

/// First table row, scanned from set 9 down to set 1, whose range fraction
/// exceeds its threshold; 0 when none matches.
int assign_set(const std::array<double, kHeightRanges>& ratios);

enum class Split { kTrain, kVal };

struct GridCell {
  std::size_t id = 0;  // row-major over the area's cell grid
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  std::vector<std::size_t> shots;
  std::array<double, kHeightRanges> ratios{};
  int set_id = 0;
  Split split = Split::kTrain;
  int duplication = 0;  // applied copies; zero for validation cells
};

struct AreaBounds {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

struct GridOptions {
  double cell_size = 7680.0;
  std::size_t min_shots = 600;
  double train_fraction = 0.75;
  std::uint64_t seed = 0;
};

/// Eligible cells that match a set, ordered by id.
std::vector<GridCell> build_grid(const std::vector<GediShot>& shots, const AreaBounds& area,
                                 const GridOptions& opt = {});

/// Training cell ids, each repeated 1 + duplication times, in id order.
std::vector<std::size_t> training_list(const std::vector<GridCell>& cells);

void write_grid_csv(std::ostream& os, const std::vector<GridCell>& cells);

// ---- patch sampling ------------------------------------------------------

struct PatchDraw {
  std::size_t y = 0, x = 0, size = 0;
  bool flip_h = false;  // mirror columns
  bool flip_v = false;  // mirror rows
};

/// Uniform over every offset keeping the patch inside an h x w tile, then
/// independent fair flips.
PatchDraw draw_patch(std::size_t h, std::size_t w, std::size_t size, std::uint64_t seed);

/// Crops and flips an [H, W] or [H, W, C] tensor.
Tensor apply_patch(const Tensor& t, const PatchDraw& d);
/// Flips an [h, w] or [h, w, C] tensor in place of a crop.
Tensor flip(const Tensor& t, bool flip_h, bool flip_v);

struct Patch {
  Tensor s2, s1, target, mask;
  PatchDraw draw;
};

// ---- synthetic data ------------------------------------------------------

inline constexpr std::size_t kS2Bands = 10;  // B, G, R, NIR, RE1..RE4, SWIR1, SWIR2
inline constexpr std::size_t kS1Bands = 2;   // VV, VH

struct SynthSpec {
  std::size_t tiles = 8;
  std::size_t tile_size = 64;
  double shot_density = 0.03;    // fraction of pixels with a clean shot
  double reject_fraction = 0.2;  // extra shots planted with one violation each
  std::uint64_t seed = 0;
};

struct SynthTile {
  std::size_t id = 0;
  TileBounds bounds;
  Tensor s2;      // [H, W, 10]
  Tensor s1;      // [H, W, 2]
  Tensor height;  // [H, W] dense truth
  Tensor target;  // [H, W] retained GEDI heights
  Tensor mask;    // [H, W]
};

struct PlantedShot {
  std::size_t index = 0;
  std::optional<FilterRule> rule;  // nullopt for clean shots
};

struct SynthDataset {
  std::vector<SynthTile> tiles;
  std::vector<GediShot> shots;
  std::vector<PlantedShot> planted;
};

inline constexpr double kMaxSynthHeight = 55.0;

SynthDataset synth_dataset(const SynthSpec& spec);

/// Crop and flip every raster of a tile with the same draw.
Patch sample_patch(const SynthTile& tile, std::size_t size, std::uint64_t seed);

/// Noisy, partially masked repeats of a tile's optical bands plus a daily
/// rainfall series covering them.
struct SynthStack {
  ImageStack stack;
  DailyRainfall rain;
};
SynthStack synth_stack(const SynthTile& tile, std::size_t frames, std::uint64_t seed);

/// Every fourth tile (ids 3, 7, ...) is held out for validation.
Split tile_split(std::size_t tile_id);

/// Layout: tiles.csv (tile_id, split, x0, y0, width, height), one
/// tiles/NNNN/{s2,s1,height,target,mask}.tnsr set per tile, shots.csv and
/// planted.csv (shot_index, planted rule or "none").
void write_dataset(const std::filesystem::path& dir, const SynthDataset& ds);
SynthDataset read_dataset(const std::filesystem::path& dir);

/// Deterministic 64-bit mixer used for seed derivation.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace canopy::data
