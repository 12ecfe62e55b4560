#include <algorithm>
#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "canopy/datapipe.hpp"
#include "canopy/error.hpp"
#include "doctest.h"
#include "grid_fixture.hpp"
#include "support.hpp"

using namespace canopy;
using namespace canopy::data;
using canopy::testing::bit_equal;

namespace {

Tensor plane(std::size_t h, std::size_t w, double v) { return Tensor::full({h, w}, v); }

ImageStack pixel_stack(const std::vector<double>& samples) {
  ImageStack s;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    s.frames.push_back(Tensor::from_data({1, 1, 1}, {samples[i]}));
    s.masks.push_back(plane(1, 1, 1.0));
    s.timestamps.push_back(static_cast<std::int64_t>(i));
  }
  return s;
}

GediShot good_shot() {
  GediShot s;
  s.snr_db = 15.0;
  s.view_angle = 3.0;
  s.sensitivity = 0.97;
  s.srtm = 100.0;
  s.elm = 110.0;
  s.num_detectedmodes = 2;
  s.rx_sample_count = 1000;
  s.search_end = 800;
  s.canopy_cover = 0.6;
  s.ndvi30 = 0.62;
  return s;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("canopy_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("backscatter normalization") {
  CHECK(normalize_backscatter({0.31, 40.0, 40.0}) == 0.31);
  CHECK(normalize_backscatter({0.0, 20.0, 40.0}) == 0.0);
  CHECK(normalize_backscatter({0.2, 35.0, 40.0}) == doctest::Approx(0.17491).epsilon(1e-4));
  // Multiplicative in sigma0.
  const double unit = normalize_backscatter({1.0, 28.0, 40.0});
  for (double s : {0.01, 0.5, 3.0}) CHECK(normalize_backscatter({s, 28.0, 40.0}) == doctest::Approx(s * unit));
  CHECK_THROWS_AS(normalize_backscatter({0.2, 90.0, 40.0}), Error);
  CHECK_THROWS_AS(normalize_backscatter({0.2, 95.0, 40.0}), Error);
  CHECK_THROWS_AS(normalize_backscatter({-0.1, 30.0, 40.0}), Error);
}

TEST_CASE("rainfall gate") {
  DailyRainfall dry{0, std::vector<double>(40, 0.0)};
  const std::vector<std::int64_t> days{4, 10, 20, 39};
  CHECK(rainfall_gate(days, dry) == days);

  DailyRainfall storm{0, std::vector<double>(40, 0.0)};
  storm.mm[20] = 50.0;
  std::vector<std::int64_t> all(36);
  std::iota(all.begin(), all.end(), 4);
  std::vector<std::int64_t> expected;
  for (auto d : all)
    if (d < 20 || d > 24) expected.push_back(d);
  CHECK(rainfall_gate(all, storm) == expected);

  DailyRainfall steady{0, std::vector<double>(40, 10.0)};
  CHECK(rainfall_gate(days, steady) == days);
  steady.mm[30] = 10.5;
  CHECK(rainfall_gate({29, 30, 34, 35}, steady) == std::vector<std::int64_t>{29, 35});

  CHECK_THROWS_AS(rainfall_gate({3}, dry), Error);
  CHECK_THROWS_AS(rainfall_gate({40}, dry), Error);
}

TEST_CASE("median composite examples") {
  CHECK(median_composite(pixel_stack({1, 9, 5})).image.item() == 5.0);
  CHECK(median_composite(pixel_stack({1, 9, 5, 7})).image.item() == 6.0);

  auto frame = canopy::testing::random_tensor({4, 5, 3}, 11, 0, 1, false);
  ImageStack single{{frame}, {plane(4, 5, 1.0)}, {0}};
  auto c = median_composite(single);
  CHECK(bit_equal(c.image, frame));
  CHECK(c.missing == 0);

  // One pixel never valid in a 2-frame stack.
  ImageStack holes{{frame, frame}, {plane(4, 5, 1.0), plane(4, 5, 1.0)}, {0, 1}};
  holes.masks[0].data_mut()[7] = 0.0;
  holes.masks[1].data_mut()[7] = 0.0;
  c = median_composite(holes);
  CHECK(c.missing == 3);
  CHECK(std::isnan(c.image.at(7 * 3)));
  CHECK_FALSE(std::isnan(c.image.at(6 * 3)));

  ImageStack bad{{frame}, {plane(5, 4, 1.0)}, {0}};
  CHECK_THROWS_AS(median_composite(bad), Error);
}

TEST_CASE("median composite is frame-permutation invariant bit-exactly") {
  std::mt19937_64 rng(3);
  ImageStack s;
  for (int f = 0; f < 6; ++f) {
    s.frames.push_back(canopy::testing::random_tensor({6, 7, 4}, 100 + f, -2, 2, false));
    auto m = canopy::testing::random_tensor({6, 7}, 200 + f, 0, 1, false);
    for (double& v : m.data_mut()) v = v < 0.7 ? 1.0 : 0.0;
    s.masks.push_back(m);
    s.timestamps.push_back(f);
  }
  const auto ref = median_composite(s);
  std::vector<std::size_t> order(6);
  std::iota(order.begin(), order.end(), 0);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    ImageStack p;
    for (auto i : order) {
      p.frames.push_back(s.frames[i]);
      p.masks.push_back(s.masks[i]);
      p.timestamps.push_back(s.timestamps[i]);
    }
    const auto got = median_composite(p);
    CHECK(got.missing == ref.missing);
    bool same = true;
    for (std::size_t i = 0; i < got.image.numel(); ++i) {
      const double a = got.image.at(i), b = ref.image.at(i);
      same &= (std::isnan(a) && std::isnan(b)) || std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
    }
    CHECK(same);
  }
}

TEST_CASE("filter_gedi examples") {
  const double sigma = 0.1;
  CHECK(filter_gedi({good_shot()}, sigma).retained.size() == 1);

  auto low_sens = good_shot();
  low_sens.sensitivity = 0.94;
  auto r = filter_gedi({low_sens}, sigma);
  CHECK(r.retained.empty());
  CHECK(r.violations[0] == (1u << static_cast<unsigned>(FilterRule::kSensitivity)));

  auto low_snr = good_shot();
  low_snr.snr_db = 11.9;
  r = filter_gedi({low_snr}, sigma);
  CHECK(r.violations[0] == (1u << static_cast<unsigned>(FilterRule::kSnrView)));

  // Boundaries are retained; one step past each is rejected.
  auto edge = good_shot();
  edge.snr_db = 12.0;
  edge.view_angle = 5.0;
  edge.sensitivity = 0.95;
  edge.elm = edge.srtm + 75.0;
  edge.rx_sample_count = edge.search_end + 2;
  CHECK(filter_gedi({edge}, sigma).retained.size() == 1);
  auto wave = good_shot();
  wave.rx_sample_count = wave.search_end + 1;
  CHECK(filter_gedi({wave}, sigma).violations[0] == (1u << static_cast<unsigned>(FilterRule::kWaveform)));
  auto modes = good_shot();
  modes.num_detectedmodes = 0;
  CHECK(filter_gedi({modes}, sigma).violations[0] == 1u);
  auto cover = good_shot();
  cover.ndvi30 = cover.canopy_cover - 0.16;
  CHECK(filter_gedi({cover}, sigma).violations[0] == (1u << static_cast<unsigned>(FilterRule::kCover)));
}

TEST_CASE("filter_gedi counts and toggles against planted labels") {
  SynthSpec spec;
  spec.tiles = 4;
  spec.tile_size = 48;
  spec.reject_fraction = 0.4;
  spec.seed = 5;
  const auto ds = synth_dataset(spec);
  const double sigma = cover_sigma(ds.shots);
  REQUIRE(ds.planted.size() == ds.shots.size());

  std::array<std::size_t, kFilterRuleCount> planted_counts{};
  std::size_t clean = 0;
  for (const auto& p : ds.planted) {
    if (p.rule) {
      ++planted_counts[static_cast<std::size_t>(*p.rule)];
    } else {
      ++clean;
    }
  }
  for (auto n : planted_counts) CHECK(n > 0);

  const auto all = filter_gedi(ds.shots, sigma);
  CHECK(all.retained.size() == clean);
  CHECK(all.rejected_by == planted_counts);
  CHECK(all.violating == planted_counts);
  CHECK(all.retained.size() + std::accumulate(all.rejected_by.begin(), all.rejected_by.end(), std::size_t{0}) ==
        ds.shots.size());

  for (std::size_t rule = 0; rule < kFilterRuleCount; ++rule) {
    FilterOptions only;
    only.enabled.fill(false);
    only.enabled[rule] = true;
    const auto res = filter_gedi(ds.shots, sigma, only);
    std::size_t agree = 0;
    for (const auto& p : ds.planted) {
      const bool planted_here = p.rule && static_cast<std::size_t>(*p.rule) == rule;
      agree += (res.violations[p.index] != 0) == planted_here;
    }
    CHECK(agree == ds.shots.size());
    CHECK(res.retained.size() == ds.shots.size() - planted_counts[rule]);
  }
}

TEST_CASE("shot csv round trip") {
  SynthSpec spec;
  spec.tiles = 2;
  spec.tile_size = 24;
  spec.seed = 9;
  const auto shots = synth_dataset(spec).shots;
  std::stringstream ss;
  write_shots_csv(ss, shots);
  const auto back = read_shots_csv(ss);
  REQUIRE(back.size() == shots.size());
  bool same = true;
  for (std::size_t i = 0; i < shots.size(); ++i) {
    const auto &a = shots[i], &b = back[i];
    same &= a.lon == b.lon && a.lat == b.lat && a.rh98 == b.rh98 && a.num_detectedmodes == b.num_detectedmodes &&
            a.snr_db == b.snr_db && a.view_angle == b.view_angle && a.sensitivity == b.sensitivity &&
            a.elm == b.elm && a.srtm == b.srtm && a.rx_sample_count == b.rx_sample_count &&
            a.search_end == b.search_end && a.canopy_cover == b.canopy_cover && a.ndvi30 == b.ndvi30 &&
            a.acquired_at == b.acquired_at && a.beam_kind == b.beam_kind;
  }
  CHECK(same);

  std::stringstream bad_header("lon,lat\n1,2\n");
  CHECK_THROWS_AS(read_shots_csv(bad_header), Error);
  std::stringstream text;
  write_shots_csv(text, {good_shot()});
  std::string body = text.str();
  body.replace(body.find("15,"), 3, "1x,");
  std::stringstream bad_number(body);
  CHECK_THROWS_AS(read_shots_csv(bad_number), Error);
}

TEST_CASE("rasterize targets") {
  const TileBounds b{1000.0, 2000.0, 8, 6, 10.0};
  auto empty = rasterize_targets({}, b);
  CHECK(empty.mask.shape() == Shape{6, 8});
  CHECK(std::all_of(empty.mask.data().begin(), empty.mask.data().end(), [](double v) { return v == 0.0; }));

  GediShot s;
  s.lon = 1000.0 + 3 * 10 + 5;
  s.lat = 2000.0 + 2 * 10 + 5;
  s.rh98 = 17.25;
  auto one = rasterize_targets({s}, b);
  CHECK(std::accumulate(one.mask.data().begin(), one.mask.data().end(), 0.0) == 1.0);
  CHECK(one.mask.at(2 * 8 + 3) == 1.0);
  CHECK(one.target.at(2 * 8 + 3) == 17.25);

  GediShot early = s, late = s;
  early.acquired_at = 10;
  early.rh98 = 5.0;
  late.acquired_at = 20;
  late.rh98 = 30.0;
  late.lon += 2.0;
  CHECK(rasterize_targets({early, late}, b).target.at(2 * 8 + 3) == 30.0);
  CHECK(rasterize_targets({late, early}, b).target.at(2 * 8 + 3) == 30.0);

  GediShot outside = s;
  outside.lon = 999.0;
  const auto none = rasterize_targets({outside}, b);
  CHECK(std::accumulate(none.mask.data().begin(), none.mask.data().end(), 0.0) == 0.0);
}

TEST_CASE("height ranges and set table") {
  CHECK(height_range(0.0) == 0);
  CHECK(height_range(5.0) == 0);
  CHECK(height_range(5.01) == 1);
  CHECK(height_range(10.0) == 1);
  CHECK(height_range(40.0) == 7);
  CHECK(height_range(40.01) == 8);
  for (int set = 1; set <= 9; ++set) CHECK(table_duplication(set) == canopy::testing::kExpectedDuplication[set]);

  std::array<double, kHeightRanges> r{};
  r[0] = 1.0;
  CHECK(assign_set(r) == 1);
  r = {0.97, 0, 0, 0, 0, 0, 0, 0, 0.03};
  CHECK(assign_set(r) == 9);
}

TEST_CASE("assign_set is the first matching row from set 9 down") {
  const std::array<double, 9> thresholds{0.5, 0.25, 0.1, 0.1, 0.05, 0.025, 0.025, 0.025, 0.025};
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    std::array<double, 9> w{};
    double total = 0.0;
    for (auto& v : w) total += (v = std::pow(u(rng), 3.0));
    for (auto& v : w) v /= total;
    int expected = 0;
    for (int k = 8; k >= 0 && expected == 0; --k)
      if (w[static_cast<std::size_t>(k)] > thresholds[static_cast<std::size_t>(k)]) expected = k + 1;
    REQUIRE(assign_set(w) == expected);
  }
}

TEST_CASE("build_grid against hand-assigned cells") {
  const auto fx = canopy::testing::grid_fixture(21);
  GridOptions opt;
  opt.seed = 4;
  const auto cells = build_grid(fx.shots, fx.area, opt);

  std::map<std::size_t, const GridCell*> by_id;
  for (const auto& c : cells) by_id[c.id] = &c;
  std::map<int, std::size_t> per_set, train_per_set;
  for (std::size_t id = 0; id < fx.expected_set.size(); ++id) {
    const int want = fx.expected_set[id];
    if (want <= 0) {
      CHECK(by_id.count(id) == 0);
      continue;
    }
    REQUIRE(by_id.count(id) == 1);
    const GridCell& c = *by_id[id];
    CHECK(c.set_id == want);
    ++per_set[want];
    if (c.split == Split::kTrain) {
      ++train_per_set[want];
      CHECK(c.duplication == canopy::testing::kExpectedDuplication[static_cast<std::size_t>(want)]);
    } else {
      CHECK(c.duplication == 0);
    }
  }
  CHECK(cells.size() == std::accumulate(per_set.begin(), per_set.end(), std::size_t{0},
                                        [](std::size_t a, const auto& kv) { return a + kv.second; }));
  for (const auto& [set, n] : per_set) {
    CHECK(train_per_set[set] == (3 * n + 2) / 4);  // round-half-up of 0.75 n
  }

  std::size_t expected_list = 0;
  for (const auto& c : cells)
    if (c.split == Split::kTrain) expected_list += 1 + static_cast<std::size_t>(c.duplication);
  CHECK(training_list(cells).size() == expected_list);

  // Same inputs, same manifest.
  std::stringstream a, b;
  write_grid_csv(a, cells);
  write_grid_csv(b, build_grid(fx.shots, fx.area, opt));
  CHECK(a.str() == b.str());
}

TEST_CASE("sample_patch determinism and co-transform") {
  SynthSpec spec;
  spec.tiles = 1;
  spec.tile_size = 40;
  spec.seed = 2;
  auto tile = synth_dataset(spec).tiles.front();
  const auto p1 = sample_patch(tile, 16, 77);
  const auto p2 = sample_patch(tile, 16, 77);
  CHECK(bit_equal(p1.s2, p2.s2));
  CHECK(bit_equal(p1.mask, p2.mask));
  CHECK(p1.s2.shape() == Shape{16, 16, kS2Bands});
  CHECK(p1.s1.shape() == Shape{16, 16, kS1Bands});

  // Flip twice restores the patch.
  for (bool h : {false, true})
    for (bool v : {false, true}) CHECK(bit_equal(flip(flip(p1.s2, h, v), h, v), p1.s2));

  // A marker in the mask travels with the same pixel of every band.
  tile.mask = Tensor::zeros({40, 40});
  tile.mask.data_mut()[13 * 40 + 21] = 1.0;
  for (std::size_t b = 0; b < kS2Bands; ++b) tile.s2.data_mut()[(13 * 40 + 21) * kS2Bands + b] = 1000.0 + b;
  int seen = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto p = sample_patch(tile, 16, seed);
    for (std::size_t i = 0; i < 16 * 16; ++i) {
      if (p.mask.at(i) == 0.0) continue;
      ++seen;
      for (std::size_t b = 0; b < kS2Bands; ++b) CHECK(p.s2.at(i * kS2Bands + b) == 1000.0 + b);
      const std::size_t r = i / 16, c = i % 16;
      const std::size_t src_r = p.draw.y + (p.draw.flip_v ? 15 - r : r);
      const std::size_t src_c = p.draw.x + (p.draw.flip_h ? 15 - c : c);
      CHECK(src_r == 13);
      CHECK(src_c == 21);
    }
  }
  CHECK(seen > 0);
}

TEST_CASE("patch offsets are uniform (chi-square)") {
  constexpr std::size_t kTile = 264, kPatch = 256, kSide = kTile - kPatch + 1, kDraws = 10000;
  std::vector<double> counts(kSide * kSide, 0.0);
  std::size_t flips_h = 0, flips_v = 0;
  for (std::uint64_t s = 0; s < kDraws; ++s) {
    const auto d = draw_patch(kTile, kTile, kPatch, s);
    REQUIRE(d.y < kSide);
    REQUIRE(d.x < kSide);
    counts[d.y * kSide + d.x] += 1.0;
    flips_h += d.flip_h;
    flips_v += d.flip_v;
  }
  const double expected = static_cast<double>(kDraws) / static_cast<double>(counts.size());
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  const double p = boost::math::cdf(boost::math::complement(dist, chi2));
  MESSAGE("offset chi2 " << chi2 << " p " << p);
  CHECK(p > 0.001);
  // Fair flips: 4 sigma band around 5000.
  CHECK(std::abs(static_cast<double>(flips_h) - 5000.0) < 200.0);
  CHECK(std::abs(static_cast<double>(flips_v) - 5000.0) < 200.0);
}

TEST_CASE("synthetic dataset properties") {
  SynthSpec spec;
  spec.tiles = 8;
  spec.tile_size = 64;
  spec.seed = 1;
  const auto ds = synth_dataset(spec);
  const auto again = synth_dataset(spec);
  std::size_t n = 0, below = 0;
  double max_h = 0.0;
  for (std::size_t t = 0; t < ds.tiles.size(); ++t) {
    const auto& tile = ds.tiles[t];
    CHECK(bit_equal(tile.s2, again.tiles[t].s2));
    CHECK(bit_equal(tile.s1, again.tiles[t].s1));
    CHECK(bit_equal(tile.height, again.tiles[t].height));
    CHECK(bit_equal(tile.target, again.tiles[t].target));
    for (std::size_t p = 0; p < tile.mask.numel(); ++p) {
      max_h = std::max(max_h, tile.height.at(p));
      if (tile.mask.at(p) == 0.0) continue;
      ++n;
      below += tile.target.at(p) < 15.0;
    }
  }
  const double frac = static_cast<double>(below) / static_cast<double>(n);
  MESSAGE("targets " << n << " below 15 m: " << frac << " max height " << max_h);
  CHECK(frac >= 0.90);
  CHECK(frac <= 0.98);
  CHECK(max_h <= 55.0);
  CHECK(max_h > 40.0);

  // Filtering then rasterizing the shot table reproduces every tile's targets.
  const auto kept = filter_gedi(ds.shots, cover_sigma(ds.shots));
  std::vector<GediShot> retained;
  for (auto i : kept.retained) retained.push_back(ds.shots[i]);
  for (const auto& tile : ds.tiles) {
    const auto r = rasterize_targets(retained, tile.bounds);
    CHECK(bit_equal(r.mask, tile.mask));
    CHECK(bit_equal(r.target, tile.target));
  }

  spec.seed = 2;
  CHECK_FALSE(bit_equal(synth_dataset(spec).tiles[0].height, ds.tiles[0].height));
}

TEST_CASE("synthetic stack composites") {
  SynthSpec spec;
  spec.tiles = 1;
  spec.tile_size = 32;
  const auto tile = synth_dataset(spec).tiles.front();
  const auto st = synth_stack(tile, 9, 3);
  CHECK(st.stack.frames.size() == 9);
  const auto kept = rainfall_gate(st.stack.timestamps, st.rain);
  CHECK(kept.size() <= 9);
  const auto comp = median_composite(st.stack);
  double worst = 0.0;
  for (std::size_t i = 0; i < comp.image.numel(); ++i)
    if (!std::isnan(comp.image.at(i))) worst = std::max(worst, std::abs(comp.image.at(i) - tile.s2.at(i)));
  CHECK(worst < 0.03);
}

TEST_CASE("dataset directory round trip is byte-stable") {
  SynthSpec spec;
  spec.tiles = 4;
  spec.tile_size = 24;
  spec.seed = 8;
  const auto ds = synth_dataset(spec);
  const auto d1 = scratch("ds1"), d2 = scratch("ds2");
  write_dataset(d1, ds);
  write_dataset(d2, synth_dataset(spec));
  for (const auto& entry : std::filesystem::recursive_directory_iterator(d1)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), d1);
    CHECK(read_bytes(entry.path()) == read_bytes(d2 / rel));
  }
  const auto back = read_dataset(d1);
  REQUIRE(back.tiles.size() == ds.tiles.size());
  for (std::size_t t = 0; t < ds.tiles.size(); ++t) {
    CHECK(bit_equal(back.tiles[t].s2, ds.tiles[t].s2));
    CHECK(bit_equal(back.tiles[t].mask, ds.tiles[t].mask));
  }
  CHECK(back.shots.size() == ds.shots.size());
  REQUIRE(back.planted.size() == ds.planted.size());
  for (std::size_t i = 0; i < ds.planted.size(); ++i) CHECK(back.planted[i].rule == ds.planted[i].rule);
  CHECK(tile_split(3) == Split::kVal);
  CHECK(tile_split(4) == Split::kTrain);
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}
