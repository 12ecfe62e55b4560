#include "canopy/metrics.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <ostream>
#include <string>

#include "canopy/error.hpp"

namespace canopy::metrics {
namespace {

void check_pairs(std::span<const double> y, std::span<const double> yhat) {
  require(y.size() == yhat.size(), ErrorCode::kShapeMismatch, "metrics: y and yhat lengths differ");
  require(y.size() >= 2, ErrorCode::kInvalidArgument, "metrics: need at least two pairs");
  for (std::size_t i = 0; i < y.size(); ++i) {
    require(std::isfinite(y[i]) && std::isfinite(yhat[i]), ErrorCode::kNumeric, "metrics: non-finite value");
  }
}

double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

struct Moments {
  double mean_y, mean_s, sd_m, sd_s, cov;
};

Moments moments(std::span<const double> y, std::span<const double> yhat) {
  Moments m{mean(y), mean(yhat), 0.0, 0.0, 0.0};
  double vy = 0.0, vs = 0.0, c = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double dy = y[i] - m.mean_y, ds = yhat[i] - m.mean_s;
    vy += dy * dy;
    vs += ds * ds;
    c += dy * ds;
  }
  const auto n = static_cast<double>(y.size());
  m.sd_m = std::sqrt(vy / n);
  m.sd_s = std::sqrt(vs / n);
  m.cov = c / n;
  return m;
}

}  // namespace

MetricsReport summary_stats(std::span<const double> y, std::span<const double> yhat) {
  check_pairs(y, yhat);
  const Moments m = moments(y, yhat);
  MetricsReport rep;
  rep.n = y.size();
  rep.sd_measured = m.sd_m;
  rep.sd_estimated = m.sd_s;
  rep.bias = m.mean_s - m.mean_y;
  if (m.sd_m > 0.0 && m.sd_s > 0.0) rep.r = std::clamp(m.cov / (m.sd_m * m.sd_s), -1.0, 1.0);
  rep.sdsd = (m.sd_s - m.sd_m) * (m.sd_s - m.sd_m);
  rep.lcs = rep.r ? 2.0 * m.sd_s * m.sd_m * (1.0 - *rep.r) : 0.0;

  double se = 0.0, pe = 0.0;
  std::size_t np = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = yhat[i] - y[i];
    se += e * e;
    if (y[i] >= 1.0) {
      pe += (e / y[i]) * (e / y[i]);
      ++np;
    }
  }
  rep.rmse = std::sqrt(se / static_cast<double>(y.size()));
  if (np > 0) rep.rmspe = 100.0 * std::sqrt(pe / static_cast<double>(np));
  return rep;
}

MsdParts msd_decomposition(std::span<const double> y, std::span<const double> yhat) {
  const MetricsReport r = summary_stats(y, yhat);
  MsdParts p;
  double se = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) se += (yhat[i] - y[i]) * (yhat[i] - y[i]);
  p.mse = se / static_cast<double>(y.size());
  p.bias2 = r.bias * r.bias;
  p.sdsd = r.sdsd;
  p.lcs = r.lcs;
  p.residual = p.mse - (p.bias2 + p.sdsd + p.lcs);
  return p;
}

// ---- sharpness -----------------------------------------------------------

namespace {

constexpr std::size_t kBlurTaps = 9;

// Box blur along one axis with replicated borders.
std::vector<double> box_blur(std::span<const double> f, std::size_t h, std::size_t w, bool vertical) {
  std::vector<double> out(f.size());
  const auto half = static_cast<std::ptrdiff_t>(kBlurTaps / 2);
  const auto hh = static_cast<std::ptrdiff_t>(h), ww = static_cast<std::ptrdiff_t>(w);
  for (std::ptrdiff_t i = 0; i < hh; ++i) {
    for (std::ptrdiff_t j = 0; j < ww; ++j) {
      double s = 0.0;
      for (std::ptrdiff_t k = -half; k <= half; ++k) {
        const std::ptrdiff_t ii = vertical ? std::clamp(i + k, std::ptrdiff_t{0}, hh - 1) : i;
        const std::ptrdiff_t jj = vertical ? j : std::clamp(j + k, std::ptrdiff_t{0}, ww - 1);
        s += f[static_cast<std::size_t>(ii * ww + jj)];
      }
      out[static_cast<std::size_t>(i * ww + j)] = s / static_cast<double>(kBlurTaps);
    }
  }
  return out;
}

std::optional<double> directional_blur(std::span<const double> f, std::size_t h, std::size_t w, bool vertical) {
  const auto b = box_blur(f, h, w, vertical);
  double sum_f = 0.0, sum_v = 0.0;
  const std::size_t step = vertical ? w : 1;
  for (std::size_t i = vertical ? 1 : 0; i < h; ++i) {
    for (std::size_t j = vertical ? 0 : 1; j < w; ++j) {
      const std::size_t p = i * w + j;
      const double df = std::abs(f[p] - f[p - step]);
      const double db = std::abs(b[p] - b[p - step]);
      sum_f += df;
      sum_v += std::max(0.0, df - db);
    }
  }
  if (sum_f <= 0.0) return std::nullopt;
  return (sum_f - sum_v) / sum_f;
}

struct GsiAnchor {
  double gsi, metres;
};
constexpr std::array<GsiAnchor, 13> kGsiTable{{
    {1.00, 10.0}, {1.03, 12.5}, {1.08, 15.0}, {1.14, 17.5}, {1.21, 20.0}, {1.29, 22.5}, {1.37, 25.0},
    {1.46, 27.5}, {1.56, 30.0}, {1.68, 32.5}, {1.77, 35.0}, {1.88, 37.5}, {2.00, 40.0},
}};

}  // namespace

std::optional<double> blur_metric(const Tensor& img) {
  require(img.rank() == 2, ErrorCode::kShapeMismatch, "blur_metric: expected [H, W]");
  const std::size_t h = img.dim(0), w = img.dim(1);
  require(h >= 8 && w >= 8, ErrorCode::kInvalidArgument, "blur_metric: image must be at least 8x8");
  const auto v = directional_blur(img.data(), h, w, true);
  const auto hz = directional_blur(img.data(), h, w, false);
  if (!v) return hz;
  if (!hz) return v;
  return std::max(*v, *hz);
}

double gsi_to_resolution(double g) {
  if (g <= kGsiTable.front().gsi) return kGsiTable.front().metres;
  if (g >= kGsiTable.back().gsi) return kGsiTable.back().metres;
  for (std::size_t i = 1; i < kGsiTable.size(); ++i) {
    const auto& a = kGsiTable[i - 1];
    const auto& b = kGsiTable[i];
    if (g == b.gsi) return b.metres;
    if (g < b.gsi) return a.metres + (b.metres - a.metres) * (g - a.gsi) / (b.gsi - a.gsi);
  }
  return kGsiTable.back().metres;
}

SharpnessReport gsi(const Tensor& output, const Tensor& reference) {
  require(output.rank() == 2 && reference.rank() == 3, ErrorCode::kShapeMismatch,
          "gsi: expected output [H, W] and reference [H, W, C]");
  require(reference.dim(0) == output.dim(0) && reference.dim(1) == output.dim(1), ErrorCode::kShapeMismatch,
          "gsi: output and reference patch sizes differ");
  const std::size_t h = output.dim(0), w = output.dim(1), c = reference.dim(2);
  SharpnessReport rep;
  rep.si_output = blur_metric(output);
  double total = 0.0;
  bool ok = c > 0;
  std::vector<double> band(h * w);
  for (std::size_t b = 0; b < c && ok; ++b) {
    for (std::size_t p = 0; p < h * w; ++p) band[p] = reference.at(p * c + b);
    const auto sm = blur_metric(Tensor::from_data({h, w}, band));
    ok = sm.has_value();
    if (ok) total += *sm;
  }
  if (ok) rep.si_reference = total / static_cast<double>(c);
  if (rep.si_output && rep.si_reference && *rep.si_reference > 0.0) {
    rep.gsi = *rep.si_output / *rep.si_reference;
    rep.effective_resolution = gsi_to_resolution(*rep.gsi);
  }
  return rep;
}

Tensor gaussian_blur(const Tensor& img, double sigma) {
  require(img.rank() == 2, ErrorCode::kShapeMismatch, "gaussian_blur: expected [H, W]");
  require(sigma > 0.0, ErrorCode::kInvalidArgument, "gaussian_blur: sigma must be positive");
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    norm += v;
  }
  for (double& v : k) v /= norm;
  const auto h = static_cast<std::ptrdiff_t>(img.dim(0)), w = static_cast<std::ptrdiff_t>(img.dim(1));
  const auto src = img.data();
  std::vector<double> tmp(src.size()), out(src.size());
  for (std::ptrdiff_t i = 0; i < h; ++i) {
    for (std::ptrdiff_t j = 0; j < w; ++j) {
      double s = 0.0;
      for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
        s += k[static_cast<std::size_t>(t + radius)] *
             src[static_cast<std::size_t>(i * w + std::clamp(j + t, std::ptrdiff_t{0}, w - 1))];
      }
      tmp[static_cast<std::size_t>(i * w + j)] = s;
    }
  }
  for (std::ptrdiff_t i = 0; i < h; ++i) {
    for (std::ptrdiff_t j = 0; j < w; ++j) {
      double s = 0.0;
      for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
        s += k[static_cast<std::size_t>(t + radius)] *
             tmp[static_cast<std::size_t>(std::clamp(i + t, std::ptrdiff_t{0}, h - 1) * w + j)];
      }
      out[static_cast<std::size_t>(i * w + j)] = s;
    }
  }
  return Tensor::from_data(img.shape(), std::move(out));
}

// ---- rasters -------------------------------------------------------------

Tensor cdf_upscale(const Tensor& highres, std::size_t factor, double q) {
  require(highres.rank() == 2, ErrorCode::kShapeMismatch, "cdf_upscale: expected [H, W]");
  require(factor > 0 && highres.dim(0) % factor == 0 && highres.dim(1) % factor == 0, ErrorCode::kInvalidArgument,
          "cdf_upscale: factor must divide both extents");
  require(q > 0.0 && q <= 1.0, ErrorCode::kInvalidArgument, "cdf_upscale: q must be in (0, 1]");
  const std::size_t h = highres.dim(0) / factor, w = highres.dim(1) / factor, wide = highres.dim(1);
  const auto n = static_cast<double>(factor * factor);
  std::vector<double> out(h * w);
  std::vector<long long> levels(factor * factor);
  for (std::size_t bi = 0; bi < h; ++bi) {
    for (std::size_t bj = 0; bj < w; ++bj) {
      std::size_t k = 0;
      for (std::size_t i = 0; i < factor; ++i) {
        for (std::size_t j = 0; j < factor; ++j) {
          const double v = highres.at((bi * factor + i) * wide + bj * factor + j);
          require(std::isfinite(v), ErrorCode::kNumeric, "cdf_upscale: non-finite value");
          levels[k++] = std::llround(v * 10.0);
        }
      }
      std::sort(levels.begin(), levels.end());
      std::size_t idx = 0;
      // Walk distinct levels until the cumulative share reaches q.
      while (true) {
        std::size_t last = idx;
        while (last + 1 < levels.size() && levels[last + 1] == levels[idx]) ++last;
        if (static_cast<double>(last + 1) / n >= q || last + 1 == levels.size()) {
          out[bi * w + bj] = static_cast<double>(levels[idx]) / 10.0;
          break;
        }
        idx = last + 1;
      }
    }
  }
  return Tensor::from_data({h, w}, std::move(out));
}

Tensor chm(const Tensor& dsm, const Tensor& dem) {
  require(dsm.shape() == dem.shape(), ErrorCode::kShapeMismatch,
          "chm: dsm " + to_string(dsm.shape()) + " vs dem " + to_string(dem.shape()));
  std::vector<double> out(dsm.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(dsm.at(i) - dem.at(i), 0.0);
  return Tensor::from_data(dsm.shape(), std::move(out));
}

// ---- reports -------------------------------------------------------------

std::vector<BinnedRow> binned_report(std::span<const double> y, std::span<const double> yhat,
                                     std::span<const double> edges) {
  require(y.size() == yhat.size(), ErrorCode::kShapeMismatch, "binned_report: y and yhat lengths differ");
  require(edges.size() >= 2, ErrorCode::kInvalidArgument, "binned_report: need at least two edges");
  for (std::size_t k = 1; k < edges.size(); ++k) {
    require(edges[k] > edges[k - 1], ErrorCode::kInvalidArgument, "binned_report: edges must ascend");
  }
  std::vector<BinnedRow> rows;
  std::vector<double> by, bs;
  for (std::size_t k = 0; k + 1 < edges.size(); ++k) {
    by.clear();
    bs.clear();
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] >= edges[k] && y[i] < edges[k + 1]) {
        by.push_back(y[i]);
        bs.push_back(yhat[i]);
      }
    }
    BinnedRow row{edges[k], edges[k + 1], by.size(), std::nullopt};
    if (by.size() >= 2) row.stats = summary_stats(by, bs);
    rows.push_back(row);
  }
  return rows;
}

std::vector<double> five_metre_edges(double max_height) {
  std::vector<double> e{0.0};
  while (e.back() < max_height) e.push_back(e.back() + 5.0);
  if (e.size() < 2) e.push_back(5.0);
  return e;
}

namespace {

std::string num(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : "NA"; }

}  // namespace

void write_report_csv(std::ostream& os, const MetricsReport& r) {
  os << "n,r,rmse,rmspe,bias,sdsd,lcs,sd_measured,sd_estimated\n"
     << r.n << ',' << opt_num(r.r) << ',' << num(r.rmse) << ',' << opt_num(r.rmspe) << ',' << num(r.bias) << ','
     << num(r.sdsd) << ',' << num(r.lcs) << ',' << num(r.sd_measured) << ',' << num(r.sd_estimated) << '\n';
}

void write_binned_csv(std::ostream& os, const std::vector<BinnedRow>& rows) {
  os << "range,n,r,rmse,rmspe,bias,sdsd,lcs\n";
  for (const auto& row : rows) {
    os << num(row.lo) << '-' << num(row.hi) << ',' << row.n << ',';
    if (row.stats) {
      const auto& s = *row.stats;
      os << opt_num(s.r) << ',' << num(s.rmse) << ',' << opt_num(s.rmspe) << ',' << num(s.bias) << ','
         << num(s.sdsd) << ',' << num(s.lcs) << '\n';
    } else {
      os << "NA,NA,NA,NA,NA,NA\n";
    }
  }
}

}  // namespace canopy::metrics
