#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "canopy/tensor.hpp"

namespace canopy::metrics {

/// Agreement between measured heights y and estimates yhat. SDs are
/// population (1/N) deviations, so rmse^2 = bias^2 + sdsd + lcs exactly in
/// real arithmetic.
struct MetricsReport {
  std::optional<double> r;      // missing when either vector is constant
  double rmse = 0.0;
  std::optional<double> rmspe;  // percent, over pairs with y >= 1 m; missing if none
  double bias = 0.0;            // mean(yhat - y)
  double sdsd = 0.0;
  double lcs = 0.0;
  double sd_measured = 0.0;
  double sd_estimated = 0.0;
  std::size_t n = 0;
};

MetricsReport summary_stats(std::span<const double> y, std::span<const double> yhat);

struct MsdParts {
  double mse = 0.0;
  double bias2 = 0.0;
  double sdsd = 0.0;
  double lcs = 0.0;
  double residual = 0.0;  // mse - (bias2 + sdsd + lcs)
};

MsdParts msd_decomposition(std::span<const double> y, std::span<const double> yhat);

/// No-reference blur estimate in [0, 1] of an [H, W] image (higher is
/// blurrier): per direction, 1 - (neighbor variation lost to a 9-tap box
/// re-blur) / (total neighbor variation); the larger direction wins.
/// Missing when the image has no variation in either direction.
std::optional<double> blur_metric(const Tensor& img);

struct SharpnessReport {
  std::optional<double> si_output;
  std::optional<double> si_reference;
  std::optional<double> gsi;
  std::optional<double> effective_resolution;  // meters
};

/// Effective ground resolution for a GSI value by piecewise-linear
/// interpolation of the calibration table; clamps to [10, 40] m.
double gsi_to_resolution(double gsi);

/// output [H, W]; reference [H, W, C] holds the 10 m bands, whose blur
/// metrics are averaged.
SharpnessReport gsi(const Tensor& output, const Tensor& reference);

/// Separable Gaussian blur of an [H, W] image, radius ceil(3 sigma),
/// replicated borders.
Tensor gaussian_blur(const Tensor& img, double sigma);

/// Per factor x factor block, the smallest 0.1 m level whose empirical CDF
/// reaches q. Values are snapped to the nearest 0.1 m level first.
Tensor cdf_upscale(const Tensor& highres, std::size_t factor, double q = 0.97);

/// max(dsm - dem, 0).
Tensor chm(const Tensor& dsm, const Tensor& dem);

struct BinnedRow {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t n = 0;
  std::optional<MetricsReport> stats;  // missing for n < 2
};

/// Pairs bucketed by y into [edge_k, edge_{k+1}).
std::vector<BinnedRow> binned_report(std::span<const double> y, std::span<const double> yhat,
                                     std::span<const double> edges);

/// 0, 5, ..., up to the first edge >= max_height.
std::vector<double> five_metre_edges(double max_height);

void write_report_csv(std::ostream& os, const MetricsReport& r);
/// Columns: range, n, r, rmse, rmspe, bias, sdsd, lcs; "NA" marks missing values.
void write_binned_csv(std::ostream& os, const std::vector<BinnedRow>& rows);

}  // namespace canopy::metrics
