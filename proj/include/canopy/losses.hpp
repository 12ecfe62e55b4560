#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "canopy/tensor.hpp"

// Training objectives. Masks are 0/1 tensors over the pixel grid ([H, W] or
// [N, H, W]); masked-out pixels are dropped before any arithmetic, so they
// cannot influence a value or a gradient.
namespace canopy::losses {

/// K overlapping height intervals. Bin j covers
/// [max(0, edge[j] - overlap), edge[j+1] + overlap).
struct HeightBinning {
  std::vector<double> base_edges;
  double overlap = 0.0;

  std::size_t k() const { return base_edges.size() - 1; }
  double lower(std::size_t j) const;
  double upper(std::size_t j) const;
  /// Throws unless edges are strictly ascending, non-negative and overlap >= 0.
  void validate() const;
};

/// Ten 6 m bins over [0, 60) with 1.5 m overlap on each side.
HeightBinning default_binning();

/// Uniform mass over every expanded bin containing min(h, last edge - eps).
std::vector<double> bin_assign(double h, const HeightBinning& bins);

/// Soft class targets [..., K] for a height map; rows outside the mask are zero.
Tensor class_targets(const Tensor& heights, const Tensor& mask, const HeightBinning& bins);

/// Flat indices of non-zero mask entries.
std::vector<std::size_t> valid_indices(const Tensor& mask);

/// Mean Huber penalty over valid pixels.
Tensor huber(const Tensor& pred, const Tensor& target, const Tensor& mask, double delta);

/// -(1/N_valid) sum_valid sum_j w_j t_ij log(p_ij + 1e-12).
Tensor weighted_cross_entropy(const Tensor& probs, const Tensor& t, const Tensor& mask, const Tensor& w);
Tensor cross_entropy(const Tensor& probs, const Tensor& t, const Tensor& mask);

/// w_j = N_valid / count_j with count_j the soft mass of class j; 0 for absent classes.
Tensor batch_class_weights(const Tensor& t, const Tensor& mask);

/// Learnable shape alpha and scale c = softplus(raw_c) + 1e-6.
struct AdaptiveLossState {
  Tensor alpha;  // [1]
  Tensor raw_c;  // [1]

  static AdaptiveLossState make(double alpha, double c);
  Tensor c() const;
};

/// Elementwise robust penalty rho(r; alpha, c), differentiable in all three.
Tensor adaptive_rho(const Tensor& r, const Tensor& alpha, const Tensor& c);
/// Mean of rho(pred - target) over valid pixels.
Tensor adaptive_loss(const Tensor& pred, const Tensor& target, const Tensor& mask, const AdaptiveLossState& s);

enum class RegKind { kHuber, kAdaptive };

struct HyTecLossConfig {
  std::array<double, 4> betas{0.7, 0.7, 0.7, 1.0};
  double alpha_cr = 1.0;
  double delta = 3.0;
  double consensus_tol = 0.10;
  void validate() const;
};

struct LossParts {
  Tensor total;
  Tensor ce;
  Tensor reg;
};

/// Targets for the dual head: soft classes [..., K], heights and validity.
struct DenseTarget {
  Tensor classes;
  Tensor heights;
  Tensor mask;
};

/// l_CE (batch class weights) + alpha_cr * l_R.
LossParts combined_cr_loss(const Tensor& probs, const Tensor& reg, const DenseTarget& target,
                           const HyTecLossConfig& cfg, RegKind kind, const AdaptiveLossState* adaptive);

struct Consensus {
  Tensor value;
  Tensor valid;
};

/// Mean of two teacher maps where their symmetric relative difference is below tol.
Consensus kd_teacher_consensus(const Tensor& t1, const Tensor& t2, double tol);

/// Bilinear downsampling of a consensus map: masked values and the mask are
/// resampled separately, values renormalized, and cells with resampled mask
/// weight >= 0.5 kept.
Consensus downsample_consensus(const Consensus& c, std::size_t h, std::size_t w);

struct HyTecLossParts {
  Tensor total;
  std::array<Tensor, 3> aux;
  Tensor ce;
  Tensor reg;
};

/// sum_i beta_i l_H(aux_i) + beta_4 (l_CE + alpha_cr l_RA). A term whose
/// target mask is empty contributes zero.
HyTecLossParts hytec_total_loss(const std::array<Tensor, 3>& aux_pred, const std::array<Consensus, 3>& aux_target,
                                const Tensor& probs, const Tensor& reg, const DenseTarget& target,
                                const HyTecLossConfig& cfg, const AdaptiveLossState& adaptive);

}  // namespace canopy::losses
