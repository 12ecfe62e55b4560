#include "canopy/losses.hpp"

#include <cmath>

#include "canopy/nn.hpp"
#include "canopy/ops.hpp"

namespace canopy::losses {

using detail::attach;
using detail::grad_sink;
using detail::make_output;
using detail::result_dtype;

double HeightBinning::lower(std::size_t j) const { return std::max(0.0, base_edges.at(j) - overlap); }
double HeightBinning::upper(std::size_t j) const { return base_edges.at(j + 1) + overlap; }

void HeightBinning::validate() const {
  require(base_edges.size() >= 2, ErrorCode::kInvalidArgument, "height binning needs at least two edges");
  require(base_edges.front() >= 0.0, ErrorCode::kInvalidArgument, "height bin edges must be non-negative");
  for (std::size_t i = 1; i < base_edges.size(); ++i)
    require(base_edges[i] > base_edges[i - 1], ErrorCode::kInvalidArgument, "height bin edges must ascend strictly");
  require(overlap >= 0.0 && std::isfinite(overlap), ErrorCode::kInvalidArgument, "bin overlap must be >= 0");
}

HeightBinning default_binning() {
  HeightBinning b;
  for (int i = 0; i <= 10; ++i) b.base_edges.push_back(6.0 * i);
  b.overlap = 1.5;
  return b;
}

std::vector<double> bin_assign(double h, const HeightBinning& bins) {
  require(std::isfinite(h) && h >= 0.0, ErrorCode::kInvalidArgument, "bin_assign: height must be finite and >= 0");
  const double top = bins.base_edges.back();
  const double hc = std::max(std::min(h, std::nextafter(top, 0.0)), bins.base_edges.front());
  std::vector<double> p(bins.k(), 0.0);
  std::size_t hits = 0;
  for (std::size_t j = 0; j < bins.k(); ++j)
    if (hc >= bins.lower(j) && hc < bins.upper(j)) {
      p[j] = 1.0;
      ++hits;
    }
  require(hits > 0, ErrorCode::kInternal, "bin_assign: height not covered by any bin");
  for (auto& v : p) v /= static_cast<double>(hits);
  return p;
}

Tensor class_targets(const Tensor& heights, const Tensor& mask, const HeightBinning& bins) {
  require(heights.numel() == mask.numel(), ErrorCode::kShapeMismatch, "class_targets: mask size differs");
  const std::size_t k = bins.k();
  Shape shape = heights.shape();
  shape.push_back(k);
  std::vector<double> out(heights.numel() * k, 0.0);
  for (std::size_t i = 0; i < heights.numel(); ++i) {
    if (mask.data()[i] == 0.0) continue;
    auto p = bin_assign(std::max(0.0, heights.data()[i]), bins);
    std::copy(p.begin(), p.end(), out.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  return Tensor::from_data(std::move(shape), std::move(out));
}

std::vector<std::size_t> valid_indices(const Tensor& mask) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < mask.numel(); ++i)
    if (mask.data()[i] != 0.0) idx.push_back(i);
  return idx;
}

namespace {

std::vector<std::size_t> require_valid(const Tensor& mask, const char* who) {
  auto idx = valid_indices(mask);
  require(!idx.empty(), ErrorCode::kInvalidArgument, std::string(who) + ": mask has no valid pixel");
  return idx;
}

Tensor huber_elementwise(const Tensor& r, double delta) {
  std::vector<double> out(r.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double a = std::fabs(r.data()[i]);
    out[i] = a < delta ? 0.5 * a * a : delta * (a - 0.5 * delta);
  }
  Tensor y = make_output(r.shape(), std::move(out), result_dtype({&r}), "huber");
  auto pr = r.ptr();
  attach(y, "huber", {r}, [pr, delta](std::span<const double> g) {
    auto sink = grad_sink(*pr);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = pr->data[i];
      sink[i] += g[i] * (std::fabs(x) < delta ? x : (x > 0 ? delta : -delta));
    }
  });
  return y;
}

constexpr double kBranchTol = 1e-9;

double rho_generic(double x, double alpha) {
  const double b = std::fabs(alpha - 2.0);
  return b / alpha * (std::pow(x * x / b + 1.0, 0.5 * alpha) - 1.0);
}

double rho(double x, double alpha) {
  if (std::fabs(alpha - 2.0) < kBranchTol) return 0.5 * x * x;
  if (std::fabs(alpha) < kBranchTol) return std::log(0.5 * x * x + 1.0);
  return rho_generic(x, alpha);
}

double drho_dx(double x, double alpha) {
  if (std::fabs(alpha - 2.0) < kBranchTol) return x;
  if (std::fabs(alpha) < kBranchTol) return 2.0 * x / (x * x + 2.0);
  const double b = std::fabs(alpha - 2.0);
  return x * std::pow(x * x / b + 1.0, 0.5 * alpha - 1.0);
}

double drho_dalpha(double x, double alpha) {
  if (std::fabs(alpha - 2.0) < kBranchTol || std::fabs(alpha) < kBranchTol) {
    // Removable singularities: difference the generic form across the branch point.
    constexpr double h = 1e-5;
    return (rho_generic(x, alpha + h) - rho_generic(x, alpha - h)) / (2 * h);
  }
  const double b = std::fabs(alpha - 2.0);
  const double s = alpha > 2.0 ? 1.0 : -1.0;
  const double z = x * x / b + 1.0;
  const double zp = std::pow(z, 0.5 * alpha);
  return (s * alpha - b) / (alpha * alpha) * (zp - 1.0) +
         b / alpha * zp * (0.5 * std::log(z) - 0.5 * alpha * x * x * s / (b * b * z));
}

}  // namespace

Tensor huber(const Tensor& pred, const Tensor& target, const Tensor& mask, double delta) {
  require(pred.numel() == target.numel() && pred.numel() == mask.numel(), ErrorCode::kShapeMismatch,
          "huber: pred " + to_string(pred.shape()) + ", target " + to_string(target.shape()) + ", mask " +
              to_string(mask.shape()));
  require(delta > 0.0, ErrorCode::kInvalidArgument, "huber: delta must be positive");
  auto idx = require_valid(mask, "huber");
  auto r = ops::sub(ops::gather_rows(pred, 1, idx), ops::gather_rows(target, 1, idx));
  return ops::mean(huber_elementwise(r, delta));
}

Tensor weighted_cross_entropy(const Tensor& probs, const Tensor& t, const Tensor& mask, const Tensor& w) {
  const std::size_t k = w.numel();
  require(probs.numel() == t.numel() && probs.numel() == mask.numel() * k, ErrorCode::kShapeMismatch,
          "weighted_cross_entropy: probs " + to_string(probs.shape()) + ", targets " + to_string(t.shape()) +
              ", " + std::to_string(k) + " weights");
  for (double v : w.data()) require(v >= 0.0, ErrorCode::kInvalidArgument, "class weights must be >= 0");
  auto idx = require_valid(mask, "weighted_cross_entropy");
  auto p = ops::gather_rows(probs, k, idx);
  auto tt = ops::gather_rows(t, k, idx);
  auto logp = ops::log(ops::add(p, 1e-12));
  auto terms = ops::mul(tt, ops::scale_last(logp, w));
  return ops::mul(ops::sum(terms), -1.0 / static_cast<double>(idx.size()));
}

Tensor cross_entropy(const Tensor& probs, const Tensor& t, const Tensor& mask) {
  require(mask.numel() > 0 && probs.numel() % mask.numel() == 0, ErrorCode::kShapeMismatch,
          "cross_entropy: probs and mask disagree");
  return weighted_cross_entropy(probs, t, mask, Tensor::full({probs.numel() / mask.numel()}, 1.0));
}

Tensor batch_class_weights(const Tensor& t, const Tensor& mask) {
  require(mask.numel() > 0 && t.numel() % mask.numel() == 0, ErrorCode::kShapeMismatch,
          "batch_class_weights: targets and mask disagree");
  const std::size_t k = t.numel() / mask.numel();
  auto idx = require_valid(mask, "batch_class_weights");
  std::vector<double> count(k, 0.0);
  for (auto i : idx)
    for (std::size_t j = 0; j < k; ++j) count[j] += t.data()[i * k + j];
  std::vector<double> w(k, 0.0);
  const double n = static_cast<double>(idx.size());
  for (std::size_t j = 0; j < k; ++j) w[j] = count[j] > 0.0 ? n / count[j] : 0.0;
  return Tensor::from_data({k}, std::move(w));
}

AdaptiveLossState AdaptiveLossState::make(double alpha, double c) {
  require(c > 1e-6, ErrorCode::kInvalidArgument, "adaptive loss scale must exceed 1e-6");
  AdaptiveLossState s;
  s.alpha = Tensor::scalar(alpha, true);
  s.raw_c = Tensor::scalar(std::log(std::expm1(c - 1e-6)), true);
  return s;
}

Tensor AdaptiveLossState::c() const { return ops::add(nn::softplus(raw_c), 1e-6); }

Tensor adaptive_rho(const Tensor& r, const Tensor& alpha, const Tensor& c) {
  require(alpha.numel() == 1 && c.numel() == 1, ErrorCode::kShapeMismatch, "adaptive_rho: alpha and c are scalars");
  const double a = alpha.item();
  const double cv = c.item();
  require(cv > 0.0, ErrorCode::kInvalidArgument, "adaptive loss scale must be positive");
  std::vector<double> out(r.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = rho(r.data()[i] / cv, a);
  Tensor y = make_output(r.shape(), std::move(out), result_dtype({&r, &alpha, &c}), "adaptive_rho");
  auto pr = r.ptr();
  auto pa = alpha.ptr();
  auto pc = c.ptr();
  attach(y, "adaptive_rho", {r, alpha, c}, [pr, pa, pc, a, cv](std::span<const double> g) {
    auto sr = grad_sink(*pr);
    auto sa = grad_sink(*pa);
    auto sc = grad_sink(*pc);
    double ga = 0.0, gc = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = pr->data[i] / cv;
      const double dx = drho_dx(x, a);
      if (!sr.empty()) sr[i] += g[i] * dx / cv;
      if (!sa.empty()) ga += g[i] * drho_dalpha(x, a);
      gc -= g[i] * x * dx / cv;
    }
    if (!sa.empty()) sa[0] += ga;
    if (!sc.empty()) sc[0] += gc;
  });
  return y;
}

Tensor adaptive_loss(const Tensor& pred, const Tensor& target, const Tensor& mask, const AdaptiveLossState& s) {
  require(pred.numel() == target.numel() && pred.numel() == mask.numel(), ErrorCode::kShapeMismatch,
          "adaptive_loss: pred, target and mask sizes differ");
  auto idx = require_valid(mask, "adaptive_loss");
  auto r = ops::sub(ops::gather_rows(pred, 1, idx), ops::gather_rows(target, 1, idx));
  return ops::mean(adaptive_rho(r, s.alpha, s.c()));
}

void HyTecLossConfig::validate() const {
  for (double b : betas) require(b >= 0.0, ErrorCode::kInvalidArgument, "loss betas must be >= 0");
  require(alpha_cr >= 0.0, ErrorCode::kInvalidArgument, "alpha_cr must be >= 0");
  require(delta > 0.0, ErrorCode::kInvalidArgument, "huber delta must be positive");
  require(consensus_tol > 0.0, ErrorCode::kInvalidArgument, "consensus tolerance must be positive");
}

LossParts combined_cr_loss(const Tensor& probs, const Tensor& reg, const DenseTarget& target,
                           const HyTecLossConfig& cfg, RegKind kind, const AdaptiveLossState* adaptive) {
  auto w = batch_class_weights(target.classes, target.mask);
  LossParts out;
  out.ce = weighted_cross_entropy(probs, target.classes, target.mask, w);
  if (kind == RegKind::kHuber) {
    out.reg = huber(reg, target.heights, target.mask, cfg.delta);
  } else {
    require(adaptive != nullptr, ErrorCode::kInvalidArgument, "adaptive regression needs an AdaptiveLossState");
    out.reg = adaptive_loss(reg, target.heights, target.mask, *adaptive);
  }
  out.total = ops::add(out.ce, ops::mul(out.reg, cfg.alpha_cr));
  return out;
}

Consensus kd_teacher_consensus(const Tensor& t1, const Tensor& t2, double tol) {
  require(t1.shape() == t2.shape(), ErrorCode::kShapeMismatch, "teacher maps differ in shape");
  require(tol > 0.0, ErrorCode::kInvalidArgument, "consensus tolerance must be positive");
  std::vector<double> value(t1.numel(), 0.0), valid(t1.numel(), 0.0);
  for (std::size_t i = 0; i < t1.numel(); ++i) {
    const double a = t1.data()[i], b = t2.data()[i];
    const double d = std::fabs(a - b) / (0.5 * (a + b) + 1e-6);
    if (d >= 0.0 && d < tol) {
      valid[i] = 1.0;
      value[i] = 0.5 * (a + b);
    }
  }
  return {Tensor::from_data(t1.shape(), std::move(value)), Tensor::from_data(t1.shape(), std::move(valid))};
}

Consensus downsample_consensus(const Consensus& c, std::size_t h, std::size_t w) {
  NoGradScope no_grad;
  Shape with_channel = c.value.shape();
  with_channel.push_back(1);
  auto num = nn::bilinear_resize(ops::reshape(ops::mul(c.value, c.valid), with_channel), h, w);
  auto den = nn::bilinear_resize(ops::reshape(c.valid, with_channel), h, w);
  Shape out_shape = num.shape();
  out_shape.pop_back();
  std::vector<double> value(num.numel(), 0.0), valid(num.numel(), 0.0);
  for (std::size_t i = 0; i < num.numel(); ++i)
    if (den.data()[i] >= 0.5) {
      valid[i] = 1.0;
      value[i] = num.data()[i] / den.data()[i];
    }
  return {Tensor::from_data(out_shape, std::move(value)), Tensor::from_data(std::move(out_shape), std::move(valid))};
}

HyTecLossParts hytec_total_loss(const std::array<Tensor, 3>& aux_pred, const std::array<Consensus, 3>& aux_target,
                                const Tensor& probs, const Tensor& reg, const DenseTarget& target,
                                const HyTecLossConfig& cfg, const AdaptiveLossState& adaptive) {
  cfg.validate();
  HyTecLossParts out;
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    if (valid_indices(aux_target[i].valid).empty()) {
      out.aux[i] = Tensor::scalar(0.0);
      continue;
    }
    out.aux[i] = huber(aux_pred[i], aux_target[i].value, aux_target[i].valid, cfg.delta);
    total = ops::add(total, ops::mul(out.aux[i], cfg.betas[i]));
  }
  if (valid_indices(target.mask).empty()) {
    out.ce = Tensor::scalar(0.0);
    out.reg = Tensor::scalar(0.0);
    out.total = total;
    return out;
  }
  auto main = combined_cr_loss(probs, reg, target, cfg, RegKind::kAdaptive, &adaptive);
  out.ce = main.ce;
  out.reg = main.reg;
  out.total = ops::add(total, ops::mul(main.total, cfg.betas[3]));
  return out;
}

}  // namespace canopy::losses
