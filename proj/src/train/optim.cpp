#include "canopy/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "canopy/error.hpp"

namespace canopy::optim {

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Sgd::Sgd(std::vector<Tensor> params, double momentum, double weight_decay)
    : Optimizer(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  require(momentum >= 0.0 && momentum < 1.0, ErrorCode::kInvalidArgument, "sgd momentum must be in [0, 1)");
  for (auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

void Sgd::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto w = p.data_mut();
    auto g = p.grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j] + weight_decay_ * w[j];
      w[j] -= lr * v[j];
    }
  }
}

AdamW::AdamW(std::vector<Tensor> params, double beta1, double beta2, double weight_decay, double eps)
    : Optimizer(std::move(params)), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {
  for (auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto w = p.data_mut();
    auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      w[j] -= lr * weight_decay_ * w[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

namespace {

void check_slots(const OptimizerState& s, const std::vector<Tensor>& params, std::size_t per_param) {
  require(s.slots.size() == params.size() * per_param, ErrorCode::kState, "optimizer state has the wrong slot count");
  for (std::size_t i = 0; i < s.slots.size(); ++i) {
    require(s.slots[i].size() == params[i / per_param].numel(), ErrorCode::kState,
            "optimizer state slot " + std::to_string(i) + " has the wrong size");
  }
}

}  // namespace

OptimizerState Sgd::state() const { return {velocity_, 0}; }

void Sgd::load_state(const OptimizerState& s) {
  check_slots(s, params_, 1);
  velocity_ = s.slots;
}

OptimizerState AdamW::state() const {
  OptimizerState s;
  s.steps = t_;
  for (std::size_t i = 0; i < m_.size(); ++i) {
    s.slots.push_back(m_[i]);
    s.slots.push_back(v_[i]);
  }
  return s;
}

void AdamW::load_state(const OptimizerState& s) {
  check_slots(s, params_, 2);
  for (std::size_t i = 0; i < m_.size(); ++i) {
    m_[i] = s.slots[2 * i];
    v_[i] = s.slots[2 * i + 1];
  }
  t_ = s.steps;
}

double cosine_lr(double base, double progress) {
  const double p = std::clamp(progress, 0.0, 1.0);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

double WarmupCosine::operator()(double epoch) const {
  if (epoch < warmup_epochs) return start + (peak - start) * epoch / warmup_epochs;
  const double span = total_epochs - warmup_epochs;
  return span <= 0.0 ? peak : cosine_lr(peak, (epoch - warmup_epochs) / span);
}

}  // namespace canopy::optim
