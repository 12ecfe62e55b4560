#pragma once

#include <cstddef>
#include <vector>

#include "canopy/tensor.hpp"

namespace canopy::optim {

/// Per-parameter moment buffers, in parameter order, plus the update count.
struct OptimizerState {
  std::vector<std::vector<double>> slots;
  std::size_t steps = 0;
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  /// Applies one update with learning rate `lr` to every parameter that holds
  /// a gradient, then leaves gradients untouched.
  virtual void step(double lr) = 0;
  void zero_grad();
  virtual OptimizerState state() const = 0;
  /// Throws unless the slot layout matches this optimizer's.
  virtual void load_state(const OptimizerState& s) = 0;

 protected:
  explicit Optimizer(std::vector<Tensor> params) : params_(std::move(params)) {}
  std::vector<Tensor> params_;
};

class Sgd final : public Optimizer {
 public:
  Sgd(std::vector<Tensor> params, double momentum = 0.9, double weight_decay = 0.0);
  void step(double lr) override;
  OptimizerState state() const override;
  void load_state(const OptimizerState& s) override;

 private:
  double momentum_, weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

/// Adam with decoupled weight decay.
class AdamW final : public Optimizer {
 public:
  AdamW(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999, double weight_decay = 0.01,
        double eps = 1e-8);
  void step(double lr) override;
  OptimizerState state() const override;
  void load_state(const OptimizerState& s) override;

 private:
  double beta1_, beta2_, weight_decay_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// base * (1 + cos(pi * progress)) / 2, progress clamped to [0, 1].
double cosine_lr(double base, double progress);

struct WarmupCosine {
  double start = 1e-6;
  double peak = 1e-4;
  double warmup_epochs = 20.0;
  double total_epochs = 250.0;

  /// Linear start -> peak over the warmup, cosine decay from peak afterwards.
  double operator()(double epoch) const;
};

}  // namespace canopy::optim
