#include "canopy/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace canopy {

GradCheckResult grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt,
                           const GradCheckOptions& options) {
  require(options.eps > 0.0, ErrorCode::kInvalidArgument, "grad_check: eps must be positive");
  for (const auto& t : wrt)
    require(t.defined() && t.requires_grad(), ErrorCode::kInvalidArgument,
            "grad_check: every checked tensor must require grad");

  std::vector<std::vector<double>> analytic;
  {
    for (auto t : wrt) t.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f();
    require(y.numel() == 1, ErrorCode::kInvalidArgument, "grad_check: f must return a scalar");
    tape.backward(y);
    for (const auto& t : wrt)
      analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                         : std::vector<double>(t.numel(), 0.0));
  }

  auto eval = [&]() {
    NoGradScope nograd;
    Tensor y = f();
    return y.item();
  };

  std::mt19937_64 rng(options.seed);
  GradCheckResult result;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    Tensor t = wrt[k];
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords_per_input && coords.size() > options.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_input);
    }
    auto data = t.data_mut();
    for (std::size_t i : coords) {
      const double saved = data[i];
      data[i] = saved + options.eps;
      const double up = eval();
      data[i] = saved - options.eps;
      const double down = eval();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double err = std::fabs(analytic[k][i] - numeric) / std::max(1.0, std::fabs(numeric));
      ++result.coords_checked;
      if (err > result.max_rel_error || result.worst.empty()) {
        if (err >= result.max_rel_error) {
          result.max_rel_error = err;
          result.worst = std::to_string(k) + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  return result;
}

}  // namespace canopy
