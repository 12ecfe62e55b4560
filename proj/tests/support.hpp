#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "canopy/tensor.hpp"

namespace canopy::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

inline double inner(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (std::bit_cast<std::uint64_t>(a.data()[i]) != std::bit_cast<std::uint64_t>(b.data()[i])) return false;
  return true;
}

/// Central differences of a scalar function of one flat coordinate; test-only
/// oracle, independent of the library grad_check.
template <class F>
double central_difference(Tensor x, std::size_t i, F&& f, double eps = 1e-5) {
  auto d = x.data_mut();
  const double saved = d[i];
  d[i] = saved + eps;
  const double up = f();
  d[i] = saved - eps;
  const double down = f();
  d[i] = saved;
  return (up - down) / (2 * eps);
}

}  // namespace canopy::testing
