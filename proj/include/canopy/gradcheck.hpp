#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "canopy/tensor.hpp"

namespace canopy {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::string worst;  // "<input index>[<flat index>]"
};

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates sampled per input tensor; 0 checks every coordinate.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 7;
};

/// Compares the tape gradient of the scalar `f()` against central finite
/// differences for every tensor in `wrt` (each must require grad). The error
/// per coordinate is |analytic - numeric| / max(1, |numeric|).
GradCheckResult grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt,
                           const GradCheckOptions& options = {});

}  // namespace canopy
