#pragma once

#include <cstddef>

namespace canopy::detail {

/// C (m x n) {=, +=} op(A) . op(B), row-major, where op(A) is m x k and op(B)
/// is k x n. `trans_a`/`trans_b` read A as k x m and B as n x k.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool trans_a, bool trans_b, bool accumulate);

}  // namespace canopy::detail
