#pragma once

#include <cstddef>
#include <vector>

#include "canopy/tensor.hpp"

// Differentiable tensor primitives. Binary elementwise ops accept equal
// shapes or a single-element operand broadcast over the other.
namespace canopy::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Errors on any zero in the divisor.
Tensor div(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, double s);
Tensor mul(const Tensor& a, double s);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
/// Errors on non-positive input.
Tensor log(const Tensor& a);
/// Subgradient 0 at 0.
Tensor abs(const Tensor& a);
/// max(a, lo); subgradient 0 at the kink.
Tensor clamp_min(const Tensor& a, double lo);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);

/// Elementwise select: cond[i] != 0 ? a[i] : b[i]. `cond` is never differentiated.
Tensor where(const std::vector<unsigned char>& cond, const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// [m x k] . [k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// 2-D transpose.
Tensor transpose(const Tensor& a);
/// Adds b[n] along the trailing axis of a (any rank, trailing extent n).
Tensor add_bias(const Tensor& a, const Tensor& b);
/// Multiplies by s[n] along the trailing axis.
Tensor scale_last(const Tensor& a, const Tensor& s);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Rows of `a` viewed as [numel/row, row], picked by index; result [n, row].
Tensor gather_rows(const Tensor& a, std::size_t row, const std::vector<std::size_t>& index);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, s); }

}  // namespace canopy::ops
