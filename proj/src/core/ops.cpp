#include "canopy/ops.hpp"

#include <cmath>
#include <numeric>

#include "gemm.hpp"

namespace canopy::ops {

using detail::attach;
using detail::grad_sink;
using detail::make_output;
using detail::result_dtype;

namespace {

struct Broadcast {
  Shape shape;
  bool a_scalar = false;
  bool b_scalar = false;
  std::size_t n = 0;
};

Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast bc;
  if (a.shape() == b.shape()) {
    bc.shape = a.shape();
  } else if (b.numel() == 1) {
    bc.shape = a.shape();
    bc.b_scalar = true;
  } else if (a.numel() == 1) {
    bc.shape = b.shape();
    bc.a_scalar = true;
  } else {
    fail(ErrorCode::kShapeMismatch,
         std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  }
  bc.n = numel(bc.shape);
  return bc;
}

// Accumulates g[i] * scale(i) into sink, folding to one value for a broadcast scalar.
template <class Scale>
void accumulate(std::span<double> sink, bool is_scalar, std::span<const double> g, Scale&& scale) {
  if (sink.empty()) return;
  if (is_scalar) {
    double s = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * scale(i);
    sink[0] += s;
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) sink[i] += g[i] * scale(i);
  }
}

template <class Fwd>
std::vector<double> binary_values(const Tensor& a, const Tensor& b, const Broadcast& bc, Fwd&& f) {
  std::vector<double> out(bc.n);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < bc.n; ++i) out[i] = f(ad[bc.a_scalar ? 0 : i], bd[bc.b_scalar ? 0 : i]);
  return out;
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, const char* op, Fwd&& f, Deriv&& df) {
  std::vector<double> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i]);
  Tensor y = make_output(a.shape(), std::move(out), result_dtype({&a}), op);
  auto pa = a.ptr();
  auto py = y.ptr();
  attach(y, op, {a}, [pa, py, df](std::span<const double> g) {
    auto sink = grad_sink(*pa);
    if (sink.empty()) return;
    for (std::size_t i = 0; i < g.size(); ++i) sink[i] += g[i] * df(pa->data[i], py->data[i]);
  });
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  auto bc = broadcast(a, b, "add");
  Tensor y = make_output(bc.shape, binary_values(a, b, bc, [](double x, double z) { return x + z; }),
                         result_dtype({&a, &b}), "add");
  auto pa = a.ptr();
  auto pb = b.ptr();
  attach(y, "add", {a, b}, [pa, pb, bc](std::span<const double> g) {
    accumulate(grad_sink(*pa), bc.a_scalar, g, [](std::size_t) { return 1.0; });
    accumulate(grad_sink(*pb), bc.b_scalar, g, [](std::size_t) { return 1.0; });
  });
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto bc = broadcast(a, b, "sub");
  Tensor y = make_output(bc.shape, binary_values(a, b, bc, [](double x, double z) { return x - z; }),
                         result_dtype({&a, &b}), "sub");
  auto pa = a.ptr();
  auto pb = b.ptr();
  attach(y, "sub", {a, b}, [pa, pb, bc](std::span<const double> g) {
    accumulate(grad_sink(*pa), bc.a_scalar, g, [](std::size_t) { return 1.0; });
    accumulate(grad_sink(*pb), bc.b_scalar, g, [](std::size_t) { return -1.0; });
  });
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto bc = broadcast(a, b, "mul");
  Tensor y = make_output(bc.shape, binary_values(a, b, bc, [](double x, double z) { return x * z; }),
                         result_dtype({&a, &b}), "mul");
  auto pa = a.ptr();
  auto pb = b.ptr();
  attach(y, "mul", {a, b}, [pa, pb, bc](std::span<const double> g) {
    const auto& ad = pa->data;
    const auto& bd = pb->data;
    accumulate(grad_sink(*pa), bc.a_scalar, g, [&](std::size_t i) { return bd[bc.b_scalar ? 0 : i]; });
    accumulate(grad_sink(*pb), bc.b_scalar, g, [&](std::size_t i) { return ad[bc.a_scalar ? 0 : i]; });
  });
  return y;
}

Tensor div(const Tensor& a, const Tensor& b) {
  auto bc = broadcast(a, b, "div");
  for (double v : b.data()) require(v != 0.0, ErrorCode::kNumeric, "div: zero divisor");
  Tensor y = make_output(bc.shape, binary_values(a, b, bc, [](double x, double z) { return x / z; }),
                         result_dtype({&a, &b}), "div");
  auto pa = a.ptr();
  auto pb = b.ptr();
  attach(y, "div", {a, b}, [pa, pb, bc](std::span<const double> g) {
    const auto& ad = pa->data;
    const auto& bd = pb->data;
    accumulate(grad_sink(*pa), bc.a_scalar, g, [&](std::size_t i) { return 1.0 / bd[bc.b_scalar ? 0 : i]; });
    accumulate(grad_sink(*pb), bc.b_scalar, g, [&](std::size_t i) {
      const double d = bd[bc.b_scalar ? 0 : i];
      return -ad[bc.a_scalar ? 0 : i] / (d * d);
    });
  });
  return y;
}

Tensor add(const Tensor& a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul(const Tensor& a, double s) {
  return unary(a, "mul_scalar", [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) {
  return unary(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) require(v > 0.0, ErrorCode::kNumeric, "log: non-positive input");
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, "abs", [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary(
      a, "clamp_min", [lo](double x) { return x > lo ? x : lo; },
      [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) require(v >= 0.0, ErrorCode::kNumeric, "sqrt: negative input");
  return unary(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor where(const std::vector<unsigned char>& cond, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape() && cond.size() == a.numel(), ErrorCode::kShapeMismatch,
          "where: operand shapes differ");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = cond[i] ? a.data()[i] : b.data()[i];
  Tensor y = make_output(a.shape(), std::move(out), result_dtype({&a, &b}), "where");
  auto pa = a.ptr();
  auto pb = b.ptr();
  attach(y, "where", {a, b}, [pa, pb, cond](std::span<const double> g) {
    auto sa = grad_sink(*pa);
    auto sb = grad_sink(*pb);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (cond[i]) {
        if (!sa.empty()) sa[i] += g[i];
      } else if (!sb.empty()) {
        sb[i] += g[i];
      }
    }
  });
  return y;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor y = make_output({1}, {s}, result_dtype({&a}), "sum");
  auto pa = a.ptr();
  attach(y, "sum", {a}, [pa](std::span<const double> g) {
    auto sink = grad_sink(*pa);
    for (auto& v : sink) v += g[0];
  });
  return y;
}

Tensor mean(const Tensor& a) { return mul(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, ErrorCode::kShapeMismatch, "matmul expects 2-D operands");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, ErrorCode::kShapeMismatch,
          "matmul inner extents differ: " + to_string(a.shape()) + " . " + to_string(b.shape()));
  std::vector<double> out(m * n);
  detail::gemm(a.data().data(), b.data().data(), out.data(), m, k, n, false, false, false);
  Tensor y = make_output({m, n}, std::move(out), result_dtype({&a, &b}), "matmul");
  auto pa = a.ptr();
  auto pb = b.ptr();
  attach(y, "matmul", {a, b}, [pa, pb, m, k, n](std::span<const double> g) {
    auto sa = grad_sink(*pa);
    if (!sa.empty()) detail::gemm(g.data(), pb->data.data(), sa.data(), m, n, k, false, true, true);
    auto sb = grad_sink(*pb);
    if (!sb.empty()) detail::gemm(pa->data.data(), g.data(), sb.data(), k, m, n, true, false, true);
  });
  return y;
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, ErrorCode::kShapeMismatch, "transpose expects a 2-D tensor");
  return permute(a, {1, 0});
}

Tensor add_bias(const Tensor& a, const Tensor& b) {
  const std::size_t n = b.numel();
  require(a.rank() >= 1 && a.shape().back() == n, ErrorCode::kShapeMismatch,
          "add_bias: trailing extent of " + to_string(a.shape()) + " != " + std::to_string(n));
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i % n];
  Tensor y = make_output(a.shape(), std::move(out), result_dtype({&a, &b}), "add_bias");
  auto pa = a.ptr();
  auto pb = b.ptr();
  attach(y, "add_bias", {a, b}, [pa, pb, n](std::span<const double> g) {
    auto sa = grad_sink(*pa);
    for (std::size_t i = 0; i < sa.size(); ++i) sa[i] += g[i];
    auto sb = grad_sink(*pb);
    if (!sb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) sb[i % n] += g[i];
  });
  return y;
}

Tensor scale_last(const Tensor& a, const Tensor& s) {
  const std::size_t n = s.numel();
  require(a.rank() >= 1 && a.shape().back() == n, ErrorCode::kShapeMismatch,
          "scale_last: trailing extent mismatch");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s.data()[i % n];
  Tensor y = make_output(a.shape(), std::move(out), result_dtype({&a, &s}), "scale_last");
  auto pa = a.ptr();
  auto ps = s.ptr();
  attach(y, "scale_last", {a, s}, [pa, ps, n](std::span<const double> g) {
    auto sa = grad_sink(*pa);
    if (!sa.empty())
      for (std::size_t i = 0; i < g.size(); ++i) sa[i] += g[i] * ps->data[i % n];
    auto ss = grad_sink(*ps);
    if (!ss.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ss[i % n] += g[i] * pa->data[i];
  });
  return y;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(numel(shape) == a.numel(), ErrorCode::kShapeMismatch,
          "reshape " + to_string(a.shape()) + " -> " + to_string(shape) + " changes element count");
  Tensor y = make_output(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()),
                         result_dtype({&a}), "reshape");
  auto pa = a.ptr();
  attach(y, "reshape", {a}, [pa](std::span<const double> g) {
    auto sa = grad_sink(*pa);
    for (std::size_t i = 0; i < sa.size(); ++i) sa[i] += g[i];
  });
  return y;
}

namespace {

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  require(axes.size() == r, ErrorCode::kInvalidArgument, "permute: axis count mismatch");
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    require(axes[i] < r && !seen[axes[i]], ErrorCode::kInvalidArgument, "permute: invalid axes");
    seen[axes[i]] = true;
    out_shape[i] = a.dim(axes[i]);
  }
  const auto in_st = strides_of(a.shape());
  // map[out_flat] = in_flat
  std::vector<std::size_t> map(a.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < map.size(); ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_st[axes[i]];
    map[o] = src;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(map.size());
  for (std::size_t o = 0; o < map.size(); ++o) out[o] = a.data()[map[o]];
  Tensor y = make_output(std::move(out_shape), std::move(out), result_dtype({&a}), "permute");
  auto pa = a.ptr();
  attach(y, "permute", {a}, [pa, map = std::move(map)](std::span<const double> g) {
    auto sa = grad_sink(*pa);
    if (sa.empty()) return;
    for (std::size_t o = 0; o < map.size(); ++o) sa[map[o]] += g[o];
  });
  return y;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), ErrorCode::kInvalidArgument, "concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  require(axis < s0.size(), ErrorCode::kInvalidArgument, "concat axis out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.rank() == s0.size(), ErrorCode::kShapeMismatch, "concat: rank mismatch");
    for (std::size_t i = 0; i < s0.size(); ++i)
      if (i != axis)
        require(p.dim(i) == s0[i], ErrorCode::kShapeMismatch,
                "concat: " + to_string(p.shape()) + " vs " + to_string(s0) + " off the concat axis");
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t row = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * row, row, out.data() + o * out_row + off);
    off += row;
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  Dtype dt = Dtype::kF64;
  for (const auto& p : parts)
    if (p.dtype() == Dtype::kF32) dt = Dtype::kF32;
  Tensor y = make_output(std::move(out_shape), std::move(out), dt, "concat");
  std::vector<std::shared_ptr<TensorImpl>> ps;
  std::vector<std::size_t> rows;
  for (const auto& p : parts) {
    ps.push_back(p.ptr());
    rows.push_back(p.dim(axis) * inner);
  }
  attach(y, "concat", parents, [ps, rows, offsets, outer, out_row](std::span<const double> g) {
    for (std::size_t k = 0; k < ps.size(); ++k) {
      auto sink = grad_sink(*ps[k]);
      if (sink.empty()) continue;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < rows[k]; ++j) sink[o * rows[k] + j] += g[o * out_row + offsets[k] + j];
    }
  });
  return y;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  require(axis < a.rank(), ErrorCode::kInvalidArgument, "slice axis out of range");
  require(begin < end && end <= a.dim(axis), ErrorCode::kInvalidArgument,
          "slice [" + std::to_string(begin) + "," + std::to_string(end) + ") outside extent " +
              std::to_string(a.dim(axis)));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t in_row = a.dim(axis) * inner;
  const std::size_t out_row = (end - begin) * inner;
  const std::size_t off = begin * inner;
  std::vector<double> out(outer * out_row);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.data().data() + o * in_row + off, out_row, out.data() + o * out_row);
  Shape shape = a.shape();
  shape[axis] = end - begin;
  Tensor y = make_output(std::move(shape), std::move(out), result_dtype({&a}), "slice");
  auto pa = a.ptr();
  attach(y, "slice", {a}, [pa, outer, in_row, out_row, off](std::span<const double> g) {
    auto sa = grad_sink(*pa);
    if (sa.empty()) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < out_row; ++j) sa[o * in_row + off + j] += g[o * out_row + j];
  });
  return y;
}

Tensor gather_rows(const Tensor& a, std::size_t row, const std::vector<std::size_t>& index) {
  require(row > 0 && a.numel() % row == 0, ErrorCode::kShapeMismatch, "gather_rows: bad row length");
  require(!index.empty(), ErrorCode::kInvalidArgument, "gather_rows: empty index");
  const std::size_t rows = a.numel() / row;
  std::vector<double> out(index.size() * row);
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < rows, ErrorCode::kInvalidArgument, "gather_rows: index out of range");
    std::copy_n(a.data().data() + index[i] * row, row, out.data() + i * row);
  }
  Tensor y = make_output({index.size(), row}, std::move(out), result_dtype({&a}), "gather_rows");
  auto pa = a.ptr();
  attach(y, "gather_rows", {a}, [pa, row, index](std::span<const double> g) {
    auto sa = grad_sink(*pa);
    if (sa.empty()) return;
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < row; ++j) sa[index[i] * row + j] += g[i * row + j];
  });
  return y;
}

}  // namespace canopy::ops
