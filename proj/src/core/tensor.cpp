#include "canopy/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace canopy {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) require(d > 0, ErrorCode::kShapeMismatch, "tensor extents must be positive: " + to_string(shape));
  require(numel(shape) == data.size(), ErrorCode::kShapeMismatch,
          "data length " + std::to_string(data.size()) + " does not match shape " + to_string(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

void round_to_float(std::vector<double>& v) {
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_next_tape_id{1};

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = canopy::numel(shape);
  return Tensor(new_impl(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(new_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({1}, value, requires_grad); }

std::size_t Tensor::dim(std::size_t axis) const {
  require(axis < rank(), ErrorCode::kInvalidArgument, "axis out of range for " + to_string(shape()));
  return impl_->shape[axis];
}

double Tensor::item() const {
  require(numel() == 1, ErrorCode::kShapeMismatch, "item() on non-scalar tensor " + to_string(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor& Tensor::set_dtype(Dtype dtype) {
  impl_->dtype = dtype;
  if (dtype == Dtype::kF32) round_to_float(impl_->data);
  return *this;
}

Tensor Tensor::detach() const {
  auto impl = new_impl(impl_->shape, impl_->data, false);
  impl->dtype = impl_->dtype;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.set_requires_grad(requires_grad());
  return t;
}

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {}

Tape* Tape::active() { return g_active_tape; }

std::size_t Tape::record(std::string_view op, std::vector<std::shared_ptr<TensorImpl>> parents,
                         const std::shared_ptr<TensorImpl>& out, BackwardFn fn) {
  const std::size_t index = nodes_.size();
  out->tape_id = id_;
  out->node = index;
  nodes_.push_back(Node{std::string(op), std::move(parents), out, std::move(fn)});
  return index;
}

void Tape::backward(const Tensor& root) {
  require(root.defined() && root.numel() == 1, ErrorCode::kInvalidArgument,
          "backward without a seed needs a scalar root");
  const double one = 1.0;
  backward(root, std::span<const double>(&one, 1));
}

void Tape::backward(const Tensor& root, std::span<const double> seed) {
  require(root.defined(), ErrorCode::kInvalidArgument, "backward on undefined tensor");
  const auto& impl = root.impl();
  const bool on_tape = impl.tape_id == id_ && impl.node < nodes_.size() &&
                       nodes_[impl.node].out.get() == root.ptr().get();
  require(on_tape, ErrorCode::kState, "backward root is not on this tape");
  require(seed.size() == root.numel(), ErrorCode::kShapeMismatch, "seed gradient size mismatch");

  // Intermediate gradients restart from zero; leaves keep accumulating.
  for (auto& n : nodes_) n.out->grad.assign(n.out->data.size(), 0.0);
  std::copy(seed.begin(), seed.end(), root.ptr()->grad.begin());

  last_visits_ = 0;
  for (std::size_t i = impl.node + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.backward) n.backward(n.out->grad);
    ++last_visits_;
  }
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

NoGradScope::NoGradScope() : prev_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = prev_; }

namespace detail {

Dtype result_dtype(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs)
    if (t && t->defined() && t->dtype() == Dtype::kF32) return Dtype::kF32;
  return Dtype::kF64;
}

Tensor make_output(Shape shape, std::vector<double> data, Dtype dtype, std::string_view op) {
  if (dtype == Dtype::kF32) round_to_float(data);
  for (double v : data)
    if (!std::isfinite(v)) fail(ErrorCode::kNumeric, "non-finite value produced by " + std::string(op));
  auto impl = new_impl(std::move(shape), std::move(data), false);
  impl->dtype = dtype;
  return Tensor(std::move(impl));
}

void attach(Tensor& out, std::string_view op, const std::vector<Tensor>& parents, Tape::BackwardFn fn) {
  Tape* tape = Tape::active();
  if (!tape) return;
  bool any = false;
  for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
  if (!any) return;
  std::vector<std::shared_ptr<TensorImpl>> ps;
  ps.reserve(parents.size());
  for (const auto& p : parents) ps.push_back(p.ptr());
  out.impl().requires_grad = true;
  tape->record(op, std::move(ps), out.ptr(), std::move(fn));
}

std::span<double> grad_sink(TensorImpl& impl) {
  if (!impl.requires_grad) return {};
  if (impl.grad.size() != impl.data.size()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad;
}

}  // namespace detail

}  // namespace canopy
