#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "canopy/error.hpp"

namespace canopy {

enum class Dtype : std::uint8_t { kF64 = 0, kF32 = 1 };

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  Dtype dtype = Dtype::kF64;
  std::uint64_t tape_id = 0;  // 0 for leaves
  std::size_t node = 0;
};

/// Shared handle to dense row-major storage. Copies alias the same buffer;
/// use clone() or detach() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// Writable view. Mutating a tensor that sits on a live tape invalidates
  /// the saved activations of that tape.
  std::span<double> data_mut() { return impl_->data; }
  double item() const;
  double at(std::size_t flat_index) const { return impl_->data.at(flat_index); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad();

  Dtype dtype() const { return impl_->dtype; }
  /// Switching to kF32 rounds the stored values to float precision.
  Tensor& set_dtype(Dtype dtype);

  Tensor detach() const;
  /// Independent copy that keeps requires_grad (as a fresh leaf).
  Tensor clone() const;
  bool is_leaf() const { return impl_->tape_id == 0; }

  TensorImpl& impl() const { return *impl_; }
  const std::shared_ptr<TensorImpl>& ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Dynamic reverse-mode tape. Ops append nodes while a TapeScope is active;
/// node parents always precede the node, so a reverse sweep is a valid
/// topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> out_grad)>;

  struct Node {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::shared_ptr<TensorImpl> out;
    BackwardFn backward;
  };

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

  std::size_t record(std::string_view op, std::vector<std::shared_ptr<TensorImpl>> parents,
                     const std::shared_ptr<TensorImpl>& out, BackwardFn fn);

  /// Seeds d(root)/d(root) = 1; root must be a scalar produced on this tape.
  void backward(const Tensor& root);
  void backward(const Tensor& root, std::span<const double> seed);

  /// Number of nodes visited by the last backward call.
  std::size_t last_visit_count() const { return last_visits_; }

  static Tape* active();

 private:
  friend class TapeScope;
  friend class NoGradScope;

  std::uint64_t id_;
  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;
};

/// Makes `tape` the recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

/// Suspends recording for the current thread.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

namespace detail {

Dtype result_dtype(std::initializer_list<const Tensor*> inputs);

/// Wraps freshly computed values into a tensor; rounds for kF32 and rejects
/// non-finite results.
Tensor make_output(Shape shape, std::vector<double> data, Dtype dtype, std::string_view op);

/// Records `fn` on the active tape when any parent requires grad.
void attach(Tensor& out, std::string_view op, const std::vector<Tensor>& parents,
            Tape::BackwardFn fn);

/// Gradient accumulator of a parent, allocated on first use. Empty when the
/// parent does not require grad.
std::span<double> grad_sink(TensorImpl& impl);

}  // namespace detail

}  // namespace canopy
