#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace nf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool is_leaf = true;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

// Dense row-major tensor of doubles. Copies share storage; values are treated
// as immutable once an op has produced them. Parameters are the exception and
// are updated in place through mutable_data().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
  static Tensor param(Shape shape, std::vector<double> values);
  static Tensor from(std::initializer_list<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double at(std::size_t i) const { return impl_->data.at(i); }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  // Deep copy detached from any tape.
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend Tensor make_result(Shape shape, std::vector<double> values);
};

Tensor make_result(Shape shape, std::vector<double> values);

// Ordered record of executed ops. Constructing a tape makes it the active tape
// of the calling thread until it is destroyed; ops record their adjoint only
// while a tape is active and an operand requires a gradient.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active();

  void record(std::function<void()> adjoint);
  std::size_t size() const { return ops_.size(); }

  // Seeds d(loss)/d(loss) = 1, replays adjoints newest-first and clears the
  // tape. Gradients accumulate into the leaves' grad buffers.
  void backward(const Tensor& loss);
  void clear() { ops_.clear(); }

 private:
  std::vector<std::function<void()>> ops_;
  GradTape* previous_ = nullptr;
};

// Suspends recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  GradTape* saved_;
};

namespace detail {
void set_active_tape(GradTape* tape);
}

}  // namespace nf
