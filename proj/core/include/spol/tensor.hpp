#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spol {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// While alive, newly created ops do not record onto the tape.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
  std::vector<std::shared_ptr<TensorImpl<T>>> parents;
  // Reads out.grad and accumulates into parents' grads.
  std::function<void(const TensorImpl<T>& out)> apply;
  bool consumed = false;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first touched
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;

  std::vector<T>& ensure_grad();
};

}  // namespace detail

/// Dense row-major tensor with shared ownership of its storage. Copies are
/// shallow; use clone() for a deep copy that is detached from the tape.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const;
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;

  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const { return impl_->grad_fn == nullptr; }

  /// Gradient buffer, zero-filled if no backward pass has reached this tensor.
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  Tensor clone() const;
  Tensor detach() const;

  template <typename U>
  Tensor<U> cast() const;

  // Tape plumbing for op implementations.
  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<detail::TensorImpl<T>> impl);

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Populates dLoss/dTensor for every requires_grad tensor reachable from a
/// scalar loss, then consumes the tape. A second call on the same graph
/// throws AutogradError.
template <typename T>
void backward(const Tensor<T>& loss);

/// Records an op output on the tape when grad mode is on and any input
/// requires grad. `apply` receives the output impl and must accumulate into
/// the inputs' grads.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::vector<std::shared_ptr<detail::TensorImpl<T>>> inputs,
                      std::function<void(const detail::TensorImpl<T>&)> apply);

template <typename T>
template <typename U>
Tensor<U> Tensor<T>::cast() const {
  std::vector<U> out(impl_->data.begin(), impl_->data.end());
  return Tensor<U>(impl_->shape, std::move(out), false);
}

}  // namespace spol
