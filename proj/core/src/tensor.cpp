#include "spol/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace spol {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_mode_enabled() { return g_grad_enabled; }

namespace detail {

template <typename T>
std::vector<T>& TensorImpl<T>::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  return grad;
}

}  // namespace detail

template <typename T>
Tensor<T>::Tensor() = default;

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad)
    : Tensor(shape, std::vector<T>(shape_numel(shape), T(0)), requires_grad) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_to_string(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " elements but data has " +
                     std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return Tensor(std::move(shape), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(1), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t i) const {
  if (i >= impl_->shape.size()) {
    throw ShapeError("dim " + std::to_string(i) + " out of range for shape " +
                     shape_to_string(impl_->shape));
  }
  return impl_->shape[i];
}

template <typename T>
T Tensor<T>::item() const {
  if (impl_->data.size() != 1) {
    throw ShapeError("item() needs a single-element tensor, got shape " +
                     shape_to_string(impl_->shape));
  }
  return impl_->data[0];
}

template <typename T>
T Tensor<T>::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
  const Shape& s = impl_->shape;
  if (s.size() != 4) throw ShapeError("at() needs a 4-D tensor, got " + shape_to_string(s));
  return impl_->data[((n * s[1] + c) * s[2] + h) * s[3] + w];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  return *this;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return impl_->ensure_grad();
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return impl_->ensure_grad();
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(impl_->shape, impl_->data, impl_->requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl_->shape, impl_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::from_impl(std::shared_ptr<detail::TensorImpl<T>> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::vector<std::shared_ptr<detail::TensorImpl<T>>> inputs,
                      std::function<void(const detail::TensorImpl<T>&)> apply) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (!grad_mode_enabled()) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const auto& in) { return in && in->requires_grad; });
  if (!any) return out;
  auto node = std::make_shared<detail::Node<T>>();
  node->parents = std::move(inputs);
  node->apply = std::move(apply);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
  return out;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  using Impl = detail::TensorImpl<T>;
  if (!loss.defined() || loss.numel() != 1) {
    throw AutogradError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_to_string(loss.shape()) : std::string("<undefined>")));
  }
  Impl* root = loss.impl().get();
  if (root->grad_fn && root->grad_fn->consumed) {
    throw AutogradError("backward() called twice on the same graph; the tape was already consumed");
  }
  if (!root->requires_grad) {
    throw AutogradError("backward() on a loss that does not require grad");
  }

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->grad_fn && next < node->grad_fn->parents.size()) {
      Impl* parent = node->grad_fn->parents[next++].get();
      if (parent && parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  for (Impl* impl : order) impl->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* impl = *it;
    if (!impl->grad_fn) continue;
    if (impl->grad_fn->consumed) {
      throw AutogradError("backward() reached a node whose tape was already consumed");
    }
    impl->grad_fn->apply(*impl);
  }
  for (Impl* impl : order) {
    if (!impl->grad_fn) continue;
    impl->grad_fn->consumed = true;
    impl->grad_fn->apply = nullptr;
    impl->grad_fn->parents.clear();
  }
}

template class Tensor<float>;
template class Tensor<double>;
template struct detail::TensorImpl<float>;
template struct detail::TensorImpl<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);
template Tensor<float> make_result(Shape, std::vector<float>,
                                   std::vector<std::shared_ptr<detail::TensorImpl<float>>>,
                                   std::function<void(const detail::TensorImpl<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>,
                                    std::vector<std::shared_ptr<detail::TensorImpl<double>>>,
                                    std::function<void(const detail::TensorImpl<double>&)>);

}  // namespace spol
