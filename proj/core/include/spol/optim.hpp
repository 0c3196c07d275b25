#pragma once

#include <cmath>
#include <vector>

#include "spol/tensor.hpp"

namespace spol {

/// SGD with classical momentum and optional L2 weight decay.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Tensor<T>> params, T lr, T momentum = T(0.9), T weight_decay = T(0))
      : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), T(0));
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto data = params_[i].mutable_data();
      auto grad = params_[i].grad();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < data.size(); ++j) {
        const T g = grad[j] + weight_decay_ * data[j];
        v[j] = momentum_ * v[j] + g;
        data[j] -= lr_ * v[j];
      }
    }
  }

  /// Rescales all gradients so their global L2 norm is at most max_norm.
  /// Returns the norm before clipping. max_norm <= 0 disables clipping.
  double clip_grad_norm(double max_norm) {
    double sq = 0;
    for (const auto& p : params_) {
      for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
      const T factor = static_cast<T>(max_norm / norm);
      for (auto& p : params_) {
        for (T& g : p.mutable_grad()) g *= factor;
      }
    }
    return norm;
  }

  void set_lr(T lr) { lr_ = lr; }
  T lr() const { return lr_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
  T lr_;
  T momentum_;
  T weight_decay_;
};

}  // namespace spol
