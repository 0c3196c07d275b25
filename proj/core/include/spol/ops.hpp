#pragma once

#include <span>
#include <vector>

#include "spol/tensor.hpp"

namespace spol::ops {

enum class UpsampleMode { kBilinear, kNearest };
enum class ElementwiseKind { kAdd, kMul, kSigmoid, kRelu };

// Binary elementwise ops accept equal shapes, or one operand shaped as a
// per-channel scalar: (N or 1, C, 1, ...) against (N, C, ...).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T>
Tensor<T> relu(const Tensor<T>& a);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

/// Dispatches to add/mul/sigmoid/relu; `b` is ignored by the unary kinds
/// and required by the binary ones.
template <typename T>
Tensor<T> elementwise(ElementwiseKind kind, const Tensor<T>& a, const Tensor<T>& b = {});

template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

/// NCHW convolution without bias. kernel is (out_c, in_c, kh, kw).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, int stride, int pad);

/// (N, C, H, W) -> (N, C, 1, 1)
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& t);

/// Align-corners-false bilinear, or nearest. Output must not be smaller.
template <typename T>
Tensor<T> upsample(const Tensor<T>& t, std::size_t out_h, std::size_t out_w,
                   UpsampleMode mode = UpsampleMode::kBilinear);

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& t, std::size_t out_h, std::size_t out_w) {
  return upsample(t, out_h, out_w, UpsampleMode::kBilinear);
}

/// x (N, in) times weight (out, in)^T plus optional bias (out).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Channel-wise concatenation of 4-D tensors with equal N, H, W.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);

/// Mean softmax cross-entropy over the batch. logits (N, K).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Per-image masked binary cross-entropy on probabilities, averaged over the
/// batch. prob/target/weight share shape (N, ...). Each image's sum is divided
/// by its full pixel count. Probabilities are clamped to [eps, 1 - eps]; the
/// gradient is zero where the clamp is active.
template <typename T>
Tensor<T> masked_bce(const Tensor<T>& prob, std::span<const T> target, std::span<const T> weight,
                     T eps = T(1e-7));

}  // namespace spol::ops
