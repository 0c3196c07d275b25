#pragma once

#include <functional>
#include <vector>

#include "spol/gppl.hpp"
#include "spol/maps.hpp"
#include "spol/mffnet.hpp"

namespace spol::segmentation {

inline constexpr double kProbClamp = 1e-7;

/// Segmenter configuration derived from a classifier config: same trunk,
/// one-channel sigmoid head.
mffnet::NetConfig segmenter_config(mffnet::NetConfig base);

/// -(1 / (H W)) * sum w_ij [g_ij log p_ij + (1 - g_ij) log(1 - p_ij)], with
/// p clamped to [kProbClamp, 1 - kProbClamp]. Conflict pixels (w = 0) never
/// contribute, so the divisor stays H * W regardless of how many pixels are
/// supervised.
double masked_bce(const ProbMask& pred, const gppl::PseudoLabel& label);

/// Trains a segmenter on pseudo labels only; no class label is consumed.
mffnet::TrainResult train_segmenter(mffnet::Network<float>& net, const Tensor<float>& images,
                                    const std::vector<gppl::PseudoLabel>& labels,
                                    const mffnet::TrainConfig& config,
                                    const std::function<void(std::size_t, double)>& on_step = {});

/// Foreground probability at input resolution for one image (1, C, H, W).
ProbMask predict_mask(const mffnet::Network<float>& net, const Tensor<float>& image);

/// Batched prediction over (N, C, H, W).
std::vector<ProbMask> predict_masks(const mffnet::Network<float>& net, const Tensor<float>& images,
                                    std::size_t batch_size = 64);

/// Fraction of supervised (non-conflict) pixels where (p >= 0.5) matches the
/// pseudo label.
double pixel_accuracy(const ProbMask& pred, const gppl::PseudoLabel& label);

}  // namespace spol::segmentation
