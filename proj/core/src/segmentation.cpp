#include "spol/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "spol/optim.hpp"
#include "spol/rng.hpp"

namespace spol::segmentation {

namespace {

void require_match(const ProbMask& pred, const gppl::PseudoLabel& label) {
  if (pred.height != label.height || pred.width != label.width) {
    throw std::invalid_argument("prediction is " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                                " but pseudo label is " + std::to_string(label.height) + "x" +
                                std::to_string(label.width));
  }
}

std::vector<ProbMask> to_masks(const Tensor<float>& prob) {
  const std::size_t n = prob.dim(0), h = prob.dim(2), w = prob.dim(3);
  std::vector<ProbMask> out(n);
  const auto d = prob.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i].height = h;
    out[i].width = w;
    out[i].values.resize(h * w);
    for (std::size_t j = 0; j < h * w; ++j) {
      out[i].values[j] = std::clamp(static_cast<double>(d[i * h * w + j]), kProbClamp, 1.0 - kProbClamp);
    }
  }
  return out;
}

}  // namespace

mffnet::NetConfig segmenter_config(mffnet::NetConfig base) {
  base.head = mffnet::HeadKind::kSegmenter;
  return base;
}

double masked_bce(const ProbMask& pred, const gppl::PseudoLabel& label) {
  require_match(pred, label);
  NoGradGuard guard;
  Tensor<double> p(Shape{1, pred.height, pred.width}, pred.values);
  const auto g32 = label.target();
  const auto w32 = label.weight();
  const std::vector<double> g(g32.begin(), g32.end()), w(w32.begin(), w32.end());
  return ops::masked_bce(p, std::span<const double>(g), std::span<const double>(w), kProbClamp).item();
}

mffnet::TrainResult train_segmenter(mffnet::Network<float>& net, const Tensor<float>& images,
                                    const std::vector<gppl::PseudoLabel>& labels, const mffnet::TrainConfig& config,
                                    const std::function<void(std::size_t, double)>& on_step) {
  if (net.config().head != mffnet::HeadKind::kSegmenter) {
    throw std::logic_error("train_segmenter needs a segmentation head");
  }
  const std::size_t n = images.dim(0);
  if (labels.size() != n) {
    throw std::invalid_argument("train_segmenter: " + std::to_string(n) + " images but " +
                                std::to_string(labels.size()) + " pseudo labels");
  }
  const std::size_t h = images.dim(2), w = images.dim(3);
  for (const auto& l : labels) {
    if (l.height != h || l.width != w) throw std::invalid_argument("train_segmenter: pseudo label size mismatch");
  }
  Sgd<float> opt(net.parameters(), static_cast<float>(config.lr), static_cast<float>(config.momentum),
                 static_cast<float>(config.weight_decay));
  mffnet::TrainResult result;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle_rng(config.seed, 0x5345474dULL + epoch);
    for (std::size_t i = n; i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i - 1)))]);
    }
    const auto flips = config.hflip ? mffnet::flip_draws(config.seed, epoch, n) : std::vector<bool>(n, false);
    std::size_t agree = 0, supervised = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, n - start);
      std::span<const std::size_t> idx(order.data() + start, count);
      std::vector<float> target, weight;
      target.reserve(count * h * w);
      weight.reserve(count * h * w);
      auto batch = mffnet::slice_batch(images, idx);
      const std::size_t per = batch.numel() / count;
      for (std::size_t i = 0; i < count; ++i) {
        auto g = labels[idx[i]].target();
        auto wt = labels[idx[i]].weight();
        if (flips[start + i]) {
          mffnet::mirror_rows(batch.mutable_data().subspan(i * per, per), w);
          mffnet::mirror_rows(g, w);
          mffnet::mirror_rows(wt, w);
        }
        target.insert(target.end(), g.begin(), g.end());
        weight.insert(weight.end(), wt.begin(), wt.end());
      }
      const auto prob = net.segment(batch);
      auto loss = ops::masked_bce(prob, std::span<const float>(target), std::span<const float>(weight),
                                  static_cast<float>(kProbClamp));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw mffnet::TrainingDiverged("segmenter training diverged at step " + std::to_string(step) +
                                       ": loss = " + std::to_string(value));
      }
      opt.zero_grad();
      backward(loss);
      opt.clip_grad_norm(config.clip_norm);
      opt.step();
      const auto pd = prob.data();
      for (std::size_t j = 0; j < pd.size(); ++j) {
        if (weight[j] == 0.0f) continue;
        ++supervised;
        if ((pd[j] >= 0.5f) == (target[j] == 1.0f)) ++agree;
      }
      result.loss_curve.push_back(value);
      if (on_step) on_step(step, value);
      ++step;
      if (config.max_steps && step >= config.max_steps) break;
    }
    result.final_accuracy = supervised ? static_cast<double>(agree) / static_cast<double>(supervised) : 0.0;
    if (config.max_steps && step >= config.max_steps) break;
  }
  return result;
}

ProbMask predict_mask(const mffnet::Network<float>& net, const Tensor<float>& image) {
  if (image.ndim() != 4 || image.dim(0) != 1) throw ShapeError("predict_mask expects a single (1, C, H, W) image");
  NoGradGuard guard;
  return to_masks(net.segment(image)).front();
}

std::vector<ProbMask> predict_masks(const mffnet::Network<float>& net, const Tensor<float>& images,
                                    std::size_t batch_size) {
  NoGradGuard guard;
  std::vector<ProbMask> out;
  const std::size_t n = images.dim(0);
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, n - start));
    std::iota(idx.begin(), idx.end(), start);
    auto part = to_masks(net.segment(mffnet::slice_batch(images, idx)));
    for (auto& m : part) out.push_back(std::move(m));
  }
  return out;
}

double pixel_accuracy(const ProbMask& pred, const gppl::PseudoLabel& label) {
  require_match(pred, label);
  std::size_t agree = 0, supervised = 0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    if (label.classes[i] == gppl::PixelClass::kConflict) continue;
    ++supervised;
    if ((pred.values[i] >= 0.5) == (label.classes[i] == gppl::PixelClass::kForeground)) ++agree;
  }
  return supervised ? static_cast<double>(agree) / static_cast<double>(supervised) : 1.0;
}

}  // namespace spol::segmentation
