#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "spol/maps.hpp"
#include "spol/ops.hpp"
#include "spol/tensor.hpp"

namespace spol::mffnet {

enum class FusionKind { kMul, kAdd, kConcat };
enum class HeadKind { kClassifier, kSegmenter };

const char* fusion_name(FusionKind kind);
FusionKind parse_fusion(const std::string& name);

struct NetConfig {
  std::size_t in_channels = 3;
  std::size_t image_size = 64;
  std::array<std::size_t, 4> stage_channels{16, 32, 64, 128};
  std::size_t fuse_k = 3;
  FusionKind fusion = FusionKind::kMul;
  bool use_mca = true;
  std::size_t mca_latent = 32;
  std::size_t fused_channels = 64;
  std::size_t num_classes = 4;
  ops::UpsampleMode upsample = ops::UpsampleMode::kBilinear;
  HeadKind head = HeadKind::kClassifier;

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;

  std::map<std::string, std::string> to_map() const;
  static NetConfig from_map(const std::map<std::string, std::string>& values);
};

/// Stage outputs from shallow (high resolution) to deep.
template <typename T>
struct BackboneFeatures {
  std::vector<Tensor<T>> stages;
};

template <typename T>
struct McaParams {
  std::size_t latent = 0;
  std::vector<Tensor<T>> squeeze_weight;  // (latent, C_i)
  std::vector<Tensor<T>> squeeze_bias;    // (latent)
  std::vector<Tensor<T>> expand_weight;   // (C_i, latent)
  std::vector<Tensor<T>> expand_bias;     // (C_i)
};

template <typename T>
struct FusionOutput {
  Tensor<T> fused_map;   // (N, C_f, H, W)
  Tensor<T> pooled;      // (N, C_f)
  Tensor<T> logits;      // (N, classes); undefined for segmenters
  Tensor<T> aux_logits;  // (N, classes); undefined for segmenters
};

/// Multiplication-based channel attention over exactly three branches.
/// Each branch is pooled and squeezed to the latent size; the three latent
/// vectors are multiplied into a shared vector V, which is expanded back per
/// branch, passed through a sigmoid and applied channel-wise.
template <typename T>
std::vector<Tensor<T>> mca(const std::vector<Tensor<T>>& features, const McaParams<T>& params);

/// fused = X * Y * Z, pooled = spatial mean of fused.
template <typename T>
FusionOutput<T> fuse_multiplicative(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& z);

/// fused = X + Y + Z, pooled = spatial mean of fused.
template <typename T>
FusionOutput<T> fuse_additive(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& z);

/// fused = 1x1 projection of the channel concatenation [X, Y, Z].
/// projection is (C_f, 3 C_f, 1, 1); bias may be undefined.
template <typename T>
FusionOutput<T> fuse_concat(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& z,
                            const Tensor<T>& projection, const Tensor<T>& bias);

/// ReLU of the class-weighted channel sum, min-max normalized to [0, 1].
/// fused_map is (N, C, H, W); classifier_weight is (classes, C).
template <typename T>
CamMap compute_cam(const Tensor<T>& fused_map, std::size_t image_index,
                   const Tensor<T>& classifier_weight, int class_id);

/// Fusion network: toy four-stage conv backbone, optional MCA over the fused
/// stages, channel alignment + upsampling, configurable fusion, and either
/// classification heads (main + auxiliary) or a one-channel sigmoid
/// segmentation head.
template <typename T>
class Network {
 public:
  Network(NetConfig config, std::uint64_t seed);

  const NetConfig& config() const { return config_; }

  BackboneFeatures<T> backbone(const Tensor<T>& image) const;
  FusionOutput<T> forward(const Tensor<T>& image) const;

  /// Segmenter only: (N, 1, image_size, image_size) foreground probability.
  Tensor<T> segment(const Tensor<T>& image) const;

  const Tensor<T>& classifier_weight() const { return cls_weight_; }

  std::vector<Tensor<T>> parameters() const;
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
  /// Copies values into the parameter of the same name. Throws on unknown
  /// names or shape mismatch.
  void load_parameter(const std::string& name, const Tensor<T>& value);

  McaParams<T>& mca_params() { return mca_; }

 private:
  NetConfig config_;
  std::vector<Tensor<T>> stage_weight_, stage_bias_;
  McaParams<T> mca_;
  std::vector<Tensor<T>> align_weight_, align_bias_;
  Tensor<T> concat_weight_, concat_bias_;
  Tensor<T> cls_weight_, cls_bias_;
  Tensor<T> aux_weight_, aux_bias_;
  Tensor<T> seg_weight_, seg_bias_;

  std::vector<Tensor<T>> fused_branches(const BackboneFeatures<T>& features) const;
  FusionOutput<T> fuse(const std::vector<Tensor<T>>& branches) const;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Network<T>& net);
template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& dir);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool aux_loss = true;
  /// Global gradient-norm clip per step (0 = off).
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  /// Hard cap on optimizer steps (0 = no cap).
  std::size_t max_steps = 0;
  /// Mirror each training sample left-right with probability 1/2.
  bool hflip = false;
};

struct TrainResult {
  std::vector<double> loss_curve;  // one entry per step
  double final_accuracy = 0.0;     // training accuracy of the last epoch
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mini-batch SGD on cross-entropy(logits) [+ cross-entropy(aux_logits)].
/// images is (N, C, H, W); labels has N entries.
TrainResult train_classifier(Network<float>& net, const Tensor<float>& images,
                             std::span<const int> labels, const TrainConfig& config,
                             const std::function<void(std::size_t, double)>& on_step = {});

/// Gathers the listed images into a new (len, C, H, W) tensor.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& images, std::span<const std::size_t> indices);

/// Reverses every run of `width` consecutive values (a left-right mirror of
/// row-major planes).
void mirror_rows(std::span<float> values, std::size_t width);

/// Per-sample flip decisions for one epoch, indexed by batch position.
std::vector<bool> flip_draws(std::uint64_t seed, std::size_t epoch, std::size_t n);

/// Class logits for every image, computed in batches without the tape.
std::vector<std::vector<float>> predict_logits(const Network<float>& net, const Tensor<float>& images,
                                               std::size_t batch_size = 64);

/// Class ids sorted best first.
std::vector<int> rank_classes(std::span<const float> logits);

}  // namespace spol::mffnet
