#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "spol/localization.hpp"
#include "spol/mffnet.hpp"
#include "spol/synthdata.hpp"

namespace spol::pipeline {

/// Every knob of a run. Ablation flags map one-to-one onto the toggles the
/// acceptance suite flips.
struct PipelineConfig {
  // dataset
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  std::size_t image_size = 64;

  // networks
  mffnet::FusionKind fusion = mffnet::FusionKind::kMul;
  std::size_t fuse_k = 3;
  bool use_mca = true;
  bool aux_loss = true;
  bool gauss = true;
  bool seg = true;
  std::size_t mca_latent = 32;
  std::size_t fused_channels = 64;
  std::string upsample = "bilinear";

  // thresholds
  double t_gauss = 0.7;
  double t_fg = 0.5;
  double t_bg = 0.004;
  double tau = 0.5;

  // optimizer
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double clip_norm = 5.0;
  bool hflip = true;
  std::size_t batch_size = 32;
  std::size_t cam_epochs = 20;
  std::size_t seg_epochs = 8;
  std::size_t cls_epochs = 6;

  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "spol_out";
  bool dump_png = false;
  /// Optional hand-written records file consumed by the eval stage instead
  /// of the inference outputs.
  std::filesystem::path records;
  bool verbose = true;

  /// Throws std::invalid_argument naming the offending key.
  void validate() const;

  /// Sets one key; throws std::invalid_argument on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  /// Ordered "key = value" lines for every setting.
  std::string to_text() const;
  /// Parses a flat "key = value" file; '#' starts a comment.
  static PipelineConfig from_text(const std::string& text, PipelineConfig base);
  static PipelineConfig from_text(const std::string& text);

  mffnet::NetConfig cam_net() const;
  mffnet::NetConfig seg_net() const;
  mffnet::NetConfig cls_net() const;
  synthdata::DataConfig data() const;
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"gen-data", "train-cam", "make-pseudo", "train-seg",
                                              "train-cls", "infer", "eval"};
  return names;
}

/// Stage failure; what() carries "<stage>: <cause>".
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& cause)
      : std::runtime_error(stage + ": " + cause), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Files a stage expects from earlier stages, relative to the output dir.
std::vector<std::filesystem::path> stage_prerequisites(const std::string& stage, const PipelineConfig& config);

/// Runs exactly one stage. Throws StageError on missing prerequisites
/// (listing every expected file) or on any failure inside the stage.
void run_stage(const std::string& stage, const PipelineConfig& config);

/// The stage sequence of a full run: gen-data, train-cam, make-pseudo and
/// train-seg (when segmentation is on), train-cls, infer, eval.
std::vector<std::string> pipeline_stages(const PipelineConfig& config);

/// Runs every stage in order and returns the metrics written to
/// report.json.
localization::Metrics run_pipeline(const PipelineConfig& config);

// Artifact layout inside out_dir.
namespace paths {
inline const std::filesystem::path kTrainImages = "data/train_images.arr";
inline const std::filesystem::path kTrainLabels = "data/train_labels.arr";
inline const std::filesystem::path kTrainManifest = "data/train_manifest.csv";
inline const std::filesystem::path kTestImages = "data/test_images.arr";
inline const std::filesystem::path kTestManifest = "data/test_manifest.csv";
inline const std::filesystem::path kCamModel = "models/cam";
inline const std::filesystem::path kSegModel = "models/seg";
inline const std::filesystem::path kClsModel = "models/cls";
inline const std::filesystem::path kPseudoDir = "pseudo";
inline const std::filesystem::path kPseudoSummary = "pseudo/summary.txt";
inline const std::filesystem::path kPredictions = "infer/predictions.csv";
inline const std::filesystem::path kMasks = "infer/masks.arr";
inline const std::filesystem::path kCamPredictions = "infer/cam_predictions.csv";
inline const std::filesystem::path kCamReport = "cam_report.json";
inline const std::filesystem::path kReportJson = "report.json";
inline const std::filesystem::path kReportText = "report.txt";
inline const std::filesystem::path kRunManifest = "run_manifest.txt";
}  // namespace paths

}  // namespace spol::pipeline
