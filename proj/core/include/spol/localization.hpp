#pragma once

#include <optional>
#include <string>
#include <vector>

#include "spol/maps.hpp"

namespace spol::localization {

/// Inclusive pixel box.
struct BBox {
  int x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  long long area() const {
    return static_cast<long long>(x_max - x_min + 1) * static_cast<long long>(y_max - y_min + 1);
  }
  bool operator==(const BBox&) const = default;
};

struct EvalRecord {
  std::optional<BBox> pred_box;
  std::vector<int> class_ranks;  // best first, no duplicates
  BBox gt_box;
  int gt_class = 0;
};

struct Metrics {
  double top1_loc = 0;
  double top5_loc = 0;
  double gt_known_loc = 0;
  std::size_t n_images = 0;
};

inline constexpr double kDefaultTau = 0.5;
inline constexpr double kIouThreshold = 0.5;

/// value >= tau -> 1, else 0.
BinaryMask binarize(const ProbMask& mask, double tau = kDefaultTau);

/// Tight box around the largest 4-connected component; ties go to the
/// component whose first pixel comes first in raster order.
std::optional<BBox> extract_bbox(const BinaryMask& mask);

/// Intersection over union with inclusive pixel counts.
double iou(const BBox& a, const BBox& b);

/// Top-1 / Top-5 / GT-known localization accuracy. A record localizes when
/// its IoU is strictly greater than 0.5; a missing prediction never does.
Metrics evaluate(const std::vector<EvalRecord>& records);

/// {"gt_known_loc":...,"n_images":...,"top1_loc":...,"top5_loc":...}
std::string metrics_to_json(const Metrics& m);
/// One "key = value" line per metric.
std::string metrics_to_text(const Metrics& m);
Metrics metrics_from_json(const std::string& json);

/// CSV line format for records:
/// gt_class,gt_x_min,gt_y_min,gt_x_max,gt_y_max,pred_x_min,pred_y_min,pred_x_max,pred_y_max,ranks
/// where an absent prediction is written as four -1 values and ranks is a
/// space-separated class list. Lines starting with '#' are comments.
std::vector<EvalRecord> parse_records(const std::string& text);
std::string format_records(const std::vector<EvalRecord>& records);

}  // namespace spol::localization
