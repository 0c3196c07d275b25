#include "spol/localization.hpp"

#include <algorithm>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <stdexcept>

namespace spol::localization {

BinaryMask binarize(const ProbMask& mask, double tau) {
  BinaryMask out{mask.height, mask.width, std::vector<std::uint8_t>(mask.values.size())};
  for (std::size_t i = 0; i < mask.values.size(); ++i) out.values[i] = mask.values[i] >= tau ? 1 : 0;
  return out;
}

std::optional<BBox> extract_bbox(const BinaryMask& mask) {
  const std::size_t h = mask.height, w = mask.width;
  std::vector<int> label(h * w, -1);
  std::vector<std::size_t> stack;
  std::optional<BBox> best;
  long long best_area = 0;
  int next_label = 0;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (!mask.values[start] || label[start] >= 0) continue;
    const int id = next_label++;
    long long area = 0;
    BBox box{static_cast<int>(start % w), static_cast<int>(start / w), static_cast<int>(start % w),
             static_cast<int>(start / w)};
    stack.assign(1, start);
    label[start] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++area;
      const int r = static_cast<int>(p / w), c = static_cast<int>(p % w);
      box.x_min = std::min(box.x_min, c);
      box.x_max = std::max(box.x_max, c);
      box.y_min = std::min(box.y_min, r);
      box.y_max = std::max(box.y_max, r);
      auto visit = [&](std::size_t q) {
        if (mask.values[q] && label[q] < 0) {
          label[q] = id;
          stack.push_back(q);
        }
      };
      if (r > 0) visit(p - w);
      if (r + 1 < static_cast<int>(h)) visit(p + w);
      if (c > 0) visit(p - 1);
      if (c + 1 < static_cast<int>(w)) visit(p + 1);
    }
    if (area > best_area) {
      best_area = area;
      best = box;
    }
  }
  return best;
}

double iou(const BBox& a, const BBox& b) {
  const int ix0 = std::max(a.x_min, b.x_min), iy0 = std::max(a.y_min, b.y_min);
  const int ix1 = std::min(a.x_max, b.x_max), iy1 = std::min(a.y_max, b.y_max);
  long long inter = 0;
  if (ix1 >= ix0 && iy1 >= iy0) inter = static_cast<long long>(ix1 - ix0 + 1) * (iy1 - iy0 + 1);
  const long long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

Metrics evaluate(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw std::invalid_argument("evaluate: no records");
  std::size_t top1 = 0, top5 = 0, known = 0;
  for (const auto& r : records) {
    std::set<int> seen(r.class_ranks.begin(), r.class_ranks.end());
    if (seen.size() != r.class_ranks.size()) throw std::invalid_argument("evaluate: duplicate class in ranks");
    const bool localized = r.pred_box && iou(*r.pred_box, r.gt_box) > kIouThreshold;
    if (!localized) continue;
    ++known;
    const std::size_t k = std::min<std::size_t>(5, r.class_ranks.size());
    if (std::find(r.class_ranks.begin(), r.class_ranks.begin() + static_cast<std::ptrdiff_t>(k), r.gt_class) !=
        r.class_ranks.begin() + static_cast<std::ptrdiff_t>(k)) {
      ++top5;
    }
    if (!r.class_ranks.empty() && r.class_ranks.front() == r.gt_class) ++top1;
  }
  const double n = static_cast<double>(records.size());
  return {static_cast<double>(top1) / n, static_cast<double>(top5) / n, static_cast<double>(known) / n,
          records.size()};
}

std::string metrics_to_json(const Metrics& m) {
  nlohmann::ordered_json j;
  j["gt_known_loc"] = m.gt_known_loc;
  j["n_images"] = m.n_images;
  j["top1_loc"] = m.top1_loc;
  j["top5_loc"] = m.top5_loc;
  return j.dump(2) + "\n";
}

std::string metrics_to_text(const Metrics& m) {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed;
  os << "top1_loc = " << m.top1_loc << '\n';
  os << "top5_loc = " << m.top5_loc << '\n';
  os << "gt_known_loc = " << m.gt_known_loc << '\n';
  os << "n_images = " << m.n_images << '\n';
  return os.str();
}

Metrics metrics_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  return {j.at("top1_loc").get<double>(), j.at("top5_loc").get<double>(), j.at("gt_known_loc").get<double>(),
          j.at("n_images").get<std::size_t>()};
}

std::vector<EvalRecord> parse_records(const std::string& text) {
  std::vector<EvalRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string f;
    while (std::getline(ls, f, ',')) fields.push_back(f);
    if (fields.size() != 10) {
      throw std::invalid_argument("records line " + std::to_string(line_no) + ": expected 10 fields, got " +
                                  std::to_string(fields.size()));
    }
    try {
      EvalRecord r;
      r.gt_class = std::stoi(fields[0]);
      r.gt_box = {std::stoi(fields[1]), std::stoi(fields[2]), std::stoi(fields[3]), std::stoi(fields[4])};
      const BBox pred{std::stoi(fields[5]), std::stoi(fields[6]), std::stoi(fields[7]), std::stoi(fields[8])};
      if (pred.x_min >= 0) r.pred_box = pred;
      std::istringstream ranks(fields[9]);
      int c;
      while (ranks >> c) r.class_ranks.push_back(c);
      out.push_back(std::move(r));
    } catch (const std::logic_error& e) {
      throw std::invalid_argument("records line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::string format_records(const std::vector<EvalRecord>& records) {
  std::ostringstream os;
  os << "# gt_class,gt_x_min,gt_y_min,gt_x_max,gt_y_max,pred_x_min,pred_y_min,pred_x_max,pred_y_max,ranks\n";
  for (const auto& r : records) {
    os << r.gt_class << ',' << r.gt_box.x_min << ',' << r.gt_box.y_min << ',' << r.gt_box.x_max << ','
       << r.gt_box.y_max << ',';
    if (r.pred_box) {
      os << r.pred_box->x_min << ',' << r.pred_box->y_min << ',' << r.pred_box->x_max << ',' << r.pred_box->y_max;
    } else {
      os << "-1,-1,-1,-1";
    }
    os << ',';
    for (std::size_t i = 0; i < r.class_ranks.size(); ++i) os << (i ? " " : "") << r.class_ranks[i];
    os << '\n';
  }
  return os.str();
}

}  // namespace spol::localization
