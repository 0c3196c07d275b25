#include "spol/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "spol/array_io.hpp"
#include "spol/gppl.hpp"
#include "spol/png.hpp"
#include "spol/rng.hpp"
#include "spol/segmentation.hpp"

namespace spol::pipeline {

namespace fs = std::filesystem;

namespace {

// Stream ids for per-stage seeds derived from the run seed.
enum SeedStream : std::uint64_t {
  kCamInit = 1,
  kCamTrain = 2,
  kSegInit = 3,
  kSegTrain = 4,
  kClsInit = 5,
  kClsTrain = 6,
};

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config key '" + key + "': expected a boolean, got '" + v + "'");
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    N out;
    if constexpr (std::is_floating_point_v<N>) {
      out = static_cast<N>(std::stod(v, &used));
    } else {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      out = static_cast<N>(std::stoull(v, &used));
    }
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': cannot parse '" + v + "' as a number");
  }
}

// Shortest text that parses back to the same double.
std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Field {
  std::string key;
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

#define SPOL_SIZE_FIELD(name)                                                                              \
  Field {                                                                                                  \
#name, [](PipelineConfig& c, const std::string& v) { c.name = parse_number<std::size_t>(#name, v); }, \
        [](const PipelineConfig& c) { return std::to_string(c.name); }                                    \
  }
#define SPOL_DOUBLE_FIELD(name)                                                                       \
  Field {                                                                                             \
#name, [](PipelineConfig& c, const std::string& v) { c.name = parse_number<double>(#name, v); }, \
        [](const PipelineConfig& c) { return format_double(c.name); }                                \
  }
#define SPOL_BOOL_FIELD(name)                                                                         \
  Field {                                                                                             \
#name, [](PipelineConfig& c, const std::string& v) { c.name = parse_bool(#name, v); },           \
        [](const PipelineConfig& c) { return std::string(c.name ? "true" : "false"); }               \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      SPOL_SIZE_FIELD(n_train),
      SPOL_SIZE_FIELD(n_test),
      SPOL_SIZE_FIELD(image_size),
      Field{"fusion", [](PipelineConfig& c, const std::string& v) { c.fusion = mffnet::parse_fusion(v); },
            [](const PipelineConfig& c) { return std::string(mffnet::fusion_name(c.fusion)); }},
      SPOL_SIZE_FIELD(fuse_k),
      SPOL_BOOL_FIELD(use_mca),
      SPOL_BOOL_FIELD(aux_loss),
      SPOL_BOOL_FIELD(gauss),
      SPOL_BOOL_FIELD(seg),
      SPOL_SIZE_FIELD(mca_latent),
      SPOL_SIZE_FIELD(fused_channels),
      Field{"upsample", [](PipelineConfig& c, const std::string& v) { c.upsample = v; },
            [](const PipelineConfig& c) { return c.upsample; }},
      SPOL_DOUBLE_FIELD(t_gauss),
      SPOL_DOUBLE_FIELD(t_fg),
      SPOL_DOUBLE_FIELD(t_bg),
      SPOL_DOUBLE_FIELD(tau),
      SPOL_DOUBLE_FIELD(lr),
      SPOL_DOUBLE_FIELD(momentum),
      SPOL_DOUBLE_FIELD(weight_decay),
      SPOL_DOUBLE_FIELD(clip_norm),
      SPOL_BOOL_FIELD(hflip),
      SPOL_SIZE_FIELD(batch_size),
      SPOL_SIZE_FIELD(cam_epochs),
      SPOL_SIZE_FIELD(seg_epochs),
      SPOL_SIZE_FIELD(cls_epochs),
      Field{"seed", [](PipelineConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); },
            [](const PipelineConfig& c) { return std::to_string(c.seed); }},
      Field{"out_dir", [](PipelineConfig& c, const std::string& v) { c.out_dir = v; },
            [](const PipelineConfig& c) { return c.out_dir.string(); }},
      SPOL_BOOL_FIELD(dump_png),
      Field{"records", [](PipelineConfig& c, const std::string& v) { c.records = v; },
            [](const PipelineConfig& c) { return c.records.string(); }},
      SPOL_BOOL_FIELD(verbose),
  };
  return table;
}

#undef SPOL_SIZE_FIELD
#undef SPOL_DOUBLE_FIELD
#undef SPOL_BOOL_FIELD

void log(const PipelineConfig& c, const std::string& msg) {
  if (c.verbose) std::clog << "[spol] " << msg << std::endl;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& content) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << content;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

void write_loss_curve(const fs::path& p, const std::vector<double>& curve) {
  std::ostringstream os;
  os << std::setprecision(9);
  for (double v : curve) os << v << '\n';
  write_file(p, os.str());
}

std::string indexed_name(const std::string& prefix, std::size_t index, const std::string& ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%06zu%s", prefix.c_str(), index, ext.c_str());
  return buf;
}

Tensor<float> load_images(const fs::path& p) { return io::read_tensor<float>(p); }

std::vector<int> load_labels(const fs::path& p) {
  const auto raw = io::read_array(p).to_i32();
  return {raw.begin(), raw.end()};
}

struct Prediction {
  std::size_t index = 0;
  std::optional<localization::BBox> box;
  std::vector<int> ranks;
};

std::string format_predictions(const std::vector<Prediction>& preds) {
  std::ostringstream os;
  os << "# index,x_min,y_min,x_max,y_max,ranks\n";
  for (const auto& p : preds) {
    os << p.index << ',';
    if (p.box) {
      os << p.box->x_min << ',' << p.box->y_min << ',' << p.box->x_max << ',' << p.box->y_max;
    } else {
      os << "-1,-1,-1,-1";
    }
    os << ',';
    for (std::size_t i = 0; i < p.ranks.size(); ++i) os << (i ? " " : "") << p.ranks[i];
    os << '\n';
  }
  return os.str();
}

std::vector<Prediction> parse_predictions(const std::string& text) {
  std::vector<Prediction> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::vector<std::string> f;
    std::string tok;
    while (std::getline(ls, tok, ',')) f.push_back(tok);
    if (f.size() != 6) throw std::runtime_error("malformed prediction line '" + line + "'");
    Prediction p;
    p.index = std::stoul(f[0]);
    const localization::BBox b{std::stoi(f[1]), std::stoi(f[2]), std::stoi(f[3]), std::stoi(f[4])};
    if (b.x_min >= 0) p.box = b;
    std::istringstream rs(f[5]);
    int c;
    while (rs >> c) p.ranks.push_back(c);
    out.push_back(std::move(p));
  }
  return out;
}

mffnet::TrainConfig train_config(const PipelineConfig& c, std::size_t epochs, std::uint64_t seed) {
  mffnet::TrainConfig t;
  t.epochs = epochs;
  t.batch_size = c.batch_size;
  t.lr = c.lr;
  t.momentum = c.momentum;
  t.weight_decay = c.weight_decay;
  t.clip_norm = c.clip_norm;
  t.hflip = c.hflip;
  t.aux_loss = c.aux_loss;
  t.seed = seed;
  return t;
}

std::function<void(std::size_t, double)> progress(const PipelineConfig& c, const std::string& what,
                                                  std::size_t steps_per_epoch) {
  if (!c.verbose) return {};
  return [&c, what, steps_per_epoch](std::size_t step, double loss) {
    if ((step + 1) % steps_per_epoch == 0) {
      log(c, what + " epoch " + std::to_string((step + 1) / steps_per_epoch) + " loss " + format_double(loss));
    }
  };
}

// Box from a CAM-resolution map resized to the image.
std::optional<localization::BBox> box_from_cam(const CamMap& cam, std::size_t image_size, double tau) {
  const CamMap up = gppl::upsample_map(cam, image_size, image_size);
  ProbMask mask{image_size, image_size, up.values};
  return localization::extract_bbox(localization::binarize(mask, tau));
}

// CAM-stage predictions: class and CAM from the CAM network alone.
std::vector<Prediction> cam_stage_predictions(const mffnet::Network<float>& net, const Tensor<float>& images,
                                              std::size_t first_index, double tau, std::vector<ProbMask>* masks) {
  NoGradGuard guard;
  std::vector<Prediction> out;
  const std::size_t n = images.dim(0), size = images.dim(2);
  constexpr std::size_t kBatch = 64;
  for (std::size_t start = 0; start < n; start += kBatch) {
    std::vector<std::size_t> idx(std::min(kBatch, n - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto result = net.forward(mffnet::slice_batch(images, idx));
    const std::size_t k = result.logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Prediction p;
      p.index = first_index + idx[i];
      p.ranks = mffnet::rank_classes(result.logits.data().subspan(i * k, k));
      const CamMap cam = mffnet::compute_cam(result.fused_map, i, net.classifier_weight(), p.ranks.front());
      p.box = box_from_cam(cam, size, tau);
      if (masks) {
        const CamMap up = gppl::upsample_map(cam, size, size);
        ProbMask m{size, size, up.values};
        for (double& v : m.values) v = std::clamp(v, segmentation::kProbClamp, 1.0 - segmentation::kProbClamp);
        masks->push_back(std::move(m));
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::vector<localization::EvalRecord> join_records(const std::vector<Prediction>& preds,
                                                   const std::vector<synthdata::ManifestEntry>& truth) {
  std::map<std::size_t, const synthdata::ManifestEntry*> by_index;
  for (const auto& t : truth) by_index[t.index] = &t;
  std::vector<localization::EvalRecord> records;
  for (const auto& p : preds) {
    auto it = by_index.find(p.index);
    if (it == by_index.end()) throw std::runtime_error("prediction for unknown test index " + std::to_string(p.index));
    records.push_back({p.box, p.ranks, it->second->box, it->second->label});
  }
  if (records.size() != truth.size()) {
    throw std::runtime_error(std::to_string(records.size()) + " predictions for " + std::to_string(truth.size()) +
                             " test images");
  }
  return records;
}

void write_mask_png(const fs::path& p, const ProbMask& m, double tau) {
  std::vector<std::uint8_t> px(m.values.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = m.values[i] >= tau ? 255 : 0;
  io::write_png(p, px, m.width, m.height, 1);
}

void write_cam_png(const fs::path& p, const CamMap& m) {
  std::vector<std::uint8_t> px(m.values.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(m.values[i], 0.0, 1.0) * 255.0));
  }
  io::write_png(p, px, m.width, m.height, 1);
}

// ---- stages ----------------------------------------------------------------

void stage_gen_data(const PipelineConfig& c) {
  const fs::path out = c.out_dir;
  const auto data_cfg = c.data();
  const auto train = synthdata::generate(c.n_train, c.seed, data_cfg, 0);
  const auto test = synthdata::generate(c.n_test, c.seed, data_cfg, c.n_train);
  io::write_tensor(out / paths::kTrainImages, synthdata::stack_images(train));
  std::vector<std::int32_t> labels;
  for (const auto& s : train) labels.push_back(s.label);
  io::write_array(out / paths::kTrainLabels, io::DenseArray::from_i32(Shape{labels.size()}, labels));
  write_file(out / paths::kTrainManifest, synthdata::format_manifest(train));
  io::write_tensor(out / paths::kTestImages, synthdata::stack_images(test));
  write_file(out / paths::kTestManifest, synthdata::format_manifest(test));
  if (c.dump_png) {
    synthdata::dump_dataset(out / "data/train_png", train);
    synthdata::dump_dataset(out / "data/test_png", test);
  }
  log(c, "gen-data: " + std::to_string(train.size()) + " train / " + std::to_string(test.size()) + " test samples");
}

void stage_train_cam(const PipelineConfig& c) {
  const fs::path out = c.out_dir;
  const auto images = load_images(out / paths::kTrainImages);
  const auto labels = load_labels(out / paths::kTrainLabels);
  mffnet::Network<float> net(c.cam_net(), mix_seed(c.seed, kCamInit));
  const auto tc = train_config(c, c.cam_epochs, mix_seed(c.seed, kCamTrain));
  const std::size_t spe = (images.dim(0) + c.batch_size - 1) / c.batch_size;
  const auto result = mffnet::train_classifier(net, images, labels, tc, progress(c, "train-cam", spe));
  mffnet::save_checkpoint(out / paths::kCamModel, net);
  write_loss_curve(out / "logs/train_cam_loss.txt", result.loss_curve);
  log(c, "train-cam: final train accuracy " + format_double(result.final_accuracy));
}

void stage_make_pseudo(const PipelineConfig& c) {
  const fs::path out = c.out_dir;
  const auto images = load_images(out / paths::kTrainImages);
  const auto labels = load_labels(out / paths::kTrainLabels);
  const auto net = mffnet::load_checkpoint<float>(out / paths::kCamModel);
  fs::remove_all(out / paths::kPseudoDir);
  fs::create_directories(out / paths::kPseudoDir);

  gppl::PseudoLabelOptions opts;
  opts.gaussian_enhance = c.gauss;
  opts.t_gauss = c.t_gauss;
  opts.t_fg = c.t_fg;
  opts.t_bg = c.t_bg;

  NoGradGuard guard;
  const std::size_t n = images.dim(0), size = images.dim(2);
  std::vector<std::size_t> written;
  std::size_t skipped = 0;
  constexpr std::size_t kBatch = 64;
  for (std::size_t start = 0; start < n; start += kBatch) {
    std::vector<std::size_t> idx(std::min(kBatch, n - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto result = net.forward(mffnet::slice_batch(images, idx));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const std::size_t index = idx[i];
      // Pseudo labels use the ground-truth training class.
      const CamMap cam = mffnet::compute_cam(result.fused_map, i, net.classifier_weight(), labels[index]);
      gppl::PseudoLabelResult pl;
      try {
        pl = gppl::make_pseudo_label(cam, size, size, opts);
      } catch (const gppl::EmptyCamError&) {
        ++skipped;
        continue;
      }
      io::write_array(out / paths::kPseudoDir / indexed_name("label", index, ".arr"),
                      io::DenseArray::from_u8(Shape{size, size}, pl.label.to_bytes()));
      io::write_array(out / paths::kPseudoDir / indexed_name("enhanced", index, ".arr"),
                      io::DenseArray::from_f64(Shape{pl.enhanced.height, pl.enhanced.width}, pl.enhanced.values));
      if (c.dump_png) {
        io::write_png(out / paths::kPseudoDir / indexed_name("label", index, ".png"), pl.label.to_bytes(), size, size, 1);
        write_cam_png(out / paths::kPseudoDir / indexed_name("cam", index, ".png"), cam);
      }
      written.push_back(index);
    }
  }
  std::ostringstream summary;
  summary << "written = " << written.size() << '\n' << "skipped_empty = " << skipped << '\n' << "indices =";
  for (std::size_t i : written) summary << ' ' << i;
  summary << '\n';
  write_file(out / paths::kPseudoSummary, summary.str());
  log(c, "make-pseudo: wrote " + std::to_string(written.size()) + " pseudo labels, skipped " +
             std::to_string(skipped) + " empty CAMs");
}

std::vector<std::size_t> pseudo_indices(const fs::path& summary_path) {
  std::istringstream in(read_file(summary_path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("indices =", 0) != 0) continue;
    std::istringstream ls(line.substr(9));
    std::vector<std::size_t> out;
    std::size_t v;
    while (ls >> v) out.push_back(v);
    return out;
  }
  throw std::runtime_error("pseudo-label summary " + summary_path.string() + " has no index list");
}

void stage_train_seg(const PipelineConfig& c) {
  const fs::path out = c.out_dir;
  // Class-agnostic: only images and pseudo labels are read here.
  const auto all_images = load_images(out / paths::kTrainImages);
  const auto indices = pseudo_indices(out / paths::kPseudoSummary);
  if (indices.empty()) throw std::runtime_error("no pseudo labels to train on (every CAM was empty)");
  std::vector<gppl::PseudoLabel> labels;
  const std::size_t size = all_images.dim(2);
  for (std::size_t i : indices) {
    const auto bytes = io::read_array(out / paths::kPseudoDir / indexed_name("label", i, ".arr")).to_u8();
    labels.push_back(gppl::PseudoLabel::from_bytes(size, size, bytes));
  }
  const auto images = mffnet::slice_batch(all_images, indices);
  mffnet::Network<float> net(c.seg_net(), mix_seed(c.seed, kSegInit));
  const auto tc = train_config(c, c.seg_epochs, mix_seed(c.seed, kSegTrain));
  const std::size_t spe = (images.dim(0) + c.batch_size - 1) / c.batch_size;
  const auto result = segmentation::train_segmenter(net, images, labels, tc, progress(c, "train-seg", spe));
  mffnet::save_checkpoint(out / paths::kSegModel, net);
  write_loss_curve(out / "logs/train_seg_loss.txt", result.loss_curve);
  log(c, "train-seg: final pixel agreement " + format_double(result.final_accuracy));
}

void stage_train_cls(const PipelineConfig& c) {
  const fs::path out = c.out_dir;
  const auto images = load_images(out / paths::kTrainImages);
  const auto labels = load_labels(out / paths::kTrainLabels);
  mffnet::Network<float> net(c.cls_net(), mix_seed(c.seed, kClsInit));
  auto tc = train_config(c, c.cls_epochs, mix_seed(c.seed, kClsTrain));
  tc.aux_loss = false;
  const std::size_t spe = (images.dim(0) + c.batch_size - 1) / c.batch_size;
  const auto result = mffnet::train_classifier(net, images, labels, tc, progress(c, "train-cls", spe));
  mffnet::save_checkpoint(out / paths::kClsModel, net);
  write_loss_curve(out / "logs/train_cls_loss.txt", result.loss_curve);
  log(c, "train-cls: final train accuracy " + format_double(result.final_accuracy));
}

void stage_infer(const PipelineConfig& c) {
  const fs::path out = c.out_dir;
  const auto images = load_images(out / paths::kTestImages);
  const std::size_t n = images.dim(0), size = images.dim(2);
  const std::size_t first_index = c.n_train;

  const auto cls = mffnet::load_checkpoint<float>(out / paths::kClsModel);
  const auto logits = mffnet::predict_logits(cls, images);

  const auto cam_net = mffnet::load_checkpoint<float>(out / paths::kCamModel);
  std::vector<ProbMask> cam_masks;
  auto cam_preds = cam_stage_predictions(cam_net, images, first_index, c.tau, c.seg ? nullptr : &cam_masks);
  for (std::size_t i = 0; i < n; ++i) cam_preds[i].ranks = mffnet::rank_classes(logits[i]);
  write_file(out / paths::kCamPredictions, format_predictions(cam_preds));

  std::vector<Prediction> preds;
  std::vector<ProbMask> masks;
  if (c.seg) {
    const auto seg = mffnet::load_checkpoint<float>(out / paths::kSegModel);
    masks = segmentation::predict_masks(seg, images);
    for (std::size_t i = 0; i < n; ++i) {
      Prediction p;
      p.index = first_index + i;
      p.box = localization::extract_bbox(localization::binarize(masks[i], c.tau));
      p.ranks = mffnet::rank_classes(logits[i]);
      preds.push_back(std::move(p));
    }
  } else {
    preds = cam_preds;
    masks = std::move(cam_masks);
  }
  write_file(out / paths::kPredictions, format_predictions(preds));
  std::vector<float> flat;
  flat.reserve(n * size * size);
  for (const auto& m : masks) {
    for (double v : m.values) flat.push_back(static_cast<float>(v));
  }
  io::write_array(out / paths::kMasks, io::DenseArray::from_f32(Shape{n, size, size}, flat));
  if (c.dump_png) {
    for (std::size_t i = 0; i < n; ++i) {
      write_mask_png(out / "infer/masks_png" / indexed_name("mask", first_index + i, ".png"), masks[i], c.tau);
    }
  }
  const auto empty = std::count_if(preds.begin(), preds.end(), [](const Prediction& p) { return !p.box; });
  log(c, "infer: " + std::to_string(n) + " test images, " + std::to_string(empty) + " empty masks");
}

void stage_eval(const PipelineConfig& c) {
  const fs::path out = c.out_dir;
  std::vector<localization::EvalRecord> records;
  if (!c.records.empty()) {
    records = localization::parse_records(read_file(c.records));
  } else {
    const auto truth = synthdata::parse_manifest(read_file(out / paths::kTestManifest));
    records = join_records(parse_predictions(read_file(out / paths::kPredictions)), truth);
    write_file(out / "eval_records.csv", localization::format_records(records));
    if (fs::exists(out / paths::kCamPredictions)) {
      const auto cam_records = join_records(parse_predictions(read_file(out / paths::kCamPredictions)), truth);
      write_file(out / paths::kCamReport, localization::metrics_to_json(localization::evaluate(cam_records)));
    }
  }
  const auto metrics = localization::evaluate(records);
  write_file(out / paths::kReportJson, localization::metrics_to_json(metrics));
  write_file(out / paths::kReportText, localization::metrics_to_text(metrics));
  log(c, "eval: top1_loc " + format_double(metrics.top1_loc) + ", top5_loc " + format_double(metrics.top5_loc) +
             ", gt_known_loc " + format_double(metrics.gt_known_loc));
}

}  // namespace

void PipelineConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
  if (n_train == 0) fail("n_train must be positive");
  if (n_test == 0) fail("n_test must be positive");
  if (!(0.0 <= t_bg && t_bg < t_fg && t_fg <= 1.0)) {
    fail("thresholds must satisfy 0 <= t_bg < t_fg <= 1 (t_bg = " + format_double(t_bg) +
         ", t_fg = " + format_double(t_fg) + ")");
  }
  if (!(0.0 <= t_gauss && t_gauss < 1.0)) fail("t_gauss must lie in [0, 1)");
  if (!(0.0 < tau && tau < 1.0)) fail("tau must lie in (0, 1)");
  if (fuse_k < 1 || fuse_k > 4) fail("fuse_k must be in 1..4, got " + std::to_string(fuse_k));
  if (use_mca && fuse_k != 3) fail("MCA needs fuse_k = 3; pass --no-mca for fuse_k = " + std::to_string(fuse_k));
  if (upsample != "bilinear" && upsample != "nearest") fail("upsample must be bilinear or nearest");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(lr > 0)) fail("lr must be positive");
  if (cam_epochs == 0 || cls_epochs == 0 || (seg && seg_epochs == 0)) fail("epoch counts must be positive");
  data().validate();
  cam_net().validate();
}

void PipelineConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(*this, value);
      return;
    }
  }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

std::string PipelineConfig::to_text() const {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.key << " = " << f.get(*this) << '\n';
  return os.str();
}

PipelineConfig PipelineConfig::from_text(const std::string& text, PipelineConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

PipelineConfig PipelineConfig::from_text(const std::string& text) { return from_text(text, PipelineConfig{}); }

mffnet::NetConfig PipelineConfig::cam_net() const {
  mffnet::NetConfig n;
  n.image_size = image_size;
  n.fuse_k = fuse_k;
  n.fusion = fusion;
  n.use_mca = use_mca;
  n.mca_latent = mca_latent;
  n.fused_channels = fused_channels;
  n.num_classes = synthdata::kNumClasses;
  n.upsample = upsample == "nearest" ? ops::UpsampleMode::kNearest : ops::UpsampleMode::kBilinear;
  n.head = mffnet::HeadKind::kClassifier;
  return n;
}

mffnet::NetConfig PipelineConfig::seg_net() const { return segmentation::segmenter_config(cam_net()); }

mffnet::NetConfig PipelineConfig::cls_net() const {
  mffnet::NetConfig n = cam_net();
  n.fuse_k = 1;
  n.use_mca = false;
  n.fusion = mffnet::FusionKind::kMul;
  return n;
}

synthdata::DataConfig PipelineConfig::data() const {
  synthdata::DataConfig d;
  d.image_size = image_size;
  return d;
}

std::vector<fs::path> stage_prerequisites(const std::string& stage, const PipelineConfig& c) {
  if (stage == "gen-data") return {};
  if (stage == "train-cam" || stage == "train-cls") return {paths::kTrainImages, paths::kTrainLabels};
  if (stage == "make-pseudo") return {paths::kTrainImages, paths::kTrainLabels, paths::kCamModel / "manifest.txt"};
  if (stage == "train-seg") return {paths::kTrainImages, paths::kPseudoSummary};
  if (stage == "infer") {
    std::vector<fs::path> p{paths::kTestImages, paths::kClsModel / "manifest.txt", paths::kCamModel / "manifest.txt"};
    if (c.seg) p.push_back(paths::kSegModel / "manifest.txt");
    return p;
  }
  if (stage == "eval") {
    if (!c.records.empty()) return {};
    return {paths::kPredictions, paths::kTestManifest};
  }
  throw std::invalid_argument("unknown stage '" + stage + "'");
}

void run_stage(const std::string& stage, const PipelineConfig& config) {
  const auto& names = stage_names();
  if (std::find(names.begin(), names.end(), stage) == names.end()) {
    throw StageError(stage, "unknown stage; expected one of gen-data, train-cam, make-pseudo, train-seg, "
                            "train-cls, infer, eval");
  }
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw StageError(stage, std::string("invalid config: ") + e.what());
  }
  std::vector<fs::path> missing;
  for (const auto& p : stage_prerequisites(stage, config)) {
    if (!fs::exists(config.out_dir / p)) missing.push_back(config.out_dir / p);
  }
  if (stage == "eval" && !config.records.empty() && !fs::exists(config.records)) missing.push_back(config.records);
  if (!missing.empty()) {
    std::string msg = "missing prerequisites:";
    for (const auto& m : missing) msg += "\n  " + m.string();
    throw StageError(stage, msg);
  }
  fs::create_directories(config.out_dir);
  write_file(config.out_dir / paths::kRunManifest, config.to_text());
  const auto t0 = std::chrono::steady_clock::now();
  try {
    if (stage == "gen-data") stage_gen_data(config);
    if (stage == "train-cam") stage_train_cam(config);
    if (stage == "make-pseudo") stage_make_pseudo(config);
    if (stage == "train-seg") stage_train_seg(config);
    if (stage == "train-cls") stage_train_cls(config);
    if (stage == "infer") stage_infer(config);
    if (stage == "eval") stage_eval(config);
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << secs;
  log(config, stage + " done in " + os.str() + " s");
}

std::vector<std::string> pipeline_stages(const PipelineConfig& config) {
  std::vector<std::string> stages{"gen-data", "train-cam"};
  if (config.seg) {
    stages.push_back("make-pseudo");
    stages.push_back("train-seg");
  }
  stages.push_back("train-cls");
  stages.push_back("infer");
  stages.push_back("eval");
  return stages;
}

localization::Metrics run_pipeline(const PipelineConfig& config) {
  for (const auto& stage : pipeline_stages(config)) run_stage(stage, config);
  return localization::metrics_from_json(read_file(config.out_dir / paths::kReportJson));
}

}  // namespace spol::pipeline
