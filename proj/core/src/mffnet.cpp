#include "spol/mffnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "spol/array_io.hpp"
#include "spol/optim.hpp"
#include "spol/rng.hpp"

namespace spol::mffnet {

namespace {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

// Kaiming-uniform for ReLU layers: bound = sqrt(6 / fan_in).
template <typename T>
Tensor<T> kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
  return uniform_tensor<T>(std::move(shape), std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
}

// Default linear-layer init: bound = 1 / sqrt(fan_in).
template <typename T>
Tensor<T> lecun(Shape shape, std::size_t fan_in, Rng& rng) {
  return uniform_tensor<T>(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

template <typename T>
Tensor<T> zeros_param(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <typename T>
Tensor<T> conv_bias_relu(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  const std::size_t oc = w.dim(0);
  auto y = ops::conv2d(x, w, stride, pad);
  y = ops::add(y, ops::reshape(b, Shape{1, oc, 1, 1}));
  return ops::relu(y);
}

template <typename T>
Tensor<T> flatten_pooled(const Tensor<T>& pooled) {
  return ops::reshape(pooled, Shape{pooled.dim(0), pooled.dim(1)});
}

template <typename T>
void require_same_shape(const std::vector<Tensor<T>>& branches, const char* op) {
  for (const auto& b : branches) {
    if (b.shape() != branches.front().shape()) {
      throw ShapeError(std::string(op) + ": branch shape " + shape_to_string(b.shape()) +
                       " differs from " + shape_to_string(branches.front().shape()));
    }
    if (b.ndim() != 4) throw ShapeError(std::string(op) + ": branches must be 4-D");
  }
}

template <typename T>
FusionOutput<T> pooled_output(Tensor<T> fused) {
  FusionOutput<T> out;
  out.pooled = flatten_pooled(ops::global_avg_pool(fused));
  out.fused_map = std::move(fused);
  return out;
}

template <typename T>
Tensor<T> product(const std::vector<Tensor<T>>& branches) {
  Tensor<T> acc = branches.front();
  for (std::size_t i = 1; i < branches.size(); ++i) acc = ops::mul(acc, branches[i]);
  return acc;
}

template <typename T>
Tensor<T> total(const std::vector<Tensor<T>>& branches) {
  Tensor<T> acc = branches.front();
  for (std::size_t i = 1; i < branches.size(); ++i) acc = ops::add(acc, branches[i]);
  return acc;
}

std::string require_key(const std::map<std::string, std::string>& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw std::invalid_argument("network config is missing key '" + key + "'");
  return it->second;
}

}  // namespace

const char* fusion_name(FusionKind kind) {
  switch (kind) {
    case FusionKind::kMul:
      return "mul";
    case FusionKind::kAdd:
      return "add";
    case FusionKind::kConcat:
      return "concat";
  }
  return "?";
}

FusionKind parse_fusion(const std::string& name) {
  if (name == "mul") return FusionKind::kMul;
  if (name == "add") return FusionKind::kAdd;
  if (name == "concat") return FusionKind::kConcat;
  throw std::invalid_argument("unknown fusion kind '" + name + "' (expected mul, add or concat)");
}

void NetConfig::validate() const {
  if (fuse_k < 1 || fuse_k > 4) {
    throw std::invalid_argument("fuse_k must be in 1..4, got " + std::to_string(fuse_k));
  }
  if (use_mca && fuse_k != 3) {
    throw std::invalid_argument("MCA needs exactly three fused branches (fuse_k = 3); got fuse_k = " +
                                std::to_string(fuse_k) + ", disable MCA for other depths");
  }
  if (image_size % 16 != 0 || image_size == 0) {
    throw std::invalid_argument("image_size must be a positive multiple of 16, got " +
                                std::to_string(image_size));
  }
  if (num_classes < 1 || fused_channels < 1 || mca_latent < 1 || in_channels < 1) {
    throw std::invalid_argument("network dimensions must be positive");
  }
}

std::map<std::string, std::string> NetConfig::to_map() const {
  std::map<std::string, std::string> m;
  m["in_channels"] = std::to_string(in_channels);
  m["image_size"] = std::to_string(image_size);
  std::ostringstream ch;
  for (std::size_t i = 0; i < 4; ++i) ch << (i ? "," : "") << stage_channels[i];
  m["stage_channels"] = ch.str();
  m["fuse_k"] = std::to_string(fuse_k);
  m["fusion"] = fusion_name(fusion);
  m["use_mca"] = use_mca ? "1" : "0";
  m["mca_latent"] = std::to_string(mca_latent);
  m["fused_channels"] = std::to_string(fused_channels);
  m["num_classes"] = std::to_string(num_classes);
  m["upsample"] = upsample == ops::UpsampleMode::kBilinear ? "bilinear" : "nearest";
  m["head"] = head == HeadKind::kClassifier ? "classifier" : "segmenter";
  return m;
}

NetConfig NetConfig::from_map(const std::map<std::string, std::string>& m) {
  NetConfig c;
  c.in_channels = std::stoul(require_key(m, "in_channels"));
  c.image_size = std::stoul(require_key(m, "image_size"));
  std::istringstream ch(require_key(m, "stage_channels"));
  std::string tok;
  for (std::size_t i = 0; i < 4; ++i) {
    if (!std::getline(ch, tok, ',')) throw std::invalid_argument("stage_channels needs four values");
    c.stage_channels[i] = std::stoul(tok);
  }
  c.fuse_k = std::stoul(require_key(m, "fuse_k"));
  c.fusion = parse_fusion(require_key(m, "fusion"));
  c.use_mca = require_key(m, "use_mca") == "1";
  c.mca_latent = std::stoul(require_key(m, "mca_latent"));
  c.fused_channels = std::stoul(require_key(m, "fused_channels"));
  c.num_classes = std::stoul(require_key(m, "num_classes"));
  const std::string up = require_key(m, "upsample");
  if (up == "bilinear") {
    c.upsample = ops::UpsampleMode::kBilinear;
  } else if (up == "nearest") {
    c.upsample = ops::UpsampleMode::kNearest;
  } else {
    throw std::invalid_argument("unknown upsample mode '" + up + "'");
  }
  const std::string head = require_key(m, "head");
  if (head == "classifier") {
    c.head = HeadKind::kClassifier;
  } else if (head == "segmenter") {
    c.head = HeadKind::kSegmenter;
  } else {
    throw std::invalid_argument("unknown head kind '" + head + "'");
  }
  c.validate();
  return c;
}

template <typename T>
std::vector<Tensor<T>> mca(const std::vector<Tensor<T>>& features, const McaParams<T>& params) {
  if (features.size() != 3) {
    throw std::invalid_argument("mca: expected exactly 3 branches, got " + std::to_string(features.size()));
  }
  if (params.squeeze_weight.size() != 3 || params.expand_weight.size() != 3) {
    throw std::invalid_argument("mca: parameters for 3 branches required");
  }
  std::vector<Tensor<T>> latent;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto pooled = flatten_pooled(ops::global_avg_pool(features[i]));
    latent.push_back(ops::linear(pooled, params.squeeze_weight[i], params.squeeze_bias[i]));
  }
  const Tensor<T> shared = product(latent);
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t n = features[i].dim(0), c = features[i].dim(1);
    auto attention = ops::sigmoid(ops::linear(shared, params.expand_weight[i], params.expand_bias[i]));
    out.push_back(ops::mul(features[i], ops::reshape(attention, Shape{n, c, 1, 1})));
  }
  return out;
}

template <typename T>
FusionOutput<T> fuse_multiplicative(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& z) {
  std::vector<Tensor<T>> branches{x, y, z};
  require_same_shape(branches, "fuse_multiplicative");
  return pooled_output(product(branches));
}

template <typename T>
FusionOutput<T> fuse_additive(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& z) {
  std::vector<Tensor<T>> branches{x, y, z};
  require_same_shape(branches, "fuse_additive");
  return pooled_output(total(branches));
}

template <typename T>
FusionOutput<T> fuse_concat(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& z,
                            const Tensor<T>& projection, const Tensor<T>& bias) {
  std::vector<Tensor<T>> branches{x, y, z};
  require_same_shape(branches, "fuse_concat");
  auto cat = ops::concat_channels(branches);
  auto fused = ops::conv2d(cat, projection, 1, 0);
  if (bias.defined()) fused = ops::add(fused, ops::reshape(bias, Shape{1, projection.dim(0), 1, 1}));
  return pooled_output(std::move(fused));
}

template <typename T>
CamMap compute_cam(const Tensor<T>& fused_map, std::size_t image_index, const Tensor<T>& classifier_weight,
                   int class_id) {
  if (fused_map.ndim() != 4) throw ShapeError("compute_cam: fused map must be 4-D");
  const std::size_t c = fused_map.dim(1), h = fused_map.dim(2), w = fused_map.dim(3);
  if (classifier_weight.ndim() != 2 || classifier_weight.dim(1) != c) {
    throw ShapeError("compute_cam: classifier weight " + shape_to_string(classifier_weight.shape()) +
                     " does not match " + std::to_string(c) + " fused channels");
  }
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= classifier_weight.dim(0)) {
    throw std::out_of_range("compute_cam: class " + std::to_string(class_id) + " out of range");
  }
  if (image_index >= fused_map.dim(0)) throw std::out_of_range("compute_cam: image index out of range");
  CamMap cam(h, w);
  cam.source_class = class_id;
  const auto data = fused_map.data();
  const auto wrow = classifier_weight.data().subspan(static_cast<std::size_t>(class_id) * c, c);
  const std::size_t hw = h * w;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double wc = wrow[ch];
    const T* plane = data.data() + (image_index * c + ch) * hw;
    for (std::size_t i = 0; i < hw; ++i) cam.values[i] += wc * static_cast<double>(plane[i]);
  }
  for (double& v : cam.values) v = std::max(v, 0.0);
  const auto [lo, hi] = std::minmax_element(cam.values.begin(), cam.values.end());
  const double mn = *lo, mx = *hi;
  if (mx <= 0.0) {
    std::fill(cam.values.begin(), cam.values.end(), 0.0);
  } else if (mx - mn > 0.0) {
    for (double& v : cam.values) v = (v - mn) / (mx - mn);
  } else {
    std::fill(cam.values.begin(), cam.values.end(), 1.0);
  }
  return cam;
}

template <typename T>
Network<T>::Network(NetConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed, 0x6d66666eULL);
  std::size_t in_c = config_.in_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t oc = config_.stage_channels[s];
    stage_weight_.push_back(kaiming<T>(Shape{oc, in_c, 3, 3}, in_c * 9, rng));
    stage_bias_.push_back(zeros_param<T>(Shape{oc}));
    in_c = oc;
  }
  const std::size_t k = config_.fuse_k;
  const std::size_t cf = config_.fused_channels;
  if (config_.use_mca) {
    mca_.latent = config_.mca_latent;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t ci = config_.stage_channels[4 - k + i];
      mca_.squeeze_weight.push_back(lecun<T>(Shape{mca_.latent, ci}, ci, rng));
      mca_.squeeze_bias.push_back(zeros_param<T>(Shape{mca_.latent}));
      mca_.expand_weight.push_back(lecun<T>(Shape{ci, mca_.latent}, mca_.latent, rng));
      mca_.expand_bias.push_back(zeros_param<T>(Shape{ci}));
    }
  }
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t ci = config_.stage_channels[4 - k + i];
    align_weight_.push_back(kaiming<T>(Shape{cf, ci, 1, 1}, ci, rng));
    align_bias_.push_back(zeros_param<T>(Shape{cf}));
  }
  if (config_.fusion == FusionKind::kConcat) {
    concat_weight_ = lecun<T>(Shape{cf, cf * k, 1, 1}, cf * k, rng);
    concat_bias_ = zeros_param<T>(Shape{cf});
  }
  if (config_.head == HeadKind::kClassifier) {
    cls_weight_ = lecun<T>(Shape{config_.num_classes, cf}, cf, rng);
    cls_bias_ = zeros_param<T>(Shape{config_.num_classes});
    const std::size_t deep = config_.stage_channels[3];
    aux_weight_ = lecun<T>(Shape{config_.num_classes, deep}, deep, rng);
    aux_bias_ = zeros_param<T>(Shape{config_.num_classes});
  } else {
    seg_weight_ = lecun<T>(Shape{1, cf, 1, 1}, cf, rng);
    seg_bias_ = zeros_param<T>(Shape{1});
  }
}

template <typename T>
BackboneFeatures<T> Network<T>::backbone(const Tensor<T>& image) const {
  if (image.ndim() != 4 || image.dim(1) != config_.in_channels || image.dim(2) != config_.image_size ||
      image.dim(3) != config_.image_size) {
    throw ShapeError("network input " + shape_to_string(image.shape()) + " does not match (N, " +
                     std::to_string(config_.in_channels) + ", " + std::to_string(config_.image_size) + ", " +
                     std::to_string(config_.image_size) + ")");
  }
  BackboneFeatures<T> features;
  Tensor<T> x = image;
  for (std::size_t s = 0; s < 4; ++s) {
    x = conv_bias_relu(x, stage_weight_[s], stage_bias_[s], 2, 1);
    features.stages.push_back(x);
  }
  return features;
}

template <typename T>
std::vector<Tensor<T>> Network<T>::fused_branches(const BackboneFeatures<T>& features) const {
  const std::size_t k = config_.fuse_k;
  std::vector<Tensor<T>> selected(features.stages.end() - static_cast<std::ptrdiff_t>(k), features.stages.end());
  if (config_.use_mca) selected = mca(selected, mca_);
  const std::size_t h = selected.front().dim(2), w = selected.front().dim(3);
  std::vector<Tensor<T>> aligned;
  for (std::size_t i = 0; i < k; ++i) {
    // Linear 1x1 projection; no activation before fusion.
    auto a = ops::conv2d(selected[i], align_weight_[i], 1, 0);
    a = ops::add(a, ops::reshape(align_bias_[i], Shape{1, align_weight_[i].dim(0), 1, 1}));
    if (a.dim(2) != h || a.dim(3) != w) a = ops::upsample(a, h, w, config_.upsample);
    aligned.push_back(std::move(a));
  }
  return aligned;
}

template <typename T>
FusionOutput<T> Network<T>::fuse(const std::vector<Tensor<T>>& branches) const {
  if (branches.size() == 3) {
    switch (config_.fusion) {
      case FusionKind::kMul:
        return fuse_multiplicative(branches[0], branches[1], branches[2]);
      case FusionKind::kAdd:
        return fuse_additive(branches[0], branches[1], branches[2]);
      case FusionKind::kConcat:
        return fuse_concat(branches[0], branches[1], branches[2], concat_weight_, concat_bias_);
    }
  }
  require_same_shape(branches, "fuse");
  switch (config_.fusion) {
    case FusionKind::kMul:
      return pooled_output(product(branches));
    case FusionKind::kAdd:
      return pooled_output(total(branches));
    case FusionKind::kConcat: {
      auto cat = branches.size() == 1 ? branches.front() : ops::concat_channels(branches);
      auto fused = ops::conv2d(cat, concat_weight_, 1, 0);
      fused = ops::add(fused, ops::reshape(concat_bias_, Shape{1, concat_weight_.dim(0), 1, 1}));
      return pooled_output(std::move(fused));
    }
  }
  throw std::logic_error("unreachable fusion kind");
}

template <typename T>
FusionOutput<T> Network<T>::forward(const Tensor<T>& image) const {
  const auto features = backbone(image);
  FusionOutput<T> out = fuse(fused_branches(features));
  if (config_.head == HeadKind::kClassifier) {
    out.logits = ops::linear(out.pooled, cls_weight_, cls_bias_);
    const auto deep = flatten_pooled(ops::global_avg_pool(features.stages.back()));
    out.aux_logits = ops::linear(deep, aux_weight_, aux_bias_);
  }
  return out;
}

template <typename T>
Tensor<T> Network<T>::segment(const Tensor<T>& image) const {
  if (config_.head != HeadKind::kSegmenter) throw std::logic_error("segment() called on a classifier network");
  const auto out = fuse(fused_branches(backbone(image)));
  auto logit = ops::conv2d(out.fused_map, seg_weight_, 1, 0);
  logit = ops::add(logit, ops::reshape(seg_bias_, Shape{1, 1, 1, 1}));
  auto prob = ops::sigmoid(logit);
  if (prob.dim(2) != config_.image_size || prob.dim(3) != config_.image_size) {
    prob = ops::upsample_bilinear(prob, config_.image_size, config_.image_size);
  }
  return prob;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Network<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (std::size_t s = 0; s < 4; ++s) {
    out.emplace_back("stage" + std::to_string(s) + ".weight", stage_weight_[s]);
    out.emplace_back("stage" + std::to_string(s) + ".bias", stage_bias_[s]);
  }
  for (std::size_t i = 0; i < mca_.squeeze_weight.size(); ++i) {
    const std::string p = "mca" + std::to_string(i);
    out.emplace_back(p + ".squeeze.weight", mca_.squeeze_weight[i]);
    out.emplace_back(p + ".squeeze.bias", mca_.squeeze_bias[i]);
    out.emplace_back(p + ".expand.weight", mca_.expand_weight[i]);
    out.emplace_back(p + ".expand.bias", mca_.expand_bias[i]);
  }
  for (std::size_t i = 0; i < align_weight_.size(); ++i) {
    out.emplace_back("align" + std::to_string(i) + ".weight", align_weight_[i]);
    out.emplace_back("align" + std::to_string(i) + ".bias", align_bias_[i]);
  }
  if (concat_weight_.defined()) {
    out.emplace_back("concat.weight", concat_weight_);
    out.emplace_back("concat.bias", concat_bias_);
  }
  if (cls_weight_.defined()) {
    out.emplace_back("cls.weight", cls_weight_);
    out.emplace_back("cls.bias", cls_bias_);
    out.emplace_back("aux.weight", aux_weight_);
    out.emplace_back("aux.bias", aux_bias_);
  }
  if (seg_weight_.defined()) {
    out.emplace_back("seg.weight", seg_weight_);
    out.emplace_back("seg.bias", seg_bias_);
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> Network<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

template <typename T>
void Network<T>::load_parameter(const std::string& name, const Tensor<T>& value) {
  for (auto& [pname, t] : named_parameters()) {
    if (pname != name) continue;
    if (t.shape() != value.shape()) {
      throw ShapeError("parameter " + name + " has shape " + shape_to_string(t.shape()) + ", got " +
                       shape_to_string(value.shape()));
    }
    auto dst = Tensor<T>(t).mutable_data();
    std::copy(value.data().begin(), value.data().end(), dst.begin());
    return;
  }
  throw std::invalid_argument("unknown parameter '" + name + "'");
}

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Network<T>& net) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  for (const auto& [k, v] : net.config().to_map()) manifest << k << " = " << v << '\n';
  for (const auto& [name, t] : net.named_parameters()) {
    manifest << "param = " << name << '\n';
    io::write_tensor(dir / (name + ".arr"), t);
  }
  if (!manifest) throw std::runtime_error("cannot write checkpoint manifest in " + dir.string());
}

template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw std::runtime_error("missing checkpoint manifest " + (dir / "manifest.txt").string());
  std::map<std::string, std::string> config;
  std::vector<std::string> params;
  std::string line;
  while (std::getline(manifest, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), value = line.substr(eq + 3);
    if (key == "param") {
      params.push_back(value);
    } else {
      config[key] = value;
    }
  }
  Network<T> net(NetConfig::from_map(config), 0);
  const auto expected = net.named_parameters();
  if (expected.size() != params.size()) {
    throw std::runtime_error("checkpoint " + dir.string() + " lists " + std::to_string(params.size()) +
                             " parameters, network expects " + std::to_string(expected.size()));
  }
  for (const auto& name : params) net.load_parameter(name, io::read_tensor<T>(dir / (name + ".arr")));
  return net;
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& images, std::span<const std::size_t> indices) {
  const Shape& s = images.shape();
  const std::size_t per = images.numel() / s[0];
  std::vector<T> out(indices.size() * per);
  const auto src = images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= s[0]) throw std::out_of_range("slice_batch: index out of range");
    std::copy_n(src.data() + indices[i] * per, per, out.data() + i * per);
  }
  Shape shape = s;
  shape[0] = indices.size();
  return Tensor<T>(std::move(shape), std::move(out));
}

void mirror_rows(std::span<float> values, std::size_t width) {
  if (width == 0 || values.size() % width != 0) throw std::invalid_argument("mirror_rows: size is not a multiple of width");
  for (std::size_t start = 0; start < values.size(); start += width) {
    std::reverse(values.begin() + static_cast<std::ptrdiff_t>(start),
                 values.begin() + static_cast<std::ptrdiff_t>(start + width));
  }
}

std::vector<bool> flip_draws(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  Rng rng(seed, 0x464c4950ULL + epoch);
  std::vector<bool> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = rng.bernoulli(0.5);
  return out;
}

std::vector<int> rank_classes(std::span<const float> logits) {
  std::vector<int> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  return order;
}

std::vector<std::vector<float>> predict_logits(const Network<float>& net, const Tensor<float>& images,
                                               std::size_t batch_size) {
  NoGradGuard guard;
  const std::size_t n = images.dim(0);
  std::vector<std::vector<float>> out;
  out.reserve(n);
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, n - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto result = net.forward(slice_batch(images, idx));
    const std::size_t k = result.logits.dim(1);
    const auto d = result.logits.data();
    for (std::size_t i = 0; i < idx.size(); ++i) out.emplace_back(d.begin() + i * k, d.begin() + (i + 1) * k);
  }
  return out;
}

TrainResult train_classifier(Network<float>& net, const Tensor<float>& images, std::span<const int> labels,
                             const TrainConfig& config, const std::function<void(std::size_t, double)>& on_step) {
  if (net.config().head != HeadKind::kClassifier) throw std::logic_error("train_classifier needs a classifier head");
  const std::size_t n = images.dim(0);
  if (labels.size() != n) throw std::invalid_argument("train_classifier: image/label count mismatch");
  Sgd<float> opt(net.parameters(), static_cast<float>(config.lr), static_cast<float>(config.momentum),
                 static_cast<float>(config.weight_decay));
  TrainResult result;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle_rng(config.seed, 0x5348554646ULL + epoch);
    for (std::size_t i = n; i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i - 1)))]);
    }
    const auto flips = config.hflip ? flip_draws(config.seed, epoch, n) : std::vector<bool>(n, false);
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, n - start);
      std::span<const std::size_t> idx(order.data() + start, count);
      std::vector<int> batch_labels(count);
      for (std::size_t i = 0; i < count; ++i) batch_labels[i] = labels[idx[i]];
      auto batch = slice_batch(images, idx);
      const std::size_t per = batch.numel() / count;
      for (std::size_t i = 0; i < count; ++i) {
        if (flips[start + i]) mirror_rows(batch.mutable_data().subspan(i * per, per), batch.dim(3));
      }
      const auto out = net.forward(batch);
      auto loss = ops::cross_entropy(out.logits, std::span<const int>(batch_labels));
      if (config.aux_loss) loss = ops::add(loss, ops::cross_entropy(out.aux_logits, std::span<const int>(batch_labels)));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw TrainingDiverged("classifier training diverged at step " + std::to_string(step) + " (epoch " +
                               std::to_string(epoch) + "): loss = " + std::to_string(value));
      }
      opt.zero_grad();
      backward(loss);
      opt.clip_grad_norm(config.clip_norm);
      opt.step();
      const auto logits = out.logits.data();
      const std::size_t k = out.logits.dim(1);
      for (std::size_t i = 0; i < count; ++i) {
        if (rank_classes(logits.subspan(i * k, k)).front() == batch_labels[i]) ++correct;
      }
      result.loss_curve.push_back(value);
      if (on_step) on_step(step, value);
      ++step;
      if (config.max_steps && step >= config.max_steps) {
        result.final_accuracy = static_cast<double>(correct) / static_cast<double>(start + count);
        return result;
      }
    }
    result.final_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  }
  return result;
}

#define SPOL_INSTANTIATE_MFF(T)                                                                              \
  template std::vector<Tensor<T>> mca(const std::vector<Tensor<T>>&, const McaParams<T>&);                 \
  template FusionOutput<T> fuse_multiplicative(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template FusionOutput<T> fuse_additive(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template FusionOutput<T> fuse_concat(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                       const Tensor<T>&, const Tensor<T>&);                                \
  template CamMap compute_cam(const Tensor<T>&, std::size_t, const Tensor<T>&, int);                       \
  template class Network<T>;                                                                                \
  template void save_checkpoint(const std::filesystem::path&, const Network<T>&);                         \
  template Network<T> load_checkpoint(const std::filesystem::path&);                                       \
  template Tensor<T> slice_batch(const Tensor<T>&, std::span<const std::size_t>);

SPOL_INSTANTIATE_MFF(float)
SPOL_INSTANTIATE_MFF(double)

#undef SPOL_INSTANTIATE_MFF

}  // namespace spol::mffnet
