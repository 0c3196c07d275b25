#include "spol/gppl.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "spol/ops.hpp"

namespace spol::gppl {

WeightedMoments weighted_moments(const CamMap& cam) {
  WeightedMoments m;
  double sx = 0, sy = 0;
  for (std::size_t r = 0; r < cam.height; ++r) {
    for (std::size_t c = 0; c < cam.width; ++c) {
      const double w = cam.at(r, c);
      if (w < 0 || std::isnan(w)) {
        throw std::invalid_argument("weighted_moments: CAM weights must be non-negative, got " + std::to_string(w) +
                                    " at (" + std::to_string(r) + ", " + std::to_string(c) + ")");
      }
      m.total_weight += w;
      sx += w * static_cast<double>(c);
      sy += w * static_cast<double>(r);
    }
  }
  if (!(m.total_weight > 0)) throw EmptyCamError("empty CAM: no positive response to fit a Gaussian to");
  m.mean_x = sx / m.total_weight;
  m.mean_y = sy / m.total_weight;
  double vxx = 0, vyy = 0, vxy = 0;
  for (std::size_t r = 0; r < cam.height; ++r) {
    for (std::size_t c = 0; c < cam.width; ++c) {
      const double w = cam.at(r, c);
      if (w == 0) continue;
      const double dx = static_cast<double>(c) - m.mean_x;
      const double dy = static_cast<double>(r) - m.mean_y;
      vxx += w * dx * dx;
      vyy += w * dy * dy;
      vxy += w * dx * dy;
    }
  }
  m.var_x = vxx / m.total_weight;
  m.var_y = vyy / m.total_weight;
  m.cov_xy = vxy / m.total_weight;
  return m;
}

GaussianParams fit_weighted_gaussian(const CamMap& cam) {
  const WeightedMoments m = weighted_moments(cam);
  GaussianParams p;
  p.mu_x = m.mean_x;
  p.mu_y = m.mean_y;
  const double raw_sx = std::sqrt(std::max(m.var_x, 0.0));
  const double raw_sy = std::sqrt(std::max(m.var_y, 0.0));
  p.sigma_x = std::max(raw_sx, kSigmaFloor);
  p.sigma_y = std::max(raw_sy, kSigmaFloor);
  if (raw_sx < kSigmaFloor || raw_sy < kSigmaFloor) {
    p.rho = 0;
  } else {
    p.rho = std::clamp(m.cov_xy / (raw_sx * raw_sy), -kRhoLimit, kRhoLimit);
  }
  return p;
}

double gaussian_density(const GaussianParams& p, double x, double y) {
  const double dx = (x - p.mu_x) / p.sigma_x;
  const double dy = (y - p.mu_y) / p.sigma_y;
  const double one_minus_rho2 = 1.0 - p.rho * p.rho;
  const double theta = dx * dx - 2.0 * p.rho * dx * dy + dy * dy;
  return std::exp(-theta / (2.0 * one_minus_rho2)) /
         (2.0 * std::numbers::pi * p.sigma_x * p.sigma_y * std::sqrt(one_minus_rho2));
}

CamMap render_gaussian_density(const GaussianParams& p, std::size_t height, std::size_t width) {
  CamMap out(height, width);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      out.at(r, c) = gaussian_density(p, static_cast<double>(c), static_cast<double>(r));
    }
  }
  return out;
}

CamMap render_gaussian(const GaussianParams& p, std::size_t height, std::size_t width) {
  CamMap out = render_gaussian_density(p, height, width);
  const double peak = *std::max_element(out.values.begin(), out.values.end());
  if (peak > 0) {
    for (double& v : out.values) v /= peak;
  } else {
    // Density underflowed everywhere (mean far outside a tiny map).
    std::fill(out.values.begin(), out.values.end(), 0.0);
  }
  return out;
}

CamMap enhance_cam(const CamMap& cam, const CamMap& gmap, double t_gauss) {
  if (cam.height != gmap.height || cam.width != gmap.width) {
    throw std::invalid_argument("enhance_cam: CAM is " + std::to_string(cam.height) + "x" +
                                std::to_string(cam.width) + " but Gaussian map is " +
                                std::to_string(gmap.height) + "x" + std::to_string(gmap.width));
  }
  CamMap out = cam;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    const double gated = gmap.values[i] > t_gauss ? gmap.values[i] : 0.0;
    out.values[i] = std::max(cam.values[i], gated);
  }
  return out;
}

std::vector<float> PseudoLabel::target() const {
  std::vector<float> g(classes.size());
  for (std::size_t i = 0; i < classes.size(); ++i) g[i] = classes[i] == PixelClass::kForeground ? 1.0f : 0.0f;
  return g;
}

std::vector<float> PseudoLabel::weight() const {
  std::vector<float> w(classes.size());
  for (std::size_t i = 0; i < classes.size(); ++i) w[i] = classes[i] == PixelClass::kConflict ? 0.0f : 1.0f;
  return w;
}

std::vector<std::uint8_t> PseudoLabel::to_bytes() const {
  std::vector<std::uint8_t> out(classes.size());
  for (std::size_t i = 0; i < classes.size(); ++i) out[i] = static_cast<std::uint8_t>(classes[i]);
  return out;
}

PseudoLabel PseudoLabel::from_bytes(std::size_t height, std::size_t width, const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() != height * width) throw std::invalid_argument("pseudo label: byte plane size mismatch");
  PseudoLabel label{height, width, {}};
  label.classes.reserve(bytes.size());
  for (std::uint8_t b : bytes) {
    switch (b) {
      case 0:
        label.classes.push_back(PixelClass::kBackground);
        break;
      case 128:
        label.classes.push_back(PixelClass::kConflict);
        break;
      case 255:
        label.classes.push_back(PixelClass::kForeground);
        break;
      default:
        throw std::invalid_argument("pseudo label: invalid byte value " + std::to_string(b));
    }
  }
  return label;
}

std::size_t PseudoLabel::count(PixelClass c) const {
  return static_cast<std::size_t>(std::count(classes.begin(), classes.end(), c));
}

PseudoLabel trichotomize(const CamMap& enhanced, double t_fg, double t_bg) {
  if (!(0.0 <= t_bg && t_bg < t_fg && t_fg <= 1.0)) {
    throw std::invalid_argument("trichotomize: thresholds must satisfy 0 <= t_bg < t_fg <= 1, got t_bg = " +
                                std::to_string(t_bg) + ", t_fg = " + std::to_string(t_fg));
  }
  PseudoLabel label{enhanced.height, enhanced.width, {}};
  label.classes.reserve(enhanced.values.size());
  for (double v : enhanced.values) {
    if (v > t_fg) {
      label.classes.push_back(PixelClass::kForeground);
    } else if (v < t_bg) {
      label.classes.push_back(PixelClass::kBackground);
    } else {
      label.classes.push_back(PixelClass::kConflict);
    }
  }
  return label;
}

CamMap upsample_map(const CamMap& map, std::size_t height, std::size_t width) {
  if (map.height == height && map.width == width) return map;
  NoGradGuard guard;
  Tensor<double> t(Shape{1, 1, map.height, map.width}, map.values);
  const auto up = ops::upsample_bilinear(t, height, width);
  CamMap out(height, width, std::vector<double>(up.data().begin(), up.data().end()));
  out.source_class = map.source_class;
  return out;
}

PseudoLabelResult make_pseudo_label(const CamMap& cam, std::size_t out_height, std::size_t out_width,
                                    const PseudoLabelOptions& options) {
  PseudoLabelResult result;
  const GaussianParams params = fit_weighted_gaussian(cam);
  if (options.gaussian_enhance) {
    result.enhanced = enhance_cam(cam, render_gaussian(params, cam.height, cam.width), options.t_gauss);
  } else {
    result.enhanced = cam;
  }
  result.label = trichotomize(upsample_map(result.enhanced, out_height, out_width), options.t_fg, options.t_bg);
  return result;
}

}  // namespace spol::gppl
