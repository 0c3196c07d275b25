#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "spol/maps.hpp"

namespace spol::gppl {

inline constexpr double kSigmaFloor = 1e-6;
inline constexpr double kRhoLimit = 1.0 - 1e-6;

inline constexpr double kDefaultGaussThreshold = 0.7;
inline constexpr double kDefaultForeground = 0.5;
inline constexpr double kDefaultBackground = 0.004;

class EmptyCamError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Weighted bivariate Gaussian in CAM pixel coordinates (x = column, y = row).
struct GaussianParams {
  double mu_x = 0, mu_y = 0;
  double sigma_x = kSigmaFloor, sigma_y = kSigmaFloor;
  double rho = 0;
};

/// Raw weighted moments, before any floor or clamp.
struct WeightedMoments {
  double total_weight = 0;
  double mean_x = 0, mean_y = 0;
  double var_x = 0, var_y = 0;
  double cov_xy = 0;
};

/// Plain weighted first and second central moments (no Bessel correction).
/// Throws EmptyCamError if no weight is positive and std::invalid_argument
/// on negative weights.
WeightedMoments weighted_moments(const CamMap& cam);

/// Fits mu, sigma and rho using CAM responses as sample weights. Sigmas are
/// floored at kSigmaFloor and rho is clamped to +/-kRhoLimit; rho is 0 when
/// either raw sigma is below the floor.
GaussianParams fit_weighted_gaussian(const CamMap& cam);

/// Bivariate normal density at (x, y).
double gaussian_density(const GaussianParams& p, double x, double y);

/// Density evaluated at every pixel center, unnormalized.
CamMap render_gaussian_density(const GaussianParams& p, std::size_t height, std::size_t width);

/// Density divided by its maximum over the map, so the peak is 1.
CamMap render_gaussian(const GaussianParams& p, std::size_t height, std::size_t width);

/// Gates gmap (values <= t_gauss become 0) and takes the elementwise max
/// with cam.
CamMap enhance_cam(const CamMap& cam, const CamMap& gmap, double t_gauss = kDefaultGaussThreshold);

enum class PixelClass : std::uint8_t { kBackground = 0, kConflict = 128, kForeground = 255 };

struct PseudoLabel {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<PixelClass> classes;

  /// 1 for foreground, else 0.
  std::vector<float> target() const;
  /// 0 for conflict, else 1.
  std::vector<float> weight() const;
  /// 0 = background, 255 = foreground, 128 = conflict.
  std::vector<std::uint8_t> to_bytes() const;
  static PseudoLabel from_bytes(std::size_t height, std::size_t width, const std::vector<std::uint8_t>& bytes);

  std::size_t count(PixelClass c) const;
};

/// > t_fg is foreground, < t_bg is background, everything else conflict.
/// Requires 0 <= t_bg < t_fg <= 1.
PseudoLabel trichotomize(const CamMap& enhanced, double t_fg = kDefaultForeground,
                         double t_bg = kDefaultBackground);

/// Bilinear (align-corners-false) resize of a map to a larger resolution.
CamMap upsample_map(const CamMap& map, std::size_t height, std::size_t width);

struct PseudoLabelOptions {
  bool gaussian_enhance = true;
  double t_gauss = kDefaultGaussThreshold;
  double t_fg = kDefaultForeground;
  double t_bg = kDefaultBackground;
};

struct PseudoLabelResult {
  CamMap enhanced;  // at CAM resolution
  PseudoLabel label;  // at output resolution
};

/// Full chain: fit, render, gate + max-ensemble (if enabled), upsample to
/// the output resolution, trichotomize. Throws EmptyCamError for empty CAMs.
PseudoLabelResult make_pseudo_label(const CamMap& cam, std::size_t out_height, std::size_t out_width,
                                    const PseudoLabelOptions& options = {});

}  // namespace spol::gppl
