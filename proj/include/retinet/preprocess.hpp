#pragma once

#include "retinet/error.hpp"
#include "retinet/ransac.hpp"
#include "retinet/volume.hpp"

#include <json.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace retinet {

struct PreprocessConfig {
  double kappa = 50.0;
  int diffusion_iterations = 200;
  double diffusion_step = 0.25;
  double dog_sigma_fine = 1.0;
  double dog_sigma_coarse = 3.0;
  int ransac_iterations = 500;
  double ransac_inlier_threshold = 3.0;
  double ransac_min_inlier_fraction = 0.6;
  double bm_anchor_fraction = 0.6;
  Eigen::Index resize_w = 384;
  Eigen::Index resize_d = 596;
  std::uint64_t rng_seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  RansacParams ransac() const {
    return {ransac_iterations, ransac_inlier_threshold, ransac_min_inlier_fraction};
  }
};

void to_json(nlohmann::json& j, const PreprocessConfig& c);
/// Rejects unknown keys; missing keys keep their defaults.
void from_json(const nlohmann::json& j, PreprocessConfig& c);

/// Perona-Malik conduction coefficient.
inline double conduction(double gradient, double kappa) {
  const double r = gradient / kappa;
  return 1.0 / (1.0 + r * r);
}

/// Explicit four-neighbour Perona-Malik diffusion with zero-flux borders.
/// Each directional forward difference is weighted by its own conduction.
template <typename Derived>
Image<typename Derived::Scalar> anisotropic_diffuse(const Eigen::DenseBase<Derived>& image,
                                                    double kappa, int iterations, double step) {
  using Scalar = typename Derived::Scalar;
  if (!(kappa > 0) || iterations < 0 || !(step > 0 && step <= 0.25))
    throw ConfigError("invalid diffusion parameters");
  Image<double> u = image.derived().template cast<double>();
  if (!u.allFinite()) throw DataError("non-finite pixel");
  const Eigen::Index rows = u.rows(), cols = u.cols();
  const auto flux = [kappa](double g) { return conduction(g, kappa) * g; };

  // South flux at (y, x) is the flow across the edge between rows y and y+1;
  // the north flux of row y+1 is its negation, likewise for east/west.
  Image<double> south = Image<double>::Zero(rows, cols);
  Image<double> east = Image<double>::Zero(rows, cols);
  for (int it = 0; it < iterations; ++it) {
    if (rows > 1)
      south.topRows(rows - 1) = (u.bottomRows(rows - 1) - u.topRows(rows - 1)).unaryExpr(flux);
    if (cols > 1)
      east.leftCols(cols - 1) = (u.rightCols(cols - 1) - u.leftCols(cols - 1)).unaryExpr(flux);
    Image<double> delta = south + east;
    if (rows > 1) delta.bottomRows(rows - 1) -= south.topRows(rows - 1);
    if (cols > 1) delta.rightCols(cols - 1) -= east.leftCols(cols - 1);
    u += step * delta;
  }
  return u.template cast<Scalar>();
}

template <typename Derived>
Image<typename Derived::Scalar> anisotropic_diffuse(const Eigen::DenseBase<Derived>& image,
                                                    const PreprocessConfig& config) {
  return anisotropic_diffuse(image, config.kappa, config.diffusion_iterations, config.diffusion_step);
}

/// Normalised Gaussian taps on [-ceil(3 sigma), ceil(3 sigma)].
Eigen::ArrayXd gaussian_kernel(double sigma);

/// Separable Gaussian blur with edge-replicated borders.
template <typename Derived>
Image<double> gaussian_blur(const Eigen::DenseBase<Derived>& image, double sigma) {
  const Eigen::ArrayXd k = gaussian_kernel(sigma);
  const Eigen::Index r = k.size() / 2;
  const Image<double> src = image.derived().template cast<double>();
  const Eigen::Index rows = src.rows(), cols = src.cols();
  Image<double> tmp = Image<double>::Zero(rows, cols);
  for (Eigen::Index t = -r; t <= r; ++t)
    for (Eigen::Index x = 0; x < cols; ++x)
      tmp.col(x) += k(t + r) * src.col(std::clamp<Eigen::Index>(x + t, 0, cols - 1));
  Image<double> out = Image<double>::Zero(rows, cols);
  for (Eigen::Index t = -r; t <= r; ++t)
    for (Eigen::Index y = 0; y < rows; ++y)
      out.row(y) += k(t + r) * tmp.row(std::clamp<Eigen::Index>(y + t, 0, rows - 1));
  return out;
}

/// G(sigma_fine) * I - G(sigma_coarse) * I.
template <typename Derived>
Image<typename Derived::Scalar> difference_of_gaussians(const Eigen::DenseBase<Derived>& image,
                                                        double sigma_fine, double sigma_coarse) {
  using Scalar = typename Derived::Scalar;
  if (!(sigma_fine > 0) || !(sigma_coarse > sigma_fine))
    throw ConfigError("DoG needs 0 < sigma_fine < sigma_coarse");
  return (gaussian_blur(image, sigma_fine) - gaussian_blur(image, sigma_coarse)).template cast<Scalar>();
}

/// Per column, the row of largest |R(y) - R(y-1)|; ties go to the deeper row.
template <typename Derived>
Eigen::ArrayXd detect_bm_candidates(const Eigen::DenseBase<Derived>& response) {
  const auto& r = response.derived();
  Eigen::ArrayXd rows(r.cols());
  for (Eigen::Index x = 0; x < r.cols(); ++x) {
    Eigen::Index best_row = r.rows() - 1;
    double best = -1.0;
    for (Eigen::Index y = 0; y < r.rows(); ++y) {
      const double g = y == 0 ? 0.0 : std::abs(static_cast<double>(r(y, x)) - static_cast<double>(r(y - 1, x)));
      if (g >= best) {
        best = g;
        best_row = y;
      }
    }
    rows(x) = static_cast<double>(best_row);
  }
  return rows;
}

/// Integer vertical shift per column so that curve(x) lands on
/// round(anchor_fraction * depth); vacated pixels become zero.
template <typename Derived>
Image<typename Derived::Scalar> flatten_bscan(const Eigen::DenseBase<Derived>& image,
                                              const PolynomialCurve& curve, double anchor_fraction) {
  using Scalar = typename Derived::Scalar;
  if (!curve.finite()) throw DataError("non-finite curve coefficients");
  const auto& src = image.derived();
  const Eigen::Index rows = src.rows(), cols = src.cols();
  const double anchor = std::round(anchor_fraction * static_cast<double>(rows));
  Image<Scalar> out = Image<Scalar>::Zero(rows, cols);
  for (Eigen::Index x = 0; x < cols; ++x) {
    const double shift = anchor - std::round(curve(static_cast<double>(x)));
    if (!(std::abs(shift) < static_cast<double>(rows))) continue;
    const auto s = static_cast<Eigen::Index>(shift);
    const Eigen::Index lo = std::max<Eigen::Index>(0, s), hi = std::min(rows, rows + s);
    for (Eigen::Index y = lo; y < hi; ++y) out(y, x) = src(y - s, x);
  }
  return out;
}

/// Bilinear resampling with pixel-centre alignment and clamped borders.
template <typename Derived>
Image<typename Derived::Scalar> resize_bilinear(const Eigen::DenseBase<Derived>& image,
                                                Eigen::Index out_w, Eigen::Index out_d) {
  using Scalar = typename Derived::Scalar;
  const auto& src = image.derived();
  const Eigen::Index in_d = src.rows(), in_w = src.cols();
  if (out_w < 1 || out_d < 1 || in_w < 1 || in_d < 1) throw ConfigError("invalid resize target");

  struct Tap {
    Eigen::Index lo, hi;
    double frac;
  };
  const auto taps = [](Eigen::Index n_in, Eigen::Index n_out) {
    std::vector<Tap> t(static_cast<std::size_t>(n_out));
    const double scale = static_cast<double>(n_in) / static_cast<double>(n_out);
    for (Eigen::Index i = 0; i < n_out; ++i) {
      const double s = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0,
                                  static_cast<double>(n_in - 1));
      const auto lo = static_cast<Eigen::Index>(std::floor(s));
      t[static_cast<std::size_t>(i)] = {lo, std::min(lo + 1, n_in - 1), s - static_cast<double>(lo)};
    }
    return t;
  };
  const auto ty = taps(in_d, out_d), tx = taps(in_w, out_w);
  Image<Scalar> out(out_d, out_w);
  for (Eigen::Index y = 0; y < out_d; ++y) {
    const auto& a = ty[static_cast<std::size_t>(y)];
    for (Eigen::Index x = 0; x < out_w; ++x) {
      const auto& b = tx[static_cast<std::size_t>(x)];
      const double top = (1 - b.frac) * src(a.lo, b.lo) + b.frac * src(a.lo, b.hi);
      const double bot = (1 - b.frac) * src(a.hi, b.lo) + b.frac * src(a.hi, b.hi);
      out(y, x) = static_cast<Scalar>((1 - a.frac) * top + a.frac * bot);
    }
  }
  return out;
}

/// Resize to resize_w x resize_d, then keep depth rows [resize_d/4, resize_d/4 + resize_d/2).
template <typename Derived>
Image<typename Derived::Scalar> resize_and_crop(const Eigen::DenseBase<Derived>& image,
                                                Eigen::Index resize_w, Eigen::Index resize_d) {
  if (resize_w < 4 || resize_d < 4) throw ConfigError("resize targets must be >= 4 pixels");
  auto resized = resize_bilinear(image, resize_w, resize_d);
  return resized.middleRows(resize_d / 4, resize_d / 2);
}

/// Zero mean, unit (population) standard deviation over all voxels.
Volume normalize_volume(const Volume& volume);

/// Originals followed by their width-flipped copies (laterality swapped, id
/// suffixed with "#m").
std::vector<Volume> mirror_augment(const std::vector<Volume>& dataset);

struct PreprocessedVolume {
  Volume volume;
  std::vector<PolynomialCurve> curves;  // curve used to flatten each B-scan
  std::vector<bool> fallback;           // true where RANSAC failed and the median curve was used
};

/// Curve fit for one B-scan: diffuse, DoG, candidates, RANSAC.
RansacResult fit_bscan_curve(const Eigen::Ref<const BScan>& bscan, const PreprocessConfig& config,
                             std::uint64_t seed);

/// Full per-volume pipeline: per-B-scan flattening, resize and crop, then
/// normalisation. B-scans whose fit fails use the coefficient-wise median of
/// the successful fits; more than half failing raises ConsensusError.
PreprocessedVolume preprocess_volume_detailed(const Volume& volume, const PreprocessConfig& config);
Volume preprocess_volume(const Volume& volume, const PreprocessConfig& config);

}  // namespace retinet
