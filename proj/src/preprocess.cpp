#include "retinet/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace retinet {

void PreprocessConfig::validate() const {
  const auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("preprocess." + field + ": " + why);
  };
  if (!(kappa > 0)) fail("kappa", "must be positive");
  if (diffusion_iterations < 0) fail("diffusion_iterations", "must be >= 0");
  if (!(diffusion_step > 0 && diffusion_step <= 0.25)) fail("diffusion_step", "must lie in (0, 0.25]");
  if (!(dog_sigma_fine > 0)) fail("dog_sigma_fine", "must be positive");
  if (!(dog_sigma_coarse > dog_sigma_fine)) fail("dog_sigma_coarse", "must exceed dog_sigma_fine");
  if (ransac_iterations < 1) fail("ransac_iterations", "must be >= 1");
  if (!(ransac_inlier_threshold > 0)) fail("ransac_inlier_threshold", "must be positive");
  if (!(ransac_min_inlier_fraction > 0 && ransac_min_inlier_fraction <= 1))
    fail("ransac_min_inlier_fraction", "must lie in (0, 1]");
  if (!(bm_anchor_fraction > 0 && bm_anchor_fraction < 1)) fail("bm_anchor_fraction", "must lie in (0, 1)");
  if (resize_w < 4) fail("resize_w", "must be >= 4");
  if (resize_d < 4) fail("resize_d", "must be >= 4");
}

void to_json(nlohmann::json& j, const PreprocessConfig& c) {
  j = {{"kappa", c.kappa},
       {"diffusion_iterations", c.diffusion_iterations},
       {"diffusion_step", c.diffusion_step},
       {"dog_sigma_fine", c.dog_sigma_fine},
       {"dog_sigma_coarse", c.dog_sigma_coarse},
       {"ransac_iterations", c.ransac_iterations},
       {"ransac_inlier_threshold", c.ransac_inlier_threshold},
       {"ransac_min_inlier_fraction", c.ransac_min_inlier_fraction},
       {"bm_anchor_fraction", c.bm_anchor_fraction},
       {"resize_w", c.resize_w},
       {"resize_d", c.resize_d},
       {"rng_seed", c.rng_seed}};
}

void from_json(const nlohmann::json& j, PreprocessConfig& c) {
  if (!j.is_object()) throw ConfigError("preprocess config must be a JSON object");
  const nlohmann::json known = PreprocessConfig{};
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown preprocess config key '" + key + "'");
  c.kappa = j.value("kappa", c.kappa);
  c.diffusion_iterations = j.value("diffusion_iterations", c.diffusion_iterations);
  c.diffusion_step = j.value("diffusion_step", c.diffusion_step);
  c.dog_sigma_fine = j.value("dog_sigma_fine", c.dog_sigma_fine);
  c.dog_sigma_coarse = j.value("dog_sigma_coarse", c.dog_sigma_coarse);
  c.ransac_iterations = j.value("ransac_iterations", c.ransac_iterations);
  c.ransac_inlier_threshold = j.value("ransac_inlier_threshold", c.ransac_inlier_threshold);
  c.ransac_min_inlier_fraction = j.value("ransac_min_inlier_fraction", c.ransac_min_inlier_fraction);
  c.bm_anchor_fraction = j.value("bm_anchor_fraction", c.bm_anchor_fraction);
  c.resize_w = j.value("resize_w", c.resize_w);
  c.resize_d = j.value("resize_d", c.resize_d);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
}

Eigen::ArrayXd gaussian_kernel(double sigma) {
  if (!(sigma > 0)) throw ConfigError("Gaussian sigma must be positive");
  const auto r = static_cast<Eigen::Index>(std::ceil(3.0 * sigma));
  Eigen::ArrayXd k(2 * r + 1);
  for (Eigen::Index t = -r; t <= r; ++t) {
    const double u = static_cast<double>(t) / sigma;
    k(t + r) = std::exp(-0.5 * u * u);
  }
  return k / k.sum();
}

Volume normalize_volume(const Volume& volume) {
  const auto n = static_cast<double>(volume.size());
  if (volume.size() == 0) throw DataError("constant volume");
  const Eigen::Map<const Eigen::ArrayXf> v(volume.voxels().data(), static_cast<Eigen::Index>(volume.size()));
  const double mean = v.cast<double>().sum() / n;
  const double var = (v.cast<double>() - mean).square().sum() / n;
  if (!(var > 0)) throw DataError("constant volume");
  const double sd = std::sqrt(var);

  Volume out = volume;
  Eigen::Map<Eigen::ArrayXf> o(out.voxels().data(), static_cast<Eigen::Index>(out.size()));
  o = ((v.cast<double>() - mean) / sd).cast<float>();
  return out;
}

std::vector<Volume> mirror_augment(const std::vector<Volume>& dataset) {
  std::vector<Volume> out = dataset;
  out.reserve(2 * dataset.size());
  for (const auto& v : dataset) {
    Volume m = flip_width(v);
    m.set_id(v.id() + "#m");
    out.push_back(std::move(m));
  }
  return out;
}

RansacResult fit_bscan_curve(const Eigen::Ref<const BScan>& bscan, const PreprocessConfig& config,
                             std::uint64_t seed) {
  const BScan smooth = anisotropic_diffuse(bscan, config);
  const BScan response = difference_of_gaussians(smooth, config.dog_sigma_fine, config.dog_sigma_coarse);
  return fit_bm_ransac(detect_bm_candidates(response), config.ransac(), seed);
}

PreprocessedVolume preprocess_volume_detailed(const Volume& volume, const PreprocessConfig& config) {
  config.validate();
  volume.validate();
  const Eigen::Index H = volume.bscan_count();
  const auto n = static_cast<std::size_t>(H);

  PreprocessedVolume result;
  result.curves.resize(n);
  result.fallback.assign(n, false);
  std::vector<PolynomialCurve> fitted;
  for (Eigen::Index h = 0; h < H; ++h) {
    try {
      result.curves[static_cast<std::size_t>(h)] =
          fit_bscan_curve(volume.bscan(h), config, config.rng_seed ^ static_cast<std::uint64_t>(h)).curve;
      fitted.push_back(result.curves[static_cast<std::size_t>(h)]);
    } catch (const ConsensusError&) {
      result.fallback[static_cast<std::size_t>(h)] = true;
    }
  }
  if (2 * fitted.size() < n) throw ConsensusError();

  if (fitted.size() < n) {
    const auto median = [&](double PolynomialCurve::*field) {
      std::vector<double> v;
      for (const auto& c : fitted) v.push_back(c.*field);
      std::sort(v.begin(), v.end());
      const std::size_t m = v.size() / 2;
      return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
    };
    const PolynomialCurve med{median(&PolynomialCurve::c0), median(&PolynomialCurve::c1),
                              median(&PolynomialCurve::c2)};
    for (std::size_t h = 0; h < n; ++h)
      if (result.fallback[h]) result.curves[h] = med;
  }

  Volume staged(volume.id(), config.resize_w, H, config.resize_d / 2, volume.label(), volume.laterality());
  for (Eigen::Index h = 0; h < H; ++h) {
    const BScan flat = flatten_bscan(volume.bscan(h), result.curves[static_cast<std::size_t>(h)],
                                     config.bm_anchor_fraction);
    staged.bscan(h) = resize_and_crop(flat, config.resize_w, config.resize_d);
  }
  result.volume = normalize_volume(staged);
  return result;
}

Volume preprocess_volume(const Volume& volume, const PreprocessConfig& config) {
  return preprocess_volume_detailed(volume, config).volume;
}

}  // namespace retinet
