#include "retinet/phantom.hpp"

#include "retinet/error.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace retinet {
namespace {

constexpr double kBackground = 0.1;
constexpr double kIlm = 0.5;
constexpr double kBm = 1.0;
constexpr double kPlateauDim = 0.05;

template <typename T>
void check_range(const Range<T>& r, const char* name) {
  if (!(r.min <= r.max)) throw ConfigError(std::string("phantom ") + name + " range is empty");
}

double uniform(std::mt19937_64& rng, const Range<double>& r) {
  return r.min == r.max ? r.min : std::uniform_real_distribution<double>(r.min, r.max)(rng);
}

}  // namespace

void PhantomSpec::validate() const {
  if (width < 1 || bscan_count < 1) throw ConfigError("phantom width and bscan_count must be >= 1");
  if (depth < 16) throw ConfigError("phantom depth must be >= 16");
  check_range(layer_curvature_range, "layer_curvature");
  check_range(tilt_range, "tilt");
  check_range(center_fraction_range, "center_fraction");
  check_range(bscan_slope_range, "bscan_slope");
  check_range(drusen_count_range, "drusen_count");
  check_range(drusen_amplitude_range, "drusen_amplitude");
  check_range(drusen_width_range, "drusen_width");
  check_range(drusen_extent_range, "drusen_extent");
  if (center_fraction_range.min <= 0.0 || center_fraction_range.max >= 1.0)
    throw ConfigError("phantom center_fraction must lie in (0, 1)");
  if (label == ClassLabel::Amd && drusen_count_range.min < 1)
    throw ConfigError("AMD phantoms need drusen_count >= 1");
  if (drusen_amplitude_range.min < 0 || drusen_width_range.min <= 0 || drusen_extent_range.min <= 0)
    throw ConfigError("drusen shape parameters must be positive");
  if (!(noise_sigma >= 0) || !(intensity_scale > 0))
    throw ConfigError("phantom noise_sigma must be >= 0 and intensity_scale > 0");
}

double Drusen::height(double x, double h) const {
  const double dx = (x - center_x) / sigma_x;
  const double dh = (h - static_cast<double>(center_h)) / sigma_h;
  return amplitude * std::exp(-0.5 * (dx * dx + dh * dh));
}

double PlacementRecord::bump_height(double x, Eigen::Index h) const {
  double total = 0;
  for (const auto& d : drusen) total += d.height(x, static_cast<double>(h));
  return total;
}

Eigen::Index PlacementRecord::bm_row(Eigen::Index x, Eigen::Index h) const {
  const double xd = static_cast<double>(x);
  return static_cast<Eigen::Index>(std::lround(bm_curves[static_cast<std::size_t>(h)](xd) - bump_height(xd, h)));
}

Phantom generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);

  const Eigen::Index W = spec.width, H = spec.bscan_count, D = spec.depth;
  Phantom out;
  auto& place = out.placement;

  // BM surface: y = centre + tilt u + curv u^2 + slope (h - hc), u = x - xc.
  const double xc = 0.5 * static_cast<double>(W - 1);
  const double hc = 0.5 * static_cast<double>(H - 1);
  const double centre = uniform(rng, spec.center_fraction_range) * static_cast<double>(D);
  const double tilt = uniform(rng, spec.tilt_range);
  const double curv = uniform(rng, spec.layer_curvature_range);
  const double slope = uniform(rng, spec.bscan_slope_range);
  place.retina_thickness = std::uniform_real_distribution<double>(0.22, 0.28)(rng) * static_cast<double>(D);
  for (Eigen::Index h = 0; h < H; ++h) {
    const double offset = centre + slope * (static_cast<double>(h) - hc);
    place.bm_curves.push_back({offset - tilt * xc + curv * xc * xc, tilt - 2.0 * curv * xc, curv});
  }

  if (spec.label == ClassLabel::Amd) {
    const int count =
        std::uniform_int_distribution<int>(spec.drusen_count_range.min, spec.drusen_count_range.max)(rng);
    for (int i = 0; i < count; ++i) {
      Drusen d;
      d.center_x = std::uniform_real_distribution<double>(0.15, 0.85)(rng) * static_cast<double>(W - 1);
      d.center_h = std::uniform_int_distribution<Eigen::Index>(0, H - 1)(rng);
      d.amplitude = uniform(rng, spec.drusen_amplitude_range);
      d.sigma_x = uniform(rng, spec.drusen_width_range);
      d.sigma_h = uniform(rng, spec.drusen_extent_range);
      place.drusen.push_back(d);
    }
  }

  const Laterality side = std::bernoulli_distribution(0.5)(rng) ? Laterality::Right : Laterality::Left;
  out.volume = Volume("phantom", W, H, D, spec.label, side);

  // BM complex: a bright plateau from the (drusen-lifted) top edge down to
  // `thickness` rows below the bare curve, dimming slightly with depth, then
  // an exponential tail.
  const double decay = std::max(1.5, static_cast<double>(D) / 32.0);
  const Eigen::Index thickness = std::max<Eigen::Index>(4, D / 8);
  const Eigen::Index ilm_thickness = std::max<Eigen::Index>(2, D / 40);
  const double s = spec.intensity_scale;
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);

  for (Eigen::Index h = 0; h < H; ++h) {
    auto img = out.volume.bscan(h);
    const auto& curve = place.bm_curves[static_cast<std::size_t>(h)];
    for (Eigen::Index x = 0; x < W; ++x) {
      const double bm = curve(static_cast<double>(x));
      const Eigen::Index top = place.bm_row(x, h);
      const Eigen::Index bottom = static_cast<Eigen::Index>(std::lround(bm)) + thickness;
      const auto ilm = static_cast<Eigen::Index>(std::lround(bm - place.retina_thickness));
      for (Eigen::Index y = 0; y < D; ++y) {
        double v = kBackground;
        if (y >= ilm && y < ilm + ilm_thickness) v = kIlm;
        if (y >= top && y < bottom)
          v = kBm - kPlateauDim * static_cast<double>(y - top) / static_cast<double>(bottom - top);
        else if (y >= bottom)
          v = kBackground + (kBm - kPlateauDim - kBackground) * std::exp(-static_cast<double>(y - bottom) / decay);
        img(y, x) = static_cast<float>(v * s);
      }
    }
  }
  if (spec.noise_sigma > 0)
    for (float& v : out.volume.voxels()) v = static_cast<float>(v + noise(rng));
  return out;
}

}  // namespace retinet
