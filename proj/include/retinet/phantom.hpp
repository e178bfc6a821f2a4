#pragma once

#include "retinet/ransac.hpp"
#include "retinet/volume.hpp"

#include <cstdint>
#include <vector>

namespace retinet {

template <typename T>
struct Range {
  T min{};
  T max{};
};

/// Synthetic OCT volume recipe. Intensities are background 0.1, ILM band 0.5
/// and BM band 1.0, multiplied by `intensity_scale`, before additive noise.
struct PhantomSpec {
  Eigen::Index width = 64;
  Eigen::Index bscan_count = 16;
  Eigen::Index depth = 128;
  Range<double> layer_curvature_range{-0.003, 0.003};  // c2 about the centre column
  Range<double> tilt_range{-0.1, 0.1};                 // px per column
  Range<double> center_fraction_range{0.5, 0.7};       // BM row / depth at the centre column
  Range<double> bscan_slope_range{-0.3, 0.3};          // px per B-scan
  Range<int> drusen_count_range{2, 5};
  Range<double> drusen_amplitude_range{3.0, 7.0};  // px
  Range<double> drusen_width_range{2.5, 5.0};      // lateral sd, px
  Range<double> drusen_extent_range{0.8, 1.5};     // sd across B-scans
  double noise_sigma = 20.0;
  double intensity_scale = 255.0;
  ClassLabel label = ClassLabel::Control;

  void validate() const;
};

struct Drusen {
  double center_x = 0;
  Eigen::Index center_h = 0;
  double amplitude = 0;
  double sigma_x = 1;
  double sigma_h = 1;

  double height(double x, double h) const;
};

/// Ground truth of a generated phantom.
struct PlacementRecord {
  std::vector<PolynomialCurve> bm_curves;  // one per B-scan
  std::vector<Drusen> drusen;
  double retina_thickness = 0;  // ILM top sits this many rows above the BM

  /// Total drusen elevation (px) at column x of B-scan h.
  double bump_height(double x, Eigen::Index h) const;
  /// Row of the brightest BM pixel, including drusen elevation.
  Eigen::Index bm_row(Eigen::Index x, Eigen::Index h) const;
};

struct Phantom {
  Volume volume;
  PlacementRecord placement;
};

/// Deterministic in (spec, seed).
Phantom generate_phantom(const PhantomSpec& spec, std::uint64_t seed);

}  // namespace retinet
