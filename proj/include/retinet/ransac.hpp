#pragma once

#include "retinet/error.hpp"

#include <Eigen/Core>

#include <cstdint>

namespace retinet {

/// y(x) = c0 + c1 x + c2 x^2, x in pixel columns and y in pixel rows.
struct PolynomialCurve {
  double c0 = 0;
  double c1 = 0;
  double c2 = 0;

  double operator()(double x) const { return c0 + x * (c1 + x * c2); }
  bool finite() const;
  friend bool operator==(const PolynomialCurve&, const PolynomialCurve&) = default;
};

class ConsensusError : public DataError {
 public:
  ConsensusError() : DataError("insufficient consensus") {}
};

struct RansacParams {
  int iterations = 500;
  double inlier_threshold = 3.0;     // px, vertical residual
  double min_inlier_fraction = 0.6;
};

struct RansacResult {
  PolynomialCurve curve;
  Eigen::Array<bool, Eigen::Dynamic, 1> inliers;
  double inlier_fraction = 0;
};

/// Least-squares parabola through the points (needs >= 3 distinct abscissae).
PolynomialCurve fit_parabola(const Eigen::Ref<const Eigen::ArrayXd>& xs,
                             const Eigen::Ref<const Eigen::ArrayXd>& ys);

/// Consensus fit of a second-order polynomial: minimal 3-point samples drawn
/// from a generator seeded with `seed`, then a least-squares refit on the
/// largest consensus set. Throws ConsensusError when the best inlier fraction
/// stays below `params.min_inlier_fraction`.
RansacResult fit_bm_ransac(const Eigen::Ref<const Eigen::ArrayXd>& xs,
                           const Eigen::Ref<const Eigen::ArrayXd>& ys, const RansacParams& params,
                           std::uint64_t seed);

/// Per-column candidates, x = column index.
RansacResult fit_bm_ransac(const Eigen::Ref<const Eigen::ArrayXd>& rows, const RansacParams& params,
                           std::uint64_t seed);

}  // namespace retinet
