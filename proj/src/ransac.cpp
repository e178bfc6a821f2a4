#include "retinet/ransac.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <random>

namespace retinet {

bool PolynomialCurve::finite() const {
  return std::isfinite(c0) && std::isfinite(c1) && std::isfinite(c2);
}

PolynomialCurve fit_parabola(const Eigen::Ref<const Eigen::ArrayXd>& xs,
                             const Eigen::Ref<const Eigen::ArrayXd>& ys) {
  if (xs.size() != ys.size()) throw ConfigError("point coordinate arrays differ in length");
  if (xs.size() < 3) throw ConfigError("parabola fit needs at least 3 points");
  Eigen::MatrixXd design(xs.size(), 3);
  design.col(0).setOnes();
  design.col(1) = xs.matrix();
  design.col(2) = xs.square().matrix();
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (qr.rank() < 3) throw DataError("degenerate sample");
  const Eigen::Vector3d c = qr.solve(ys.matrix());
  return {c(0), c(1), c(2)};
}

RansacResult fit_bm_ransac(const Eigen::Ref<const Eigen::ArrayXd>& xs,
                           const Eigen::Ref<const Eigen::ArrayXd>& ys, const RansacParams& params,
                           std::uint64_t seed) {
  const Eigen::Index n = xs.size();
  if (ys.size() != n) throw ConfigError("point coordinate arrays differ in length");
  if (n < 3) throw ConfigError("RANSAC needs at least 3 candidate points");
  if (params.iterations < 1 || !(params.inlier_threshold > 0) ||
      !(params.min_inlier_fraction > 0 && params.min_inlier_fraction <= 1))
    throw ConfigError("invalid RANSAC parameters");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);

  Eigen::Index best_count = 0;
  PolynomialCurve best;
  for (int it = 0; it < params.iterations; ++it) {
    Eigen::Index i = pick(rng), j = pick(rng), k = pick(rng);
    while (j == i) j = pick(rng);
    while (k == i || k == j) k = pick(rng);

    Eigen::Matrix3d a;
    a << 1, xs(i), xs(i) * xs(i), 1, xs(j), xs(j) * xs(j), 1, xs(k), xs(k) * xs(k);
    const Eigen::FullPivLU<Eigen::Matrix3d> lu(a);
    if (!lu.isInvertible()) continue;  // repeated abscissa, resample
    const Eigen::Vector3d c = lu.solve(Eigen::Vector3d(ys(i), ys(j), ys(k)));
    const PolynomialCurve model{c(0), c(1), c(2)};
    if (!model.finite()) continue;

    const Eigen::ArrayXd residual = (ys - (model.c0 + xs * (model.c1 + xs * model.c2))).abs();
    const Eigen::Index count = (residual <= params.inlier_threshold).count();
    if (count > best_count) {
      best_count = count;
      best = model;
    }
  }

  const double fraction = static_cast<double>(best_count) / static_cast<double>(n);
  if (best_count < 3 || fraction < params.min_inlier_fraction) throw ConsensusError();

  RansacResult result;
  result.inliers = (ys - (best.c0 + xs * (best.c1 + xs * best.c2))).abs() <= params.inlier_threshold;
  Eigen::ArrayXd in_x(best_count), in_y(best_count);
  for (Eigen::Index p = 0, q = 0; p < n; ++p)
    if (result.inliers(p)) {
      in_x(q) = xs(p);
      in_y(q++) = ys(p);
    }
  try {
    result.curve = fit_parabola(in_x, in_y);
  } catch (const DataError&) {
    result.curve = best;
  }
  result.inlier_fraction = fraction;
  return result;
}

RansacResult fit_bm_ransac(const Eigen::Ref<const Eigen::ArrayXd>& rows, const RansacParams& params,
                           std::uint64_t seed) {
  const Eigen::ArrayXd xs = Eigen::ArrayXd::LinSpaced(rows.size(), 0, static_cast<double>(rows.size() - 1));
  return fit_bm_ransac(xs, rows, params, seed);
}

}  // namespace retinet
