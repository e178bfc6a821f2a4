#pragma once

#include "retinet/eval.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace retinet {

/// Pixel geometry of one square plot panel. Data space is [0, 1]^2.
struct PanelFrame {
  double left = 0, top = 0, size = 320;

  double x(double v) const { return left + v * size; }
  double y(double v) const { return top + (1.0 - v) * size; }
};

inline constexpr PanelFrame kRocPanel{60, 40, 320};
inline constexpr PanelFrame kFnrPanel{460, 40, 320};

/// ROC panel (x = fpr, y = tpr) and FNR-FPR panel (x = fpr, y = fnr), one
/// polyline per fold in each.
std::string render_curves_svg(const std::vector<RocCurve>& folds);

/// Reads report.json and roc_fold<k>.csv from `report_dir` and writes the SVG.
void plot_curves(const std::filesystem::path& report_dir, const std::filesystem::path& out_path);

}  // namespace retinet
