#include "retinet/plot.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace retinet {

namespace {

constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                   "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void axes(std::ostringstream& svg, const PanelFrame& f, const std::string& title, const std::string& x_label,
          const std::string& y_label) {
  svg << "<rect x=\"" << num(f.left) << "\" y=\"" << num(f.top) << "\" width=\"" << num(f.size) << "\" height=\""
      << num(f.size) << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    svg << "<text x=\"" << num(f.x(v)) << "\" y=\"" << num(f.top + f.size + 16)
        << "\" font-size=\"11\" text-anchor=\"middle\">" << num(v) << "</text>\n";
    svg << "<text x=\"" << num(f.left - 6) << "\" y=\"" << num(f.y(v) + 4)
        << "\" font-size=\"11\" text-anchor=\"end\">" << num(v) << "</text>\n";
  }
  svg << "<text x=\"" << num(f.x(0.5)) << "\" y=\"" << num(f.top - 12)
      << "\" font-size=\"14\" text-anchor=\"middle\">" << title << "</text>\n";
  svg << "<text x=\"" << num(f.x(0.5)) << "\" y=\"" << num(f.top + f.size + 34)
      << "\" font-size=\"12\" text-anchor=\"middle\">" << x_label << "</text>\n";
  svg << "<text x=\"" << num(f.left - 36) << "\" y=\"" << num(f.y(0.5)) << "\" font-size=\"12\" text-anchor=\"middle\" "
      << "transform=\"rotate(-90 " << num(f.left - 36) << ' ' << num(f.y(0.5)) << ")\">" << y_label << "</text>\n";
}

}  // namespace

std::string render_curves_svg(const std::vector<RocCurve>& folds) {
  if (folds.empty()) throw DataError("no curves to plot");
  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"820\" height=\"420\" viewBox=\"0 0 820 420\">\n"
      << "<rect width=\"820\" height=\"420\" fill=\"white\"/>\n";
  axes(svg, kRocPanel, "ROC", "FPR", "TPR");
  axes(svg, kFnrPanel, "FNR vs FPR", "FPR", "FNR");

  for (int panel = 0; panel < 2; ++panel) {
    const PanelFrame& f = panel == 0 ? kRocPanel : kFnrPanel;
    for (std::size_t k = 0; k < folds.size(); ++k) {
      svg << "<polyline class=\"" << (panel == 0 ? "roc" : "fnr") << "\" data-fold=\"" << k << "\" fill=\"none\" stroke=\""
          << kColors[k % std::size(kColors)] << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < folds[k].points.size(); ++i) {
        const auto& p = folds[k].points[i];
        svg << (i ? " " : "") << num(f.x(p.fpr)) << ',' << num(f.y(panel == 0 ? p.tpr : p.fnr));
      }
      svg << "\"/>\n";
    }
  }
  for (std::size_t k = 0; k < folds.size(); ++k) {
    const double y = kRocPanel.top + 14 + 14 * static_cast<double>(k);
    svg << "<text x=\"" << num(kRocPanel.x(0.55)) << "\" y=\"" << num(y + kRocPanel.size * 0.55)
        << "\" font-size=\"11\" fill=\"" << kColors[k % std::size(kColors)] << "\">fold " << k
        << " AUC " << num(std::round(folds[k].auc * 1000) / 1000) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void plot_curves(const std::filesystem::path& report_dir, const std::filesystem::path& out_path) {
  std::ifstream in(report_dir / "report.json");
  if (!in) throw DataError("missing file " + (report_dir / "report.json").string());
  nlohmann::json report;
  try {
    report = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed report: " + std::string(e.what()));
  }
  if (!report.contains("folds") || !report["folds"].is_array() || report["folds"].empty())
    throw DataError("malformed report: no folds");
  std::vector<RocCurve> curves;
  for (const auto& fold : report["folds"]) {
    if (!fold.contains("fold") || !fold["fold"].is_number_integer()) throw DataError("malformed report: fold index");
    curves.push_back(read_curve_csv(report_dir / ("roc_fold" + std::to_string(fold["fold"].get<int>()) + ".csv")));
  }
  const std::string svg = render_curves_svg(curves);
  std::ofstream out(out_path);
  if (!out || !(out << svg)) throw DataError("cannot write " + out_path.string());
}

}  // namespace retinet
