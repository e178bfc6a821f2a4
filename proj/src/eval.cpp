#include "retinet/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace retinet {

namespace {

void require_both_classes(std::span<const ScoredCase> cases) {
  bool pos = false, neg = false;
  for (const auto& c : cases) {
    if (!std::isfinite(c.score) || c.score < 0 || c.score > 1)
      throw DataError("score of " + c.volume_id + " outside [0, 1]");
    (c.label == ClassLabel::Amd ? pos : neg) = true;
  }
  if (!pos || !neg) throw DataError("ROC needs both classes");
}

}  // namespace

RocCurve roc_curve(std::span<const ScoredCase> cases) {
  require_both_classes(cases);
  std::vector<ScoredCase> sorted(cases.begin(), cases.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  double P = 0, N = 0;
  for (const auto& c : sorted) (c.label == ClassLabel::Amd ? P : N) += 1;

  RocCurve curve;
  const auto emit = [&](double threshold, double tp, double fp) {
    const double tpr = tp / P, fpr = fp / N;
    if (!curve.points.empty() && curve.points.back().tpr == tpr && curve.points.back().fpr == fpr) return;
    curve.points.push_back({threshold, tpr, fpr, 1.0 - tpr});
  };
  const double inf = std::numeric_limits<double>::infinity();
  emit(inf, 0, 0);
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double t = sorted[i].score;
    for (; i < sorted.size() && sorted[i].score == t; ++i) (sorted[i].label == ClassLabel::Amd ? tp : fp) += 1;
    emit(t, tp, fp);
  }
  emit(-inf, P, N);
  curve.auc = auc(curve);
  return curve;
}

double auc(const RocCurve& curve) {
  double area = 0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto& a = curve.points[i - 1];
    const auto& b = curve.points[i];
    area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2;
  }
  return area;
}

std::vector<FnrFpr> fnr_fpr_curve(std::span<const ScoredCase> cases) {
  std::vector<FnrFpr> out;
  for (const auto& p : roc_curve(cases).points) out.push_back({p.fnr, p.fpr});
  return out;
}

double fpr_at_fnr(const RocCurve& curve, double fnr_target) {
  if (!(fnr_target >= 0 && fnr_target <= 1)) throw ConfigError("fnr target must lie in [0, 1]");
  double best = 1.0;
  for (const auto& p : curve.points)
    if (p.fnr <= fnr_target) best = std::min(best, p.fpr);
  return best;
}

namespace {

struct FoldInput {
  std::vector<const Volume*> train, val, test;
};

/// Stratified, seeded split of the training portion into train/validation.
void split_validation(const std::vector<const Volume*>& portion, double fraction, std::uint64_t seed,
                      FoldInput& out) {
  std::vector<const Volume*> by_label[2];
  for (const auto* v : portion) by_label[v->label() == ClassLabel::Amd].push_back(v);
  std::mt19937_64 rng(seed);
  for (auto& group : by_label) {
    std::shuffle(group.begin(), group.end(), rng);
    if (group.empty()) continue;
    auto n_val = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(group.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, group.size() > 1 ? group.size() - 1 : 1);
    out.val.insert(out.val.end(), group.begin(), group.begin() + static_cast<std::ptrdiff_t>(n_val));
    out.train.insert(out.train.end(), group.begin() + static_cast<std::ptrdiff_t>(n_val), group.end());
  }
  const auto by_id = [](const Volume* a, const Volume* b) { return a->id() < b->id(); };
  std::sort(out.train.begin(), out.train.end(), by_id);
  std::sort(out.val.begin(), out.val.end(), by_id);
}

template <typename Map>
FoldInput fold_input(const Map& prepared, const Fold& test_ids, const TrainConfig& config, int fold) {
  const std::set<std::string> test(test_ids.begin(), test_ids.end());
  FoldInput in;
  std::vector<const Volume*> portion;
  for (const auto& [id, v] : prepared) (test.count(id) ? in.test : portion).push_back(&v);
  const std::uint64_t seed = config.rng_seed ^ static_cast<std::uint64_t>(std::max(fold, 0));
  split_validation(portion, config.validation_fraction, derive_seed(seed, 5), in);
  return in;
}

std::vector<std::string> ids_of(const std::vector<const Volume*>& vs) {
  std::vector<std::string> ids;
  for (const auto* v : vs) ids.push_back(v->id());
  return ids;
}

std::vector<Volume> mirrored_copies(const std::vector<const Volume*>& vs) {
  std::vector<Volume> originals;
  for (const auto* v : vs) originals.push_back(*v);
  return mirror_augment(originals);
}

std::string base_id(const std::string& id) {
  const auto p = id.find('#');
  return p == std::string::npos ? id : id.substr(0, p);
}

FoldResult run_fold(int fold, const FoldInput& in, const TrainConfig& base, std::ostream* log, std::mutex& log_mu) {
  FoldResult r;
  r.fold = fold;
  r.train_ids = ids_of(in.train);
  r.val_ids = ids_of(in.val);
  r.test_ids = ids_of(in.test);

  const std::vector<Volume> train = mirrored_copies(in.train), val = mirrored_copies(in.val);
  std::set<std::string> seen;
  for (const auto* group : {&train, &val})
    for (const auto& v : *group) seen.insert(base_id(v.id()));
  for (const auto& id : r.test_ids)
    if (seen.count(id)) throw std::logic_error("test volume " + id + " leaked into training of fold " +
                                               std::to_string(fold));

  TrainConfig config = base;
  config.rng_seed = base.rng_seed ^ static_cast<std::uint64_t>(fold);

  struct LineLog : std::streambuf {
    std::ostream* out;
    std::mutex* mu;
    std::string line;
    int fold;
    int overflow(int c) override {
      if (c == '\n') {
        if (out) {
          std::lock_guard lock(*mu);
          *out << "fold " << fold << ' ' << line << '\n' << std::flush;
        }
        line.clear();
      } else if (c != EOF) {
        line.push_back(static_cast<char>(c));
      }
      return c;
    }
  } sink;
  sink.out = log;
  sink.mu = &log_mu;
  sink.fold = fold;
  std::ostream fold_log(&sink);
  std::ostream* flog = log ? &fold_log : nullptr;

  TrainingResult stage_b = fit_stage_b(train, val, config, flog);
  r.stage_b = {stage_b.best_epoch, stage_b.trace};
  TrainingResult stage_c = fit_stage_c(train, val, stage_b.network, config, flog);
  r.stage_c = {stage_c.best_epoch, stage_c.trace};

  for (const auto* v : in.test) {
    r.scores.push_back({v->id(), v->label(), predict_volume(stage_c.network, *v)});
    r.baseline_scores.push_back({v->id(), v->label(), predict_bscan_mean(stage_b.network, *v)});
  }
  r.roc = roc_curve(r.scores);
  r.baseline_roc = roc_curve(r.baseline_scores);
  return r;
}

std::vector<WeakLabeledBScan> weak_bscans(const std::vector<Volume>& volumes) {
  std::vector<WeakLabeledBScan> out;
  for (const auto& v : volumes)
    for (auto& b : assign_weak_labels(v)) out.push_back(std::move(b));
  return out;
}

std::vector<LabeledMosaic> mosaics(const std::vector<Volume>& volumes) {
  std::vector<LabeledMosaic> out;
  for (const auto& v : volumes) out.push_back(labeled_mosaic(v));
  return out;
}

std::pair<double, double> mean_sd(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double ss = 0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, xs.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0};
}

}  // namespace

TrainingResult fit_stage_b(const std::vector<Volume>& train, const std::vector<Volume>& val,
                           const TrainConfig& config, std::ostream* log) {
  return train_stage_b(weak_bscans(train), weak_bscans(val), config, log);
}

TrainingResult fit_stage_c(const std::vector<Volume>& train, const std::vector<Volume>& val,
                           const Network& stage_b, const TrainConfig& config, std::ostream* log) {
  return train_stage_c(mosaics(train), mosaics(val), stage_b, config, log);
}

FoldSplit fold_split(const std::vector<Volume>& prepared, const TrainConfig& config, int fold) {
  config.validate();
  if (fold >= config.folds) throw ConfigError("fold must be below folds (" + std::to_string(config.folds) + ")");
  DatasetManifest manifest;
  std::map<std::string, Volume> by_id;
  for (const auto& v : prepared) {
    manifest.entries.push_back({v.id(), {}, v.label(), v.laterality()});
    by_id.emplace(v.id(), v);
  }
  manifest.validate(false);
  Fold test;
  if (fold >= 0) test = split_folds(manifest, config.folds, config.rng_seed)[static_cast<std::size_t>(fold)];
  const FoldInput in = fold_input(by_id, test, config, fold);
  FoldSplit out;
  out.train_ids = ids_of(in.train);
  out.val_ids = ids_of(in.val);
  out.test_ids = ids_of(in.test);
  out.train = mirrored_copies(in.train);
  out.val = mirrored_copies(in.val);
  return out;
}

void summarize(EvalReport& report) {
  if (report.folds.empty()) return;
  std::vector<double> c, b;
  for (const auto& f : report.folds) {
    c.push_back(f.roc.auc);
    b.push_back(f.baseline_roc.auc);
  }
  std::tie(report.mean_auc, report.sd_auc) = mean_sd(c);
  std::tie(report.baseline_mean_auc, report.baseline_sd_auc) = mean_sd(b);
}

EvalReport cross_validate(const std::vector<Volume>& raw_volumes, const PreprocessConfig& preprocess,
                          const TrainConfig& config, const CrossValidationOptions& options) {
  preprocess.validate();
  config.validate();
  DatasetManifest manifest;
  bool pos = false, neg = false;
  for (const auto& v : raw_volumes) {
    manifest.entries.push_back({v.id(), {}, v.label(), v.laterality()});
    (v.label() == ClassLabel::Amd ? pos : neg) = true;
  }
  manifest.validate(false);
  if (raw_volumes.size() < static_cast<std::size_t>(config.folds))
    throw ConfigError("need at least " + std::to_string(config.folds) + " volumes");
  if (!pos || !neg) throw DataError("cross-validation needs both classes");

  // Preprocessing is a pure function of the volume, so one pass serves every fold.
  std::mutex log_mu;
  std::map<std::string, Volume> prepared;
  for (const auto& v : raw_volumes) {
    prepared.emplace(v.id(), preprocess_volume(v, preprocess));
    if (options.log) {
      std::lock_guard lock(log_mu);
      *options.log << "preprocessed " << v.id() << '\n';
    }
  }

  const auto folds = split_folds(manifest, config.folds, config.rng_seed);
  std::vector<FoldInput> inputs;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    inputs.push_back(fold_input(prepared, folds[f], config, static_cast<int>(f)));
    bool tp = false, tn = false;
    for (const auto* v : inputs[f].test) (v->label() == ClassLabel::Amd ? tp : tn) = true;
    if (!tp || !tn) throw DataError("fold " + std::to_string(f) + " lacks one of the classes");
  }

  EvalReport report;
  report.seed = config.rng_seed;
  report.config = {{"preprocess", preprocess}, {"train", config}};
  report.expected_folds = config.folds;
  report.folds.resize(folds.size());

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(folds.size());
  const auto worker = [&] {
    for (std::size_t f; (f = next++) < folds.size();) {
      try {
        report.folds[f] = run_fold(static_cast<int>(f), inputs[f], config, options.log, log_mu);
      } catch (...) {
        errors[f] = std::current_exception();
      }
    }
  };
  const auto n_threads = static_cast<std::size_t>(std::clamp(options.threads, 1, config.folds));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  summarize(report);
  return report;
}

EvalReport cross_validate(const DatasetManifest& manifest, const PreprocessConfig& preprocess,
                          const TrainConfig& config, const CrossValidationOptions& options) {
  return cross_validate(load_volumes(manifest), preprocess, config, options);
}

namespace {

nlohmann::json trace_json(const std::vector<EpochRecord>& trace) {
  nlohmann::json t = nlohmann::json::array();
  for (const auto& e : trace) t.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
  return t;
}

nlohmann::json scores_json(const std::vector<ScoredCase>& cases) {
  nlohmann::json s = nlohmann::json::array();
  for (const auto& c : cases) s.push_back({{"id", c.volume_id}, {"label", to_string(c.label)}, {"score", c.score}});
  return s;
}

}  // namespace

nlohmann::json report_json(const EvalReport& report) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : report.folds)
    folds.push_back({{"fold", f.fold},
                     {"auc", f.roc.auc},
                     {"best_epoch", f.stage_c.best_epoch},
                     {"trace", trace_json(f.stage_c.trace)},
                     {"fpr_at_fnr_0.05", fpr_at_fnr(f.roc, 0.05)},
                     {"scores", scores_json(f.scores)},
                     {"train_ids", f.train_ids},
                     {"val_ids", f.val_ids},
                     {"test_ids", f.test_ids},
                     {"stage_b",
                      {{"auc", f.baseline_roc.auc},
                       {"best_epoch", f.stage_b.best_epoch},
                       {"trace", trace_json(f.stage_b.trace)},
                       {"scores", scores_json(f.baseline_scores)}}}});
  return {{"seed", report.seed},
          {"config", report.config},
          {"folds", folds},
          {"mean_auc", report.mean_auc},
          {"sd_auc", report.sd_auc},
          {"stage_b_mean_auc", report.baseline_mean_auc},
          {"stage_b_sd_auc", report.baseline_sd_auc}};
}

namespace {

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_curve_csv(const RocCurve& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "threshold,tpr,fpr,fnr\n";
  for (const auto& p : curve.points)
    out << format_double(p.threshold) << ',' << format_double(p.tpr) << ',' << format_double(p.fpr) << ','
        << format_double(p.fnr) << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

RocCurve read_curve_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "threshold,tpr,fpr,fnr") throw DataError("bad curve header in " + path.string());
  RocCurve curve;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    double v[4];
    std::size_t pos = 0;
    for (int k = 0; k < 4; ++k) {
      const std::size_t end = k < 3 ? line.find(',', pos) : line.size();
      if (end == std::string::npos) throw DataError("bad curve row in " + path.string());
      const std::string field = line.substr(pos, end - pos);
      char* stop = nullptr;
      v[k] = std::strtod(field.c_str(), &stop);
      if (field.empty() || *stop != '\0') throw DataError("bad number '" + field + "' in " + path.string());
      pos = end + 1;
    }
    curve.points.push_back({v[0], v[1], v[2], v[3]});
  }
  curve.auc = auc(curve);
  return curve;
}

void serialize_report(const EvalReport& report, const std::filesystem::path& dir) {
  if (report.folds.empty() || static_cast<int>(report.folds.size()) != report.expected_folds)
    throw DataError("fold count mismatch: report has " + std::to_string(report.folds.size()) + ", config " +
                    std::to_string(report.expected_folds));
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "report.json");
  if (!(out << report_json(report).dump(2) << '\n')) throw DataError("cannot write " + (dir / "report.json").string());
  for (const auto& f : report.folds) write_curve_csv(f.roc, dir / ("roc_fold" + std::to_string(f.fold) + ".csv"));
}

}  // namespace retinet
