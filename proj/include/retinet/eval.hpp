#pragma once

#include "retinet/dataset.hpp"
#include "retinet/early_stopping.hpp"
#include "retinet/model.hpp"
#include "retinet/preprocess.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace retinet {

struct ScoredCase {
  std::string volume_id;
  ClassLabel label = ClassLabel::Control;
  double score = 0;
};

struct RocPoint {
  double threshold = 0;
  double tpr = 0;
  double fpr = 0;
  double fnr = 0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // decreasing threshold
  double auc = 0;
};

/// Thresholds are +inf, the distinct scores in decreasing order, and -inf;
/// score >= threshold counts as Amd. A threshold whose (fpr, tpr) repeats
/// the previous point adds nothing and is dropped.
RocCurve roc_curve(std::span<const ScoredCase> cases);

/// Trapezoidal area under the (fpr, tpr) polyline.
double auc(const RocCurve& curve);

struct FnrFpr {
  double fnr = 0;
  double fpr = 0;
};

std::vector<FnrFpr> fnr_fpr_curve(std::span<const ScoredCase> cases);

/// Smallest fpr over points with fnr <= target (step lookup).
double fpr_at_fnr(const RocCurve& curve, double fnr_target);

struct StageSummary {
  int best_epoch = 0;
  std::vector<EpochRecord> trace;
};

struct FoldResult {
  int fold = 0;
  std::vector<std::string> train_ids, val_ids, test_ids;  // before mirroring
  StageSummary stage_b, stage_c;
  std::vector<ScoredCase> scores;           // RetiNet C, predict_volume
  std::vector<ScoredCase> baseline_scores;  // RetiNet B Extreme, predict_bscan_mean
  RocCurve roc, baseline_roc;
};

struct EvalReport {
  std::uint64_t seed = 0;
  nlohmann::json config;
  int expected_folds = 0;
  std::vector<FoldResult> folds;
  double mean_auc = 0, sd_auc = 0;
  double baseline_mean_auc = 0, baseline_sd_auc = 0;
};

struct CrossValidationOptions {
  int threads = 1;  // folds trained concurrently
  std::ostream* log = nullptr;
};

/// Training and validation volumes of one fold, both mirror-augmented.
/// A negative fold keeps every volume out of the test set.
struct FoldSplit {
  std::vector<std::string> train_ids, val_ids, test_ids;  // before mirroring
  std::vector<Volume> train, val;
};

FoldSplit fold_split(const std::vector<Volume>& prepared, const TrainConfig& config, int fold);

/// Stage B on the weak-labelled B-scans of preprocessed volumes.
TrainingResult fit_stage_b(const std::vector<Volume>& train, const std::vector<Volume>& val,
                           const TrainConfig& config, std::ostream* log = nullptr);
/// Stage C on the mosaics of preprocessed volumes.
TrainingResult fit_stage_c(const std::vector<Volume>& train, const std::vector<Volume>& val,
                           const Network& stage_b, const TrainConfig& config, std::ostream* log = nullptr);

/// Five-fold protocol on raw volumes: preprocess, stratified folds, per fold
/// a seeded 20% validation split of the training portion, mirroring of the
/// training portion, stage B then stage C, scoring of the held-out fold.
EvalReport cross_validate(const std::vector<Volume>& raw_volumes, const PreprocessConfig& preprocess,
                          const TrainConfig& config, const CrossValidationOptions& options = {});

EvalReport cross_validate(const DatasetManifest& manifest, const PreprocessConfig& preprocess,
                          const TrainConfig& config, const CrossValidationOptions& options = {});

/// Fills mean/sd (sample standard deviation) from the fold curves.
void summarize(EvalReport& report);

nlohmann::json report_json(const EvalReport& report);

/// Writes `dir`/report.json and `dir`/roc_fold<k>.csv for every fold.
void serialize_report(const EvalReport& report, const std::filesystem::path& dir);

void write_curve_csv(const RocCurve& curve, const std::filesystem::path& path);
RocCurve read_curve_csv(const std::filesystem::path& path);

}  // namespace retinet
