#pragma once

#include "retinet/early_stopping.hpp"
#include "retinet/nn/network.hpp"
#include "retinet/preprocess.hpp"
#include "retinet/volume.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace retinet {

using Index = Eigen::Index;
using Network = nn::Network<float>;

struct TrainConfig {
  int max_epochs = 100;
  int patience = 15;
  int batch_size_b = 20;
  int batch_size_c = 1;
  int folds = 5;
  double rho = 0.95;
  double epsilon = 1e-6;
  std::uint64_t rng_seed = 0;
  double validation_fraction = 0.2;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Rejects unknown keys; missing keys keep their defaults.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Independent stream `stream` of a base seed (splitmix64 finaliser).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Downsampling factor of the FEATURE block (three 2x2 max pools).
inline constexpr Index kFeatureStride = 8;
inline constexpr Index kFeatureChannels = 64;

/// B-scan network on (1, input_d, input_w) inputs, Glorot-initialised from `seed`.
Network build_retinet_b(Index input_w, Index input_d, std::uint64_t seed);

/// Mosaic network: FEATURE copied from `feature_source` and frozen, five
/// ADAPT blocks, then a fresh Flatten/Dense/Softmax head.
Network build_retinet_c(const Network& feature_source, Index mosaic_w, Index mosaic_h, std::uint64_t seed);

/// Index one past the last FEATURE layer.
Index feature_end(const Network& net);

/// Input rows [first, last] that FEATURE output row `row` depends on,
/// following every window and zero-padded kernel back to the input.
std::pair<Index, Index> feature_row_support(const Network& net, Index row);

/// FEATURE output rows [lo, hi) of a `bscan_depth`-row input whose support
/// stays inside the input. In a mosaic these rows see no neighbouring B-scan.
std::pair<Index, Index> seam_free_rows(const Network& net, Index bscan_depth);

struct WeakLabeledBScan {
  BScan image;
  ClassLabel weak_label = ClassLabel::Control;
  std::string volume_id;
  Index index = 0;
};

std::vector<WeakLabeledBScan> assign_weak_labels(const Volume& volume);

/// B-scans stacked vertically: B-scan h occupies rows [h*D, (h+1)*D).
struct Mosaic {
  BScan pixels;
  Index bscan_depth = 0;

  Index width() const { return pixels.cols(); }
  Index height() const { return pixels.rows(); }
  Index bscan_count() const { return bscan_depth == 0 ? 0 : pixels.rows() / bscan_depth; }
  BScan slice(Index h) const;
};

Mosaic build_mosaic(const Volume& volume);

struct LabeledMosaic {
  Mosaic mosaic;
  ClassLabel label = ClassLabel::Control;
  std::string volume_id;
};

LabeledMosaic labeled_mosaic(const Volume& volume);

/// Single-channel image as a (1, 1, rows, cols) tensor.
nn::Tensor<float> image_tensor(const Eigen::Ref<const BScan>& image);

struct TrainingResult {
  Network network;
  int best_epoch = 0;
  std::vector<EpochRecord> trace;
};

/// Extreme-learning stage: CLASSIFICATION stays at its random
/// initialisation, FEATURE is trained with Adadelta on cross-entropy.
TrainingResult train_stage_b(const std::vector<WeakLabeledBScan>& train, const std::vector<WeakLabeledBScan>& val,
                             const TrainConfig& config, std::ostream* log = nullptr);

/// FEATURE frozen; ADAPT and CLASSIFICATION trained on true volume labels.
TrainingResult train_stage_c(const std::vector<LabeledMosaic>& train, const std::vector<LabeledMosaic>& val,
                             const Network& feature_source, const TrainConfig& config, std::ostream* log = nullptr);

/// Probability of Amd from the mosaic network, inference mode.
double predict_volume(const Network& network_c, const Volume& volume);

/// Both class probabilities; sums to one.
std::array<double, 2> predict_volume_probabilities(const Network& network_c, const Volume& volume);

/// Mean over B-scans of the B-scan network's Amd probability.
double predict_bscan_mean(const Network& network_b, const Volume& volume);

/// Per-B-scan Amd probabilities.
std::vector<double> predict_bscans(const Network& network_b, const Volume& volume);

/// Fundus-aligned map (rows = B-scans, cols = width) of the last ADAPT
/// convolution: channel mean, resampled to the mosaic, max over each
/// B-scan's depth rows, min-max scaled to [0, 1]. Constant maps are zero.
Image<float> export_activation_map(const Network& network_c, const Volume& volume);

/// FNV-1a 64 of the canonical JSON dump of the config.
std::uint64_t config_hash(const PreprocessConfig& config);

struct ModelInfo {
  std::string kind;  // "retinet_b" or "retinet_c"
  PreprocessConfig preprocess;
  std::uint64_t seed = 0;
};

/// Weights at `path`, architecture table and provenance at `path` + ".json".
void save_model(const Network& net, const ModelInfo& info, const std::filesystem::path& path);
Network load_model(const std::filesystem::path& path, ModelInfo* info = nullptr);

nlohmann::json architecture_json(const Network& net);
Network network_from_json(const nlohmann::json& j);

}  // namespace retinet
