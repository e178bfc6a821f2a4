#include "retinet/model.hpp"

#include "retinet/nn/optim.hpp"
#include "retinet/nn/weights.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <span>

namespace retinet {

using nn::Block;
using nn::LayerKind;
using nn::Mode;
using nn::Tensor;

void TrainConfig::validate() const {
  const auto fail = [](const char* field, const std::string& why) {
    throw ConfigError(std::string("train config field '") + field + "' " + why);
  };
  if (max_epochs < 1) fail("max_epochs", "must be >= 1");
  if (patience < 1 || patience >= max_epochs) fail("patience", "must satisfy 1 <= patience < max_epochs");
  if (batch_size_b < 1) fail("batch_size_b", "must be >= 1");
  if (batch_size_c < 1) fail("batch_size_c", "must be >= 1");
  if (folds < 2) fail("folds", "must be >= 2");
  if (!(rho > 0 && rho < 1)) fail("rho", "must lie in (0, 1)");
  if (!(epsilon > 0)) fail("epsilon", "must be positive");
  if (!(validation_fraction > 0 && validation_fraction < 1)) fail("validation_fraction", "must lie in (0, 1)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"max_epochs", c.max_epochs},   {"patience", c.patience}, {"batch_size_b", c.batch_size_b},
       {"batch_size_c", c.batch_size_c}, {"folds", c.folds},       {"rho", c.rho},
       {"epsilon", c.epsilon},         {"rng_seed", c.rng_seed}, {"validation_fraction", c.validation_fraction}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  const nlohmann::json known = TrainConfig{};
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown train config key '" + key + "'");
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.batch_size_b = j.value("batch_size_b", c.batch_size_b);
  c.batch_size_c = j.value("batch_size_c", c.batch_size_c);
  c.folds = j.value("folds", c.folds);
  c.rho = j.value("rho", c.rho);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Network build_retinet_b(Index input_w, Index input_d, std::uint64_t seed) {
  if (input_w < 32 || input_d < 32)
    throw ConfigError("input too small for the pooling pyramid: " + std::to_string(input_w) + "x" +
                      std::to_string(input_d) + ", need at least 32x32");
  const auto F = Block::Feature, K = Block::Classification;
  Network net({1, input_d, input_w});
  struct Conv {
    Index kernel, in, out;
    bool pool_after;
  };
  const Conv table[] = {{5, 1, 16, false},  {3, 16, 16, true},  {3, 16, 32, false}, {3, 32, 32, true},
                        {3, 32, 64, false}, {3, 64, 64, true},  {3, 64, 64, false}};
  int pools = 0;
  for (int i = 0; i < 7; ++i) {
    const auto n = std::to_string(i + 1);
    net.add(nn::conv2d("feature.c" + n, F, table[i].kernel, table[i].in, table[i].out));
    net.add(nn::leaky_relu("feature.a" + n, F));
    if (table[i].pool_after) net.add(nn::max_pool("feature.p" + std::to_string(++pools), F, 2, 2));
  }
  const Index flat = nn::element_count(net.output_shape());
  net.add(nn::flatten("classification.flatten", K))
      .add(nn::dense("classification.d1", K, flat, 64))
      .add(nn::leaky_relu("classification.a1", K))
      .add(nn::dense("classification.d2", K, 64, 2))
      .add(nn::softmax("classification.softmax", K));
  std::mt19937_64 rng(seed);
  nn::glorot_initialize(net, rng);
  return net;
}

Index feature_end(const Network& net) {
  if (!net.has_block(Block::Feature)) throw ConfigError("missing block FEATURE");
  return net.block_range(Block::Feature).second;
}

Network build_retinet_c(const Network& feature_source, Index mosaic_w, Index mosaic_h, std::uint64_t seed) {
  if (!feature_source.has_block(Block::Feature)) throw ConfigError("missing block FEATURE");
  const auto [f0, f1] = feature_source.block_range(Block::Feature);
  if (f0 != 0) throw ConfigError("shape mismatch: FEATURE must be the first block");
  Network net({feature_source.input_shape(0)[0], mosaic_h, mosaic_w});
  for (Index i = f0; i < f1; ++i) net.add(feature_source.layer(i));

  const auto A = Block::Adapt;
  for (int b = 1; b <= 5; ++b) {
    const auto n = std::to_string(b);
    const Index channels = net.output_shape()[0];
    net.add(nn::conv2d("adapt.c" + n, A, 3, channels, kFeatureChannels));
    net.add(nn::leaky_relu("adapt.a" + n, A));
    const Index h = net.output_shape()[1], w = net.output_shape()[2];
    net.add(nn::avg_pool("adapt.p" + n, A, h >= 2 ? 2 : 1, w >= 2 ? 2 : 1));
    // eps 1e-3: the last blocks normalise over a handful of positions per channel
    net.add(nn::batch_norm("adapt.bn" + n, A, kFeatureChannels, 0.99, 1e-3));
  }
  const auto K = Block::Classification;
  // Flatten, not global averaging: at batch size 1 the last BatchNorm zeroes
  // every channel mean, so a spatial average would not depend on the input.
  const auto s = net.output_shape();
  net.add(nn::flatten("classification.flatten", K))
      .add(nn::dense("classification.d1", K, s[0] * s[1] * s[2], 2))
      .add(nn::softmax("classification.softmax", K));

  std::mt19937_64 rng(seed);
  nn::glorot_initialize(net, rng);
  nn::transfer_block(feature_source, net, Block::Feature);
  net.freeze(Block::Feature);
  return net;
}

std::pair<Index, Index> feature_row_support(const Network& net, Index row) {
  Index lo = row, hi = row;
  for (Index i = feature_end(net) - 1; i >= 0; --i) {
    const auto& l = net.layer(i);
    switch (l.kind) {
      case LayerKind::Conv2D:
        lo = lo * l.stride - l.padding;
        hi = hi * l.stride - l.padding + l.kernel_h - 1;
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        lo = lo * l.kernel_h;
        hi = hi * l.kernel_h + l.kernel_h - 1;
        break;
      case LayerKind::LeakyReLU:
      case LayerKind::BatchNorm: break;
      default: throw ConfigError("row support undefined through layer " + l.name);
    }
  }
  return {lo, hi};
}

std::pair<Index, Index> seam_free_rows(const Network& net, Index bscan_depth) {
  Network probe({net.input_shape(0)[0], bscan_depth, net.input_shape(0)[2]});
  for (Index i = 0; i < feature_end(net); ++i) probe.add(net.layer(i));
  const Index rows = probe.output_shape()[1];
  Index lo = rows, hi = 0;
  for (Index r = 0; r < rows; ++r) {
    const auto [a, b] = feature_row_support(net, r);
    if (a >= 0 && b < bscan_depth) {
      lo = std::min(lo, r);
      hi = std::max(hi, r + 1);
    }
  }
  return lo < hi ? std::pair{lo, hi} : std::pair<Index, Index>{0, 0};
}

std::vector<WeakLabeledBScan> assign_weak_labels(const Volume& volume) {
  std::vector<WeakLabeledBScan> out;
  out.reserve(static_cast<std::size_t>(volume.bscan_count()));
  for (Index h = 0; h < volume.bscan_count(); ++h)
    out.push_back({volume.bscan(h), volume.label(), volume.id(), h});
  return out;
}

BScan Mosaic::slice(Index h) const {
  if (h < 0 || h >= bscan_count()) throw std::out_of_range("mosaic slice " + std::to_string(h));
  return pixels.middleRows(h * bscan_depth, bscan_depth);
}

Mosaic build_mosaic(const Volume& volume) {
  // [h][d][w] storage is already the stacked layout
  Mosaic m;
  m.bscan_depth = volume.depth();
  m.pixels = Volume::ConstBScanMap(volume.voxels().data(), volume.bscan_count() * volume.depth(), volume.width());
  return m;
}

LabeledMosaic labeled_mosaic(const Volume& volume) { return {build_mosaic(volume), volume.label(), volume.id()}; }

Tensor<float> image_tensor(const Eigen::Ref<const BScan>& image) {
  Tensor<float> t({1, 1, image.rows(), image.cols()});
  Eigen::Map<BScan>(t.data(), image.rows(), image.cols()) = image;
  return t;
}

namespace {

Tensor<float> stack_samples(const std::vector<const Tensor<float>*>& samples) {
  nn::Shape shape = samples.front()->shape();
  shape[0] = static_cast<Index>(samples.size());
  Tensor<float> out(shape);
  const Index per = samples.front()->size();
  for (std::size_t k = 0; k < samples.size(); ++k)
    std::copy_n(samples[k]->data(), per, out.data() + static_cast<Index>(k) * per);
  return out;
}

int label_index(ClassLabel l) { return l == ClassLabel::Amd ? 1 : 0; }

/// Inputs already in network form, so epochs do no conversion work.
struct Samples {
  std::vector<Tensor<float>> x;
  std::vector<int> y;
};

/// Mean cross-entropy in inference mode, evaluated from layer `begin`.
double mean_loss(const Network& net, const Samples& s, Index begin, std::size_t batch) {
  double total = 0;
  for (std::size_t i = 0; i < s.x.size(); i += batch) {
    const std::size_t n = std::min(batch, s.x.size() - i);
    std::vector<const Tensor<float>*> xs;
    for (std::size_t k = 0; k < n; ++k) xs.push_back(&s.x[i + k]);
    const auto acts = nn::forward(net, stack_samples(xs), Mode::Infer, begin);
    total += nn::cross_entropy(acts.output(), std::span(s.y).subspan(i, n)).loss * static_cast<double>(n);
  }
  return total / static_cast<double>(s.x.size());
}

/// Adadelta over shuffled mini-batches from layer `begin`.
TrainingResult train_network(Network net, const Samples& train, const Samples& val, Index begin, int batch_size,
                             const TrainConfig& config, std::uint64_t shuffle_seed, const char* stage,
                             std::ostream* log) {
  nn::AdadeltaState<float> opt(net, config.rho, config.epsilon);
  std::mt19937_64 rng(shuffle_seed);
  std::vector<std::size_t> order(train.x.size());
  const auto batch = static_cast<std::size_t>(batch_size);

  const auto run_epoch = [&](int epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double train_loss = 0;
    for (std::size_t i = 0; i < order.size(); i += batch) {
      const std::size_t n = std::min(batch, order.size() - i);
      std::vector<const Tensor<float>*> xs;
      std::vector<int> ys;
      for (std::size_t k = 0; k < n; ++k) {
        xs.push_back(&train.x[order[i + k]]);
        ys.push_back(train.y[order[i + k]]);
      }
      const auto acts = nn::forward(net, stack_samples(xs), Mode::Train, begin);
      const auto ce = nn::cross_entropy(acts.output(), ys);
      nn::adadelta_step(net, nn::backward(net, acts, ce.logit_gradient), opt);
      nn::update_batch_norm_statistics(net, acts);
      train_loss += ce.loss * static_cast<double>(n);
    }
    train_loss /= static_cast<double>(order.size());
    const double val_loss = mean_loss(net, val, begin, 64);
    if (log) {
      char line[128];
      std::snprintf(line, sizeof line, "[%s] epoch %3d  train %.5f  val %.5f\n", stage, epoch, train_loss, val_loss);
      *log << line << std::flush;
    }
    return std::pair{train_loss, val_loss};
  };
  auto r = fit_with_early_stopping(run_epoch, [&] { return net; }, config.max_epochs, config.patience);
  return {std::move(r.best), r.best_epoch, std::move(r.trace)};
}

}  // namespace

TrainingResult train_stage_b(const std::vector<WeakLabeledBScan>& train, const std::vector<WeakLabeledBScan>& val,
                             const TrainConfig& config, std::ostream* log) {
  config.validate();
  if (train.empty()) throw ConfigError("empty training split");
  if (val.empty()) throw ConfigError("empty validation split");
  const Index d = train.front().image.rows(), w = train.front().image.cols();
  const auto convert = [&](const std::vector<WeakLabeledBScan>& items) {
    Samples s;
    for (const auto& b : items) {
      if (b.image.rows() != d || b.image.cols() != w)
        throw ConfigError("shape mismatch: B-scan " + b.volume_id + "/" + std::to_string(b.index));
      s.x.push_back(image_tensor(b.image));
      s.y.push_back(label_index(b.weak_label));
    }
    return s;
  };
  const Samples tr = convert(train), va = convert(val);

  Network net = build_retinet_b(w, d, derive_seed(config.rng_seed, 1));
  net.freeze(Block::Classification);
  return train_network(std::move(net), tr, va, 0, config.batch_size_b, config, derive_seed(config.rng_seed, 2),
                       "B", log);
}

TrainingResult train_stage_c(const std::vector<LabeledMosaic>& train, const std::vector<LabeledMosaic>& val,
                             const Network& feature_source, const TrainConfig& config, std::ostream* log) {
  config.validate();
  if (train.empty()) throw ConfigError("empty training split");
  if (val.empty()) throw ConfigError("empty validation split");
  const Index h = train.front().mosaic.height(), w = train.front().mosaic.width();
  Network net = build_retinet_c(feature_source, w, h, derive_seed(config.rng_seed, 3));
  const Index begin = feature_end(net);

  // FEATURE is frozen and has no batch statistics, so its output is fixed.
  const auto features = [&](const std::vector<LabeledMosaic>& items) {
    Samples s;
    for (const auto& m : items) {
      if (m.mosaic.height() != h || m.mosaic.width() != w)
        throw ConfigError("shape mismatch: mosaic of " + m.volume_id);
      Tensor<float> f = nn::forward(net, image_tensor(m.mosaic.pixels), Mode::Infer, 0, begin).output();
      s.x.push_back(std::move(f));
      s.y.push_back(label_index(m.label));
    }
    return s;
  };
  const Samples tr = features(train), va = features(val);
  return train_network(std::move(net), tr, va, begin, config.batch_size_c, config, derive_seed(config.rng_seed, 4),
                       "C", log);
}

namespace {

/// Class probabilities per sample, the final softmax re-evaluated in double
/// so that each row sums to one at double precision.
Eigen::ArrayXXd class_probabilities(const Network& net, Tensor<float> x) {
  Index end = net.layer_count();
  if (net.layer(end - 1).kind == LayerKind::Softmax) --end;
  const auto logits = nn::forward(net, std::move(x), Mode::Infer, 0, end).output();
  if (logits.sample_size() != 2) throw ConfigError("shape mismatch: network does not output two classes");
  Eigen::ArrayXXd p = logits.rows().cast<double>().array();
  p.colwise() -= p.rowwise().maxCoeff();
  p = p.exp();
  p.colwise() /= p.rowwise().sum();
  return p;
}

}  // namespace

std::array<double, 2> predict_volume_probabilities(const Network& network_c, const Volume& volume) {
  const Eigen::ArrayXXd p = class_probabilities(network_c, image_tensor(build_mosaic(volume).pixels));
  return {p(0, 0), p(0, 1)};
}

double predict_volume(const Network& network_c, const Volume& volume) {
  return predict_volume_probabilities(network_c, volume)[1];
}

std::vector<double> predict_bscans(const Network& network_b, const Volume& volume) {
  const Index H = volume.bscan_count();
  if (H == 0) throw DataError("volume " + volume.id() + " has no B-scans");
  Tensor<float> x({H, 1, volume.depth(), volume.width()});
  std::copy(volume.voxels().begin(), volume.voxels().end(), x.data());
  const Eigen::ArrayXXd p = class_probabilities(network_b, std::move(x));
  std::vector<double> scores(static_cast<std::size_t>(H));
  for (Index h = 0; h < H; ++h) scores[static_cast<std::size_t>(h)] = p(h, 1);
  return scores;
}

double predict_bscan_mean(const Network& network_b, const Volume& volume) {
  const auto s = predict_bscans(network_b, volume);
  return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

Image<float> export_activation_map(const Network& network_c, const Volume& volume) {
  if (!network_c.has_block(Block::Adapt)) throw ConfigError("missing block ADAPT");
  const auto [a0, a1] = network_c.block_range(Block::Adapt);
  Index last = -1;
  for (Index i = a0; i < a1; ++i)
    if (network_c.layer(i).kind == LayerKind::Conv2D) last = i;
  if (last < 0) throw ConfigError("ADAPT block has no convolution");
  if (last + 1 < network_c.layer_count() && network_c.layer(last + 1).kind == LayerKind::LeakyReLU) ++last;

  const Mosaic mosaic = build_mosaic(volume);
  const auto act = nn::forward(network_c, image_tensor(mosaic.pixels), Mode::Infer, 0, last + 1).output();
  const Index C = act.channels(), rows = act.height(), cols = act.width();
  Image<double> mean = Image<double>::Zero(rows, cols);
  for (Index c = 0; c < C; ++c)
    for (Index y = 0; y < rows; ++y)
      for (Index x = 0; x < cols; ++x) mean(y, x) += act(0, c, y, x);
  mean /= static_cast<double>(C);

  const Image<double> full = resize_bilinear(mean, mosaic.width(), mosaic.height());
  Image<double> map(volume.bscan_count(), volume.width());
  for (Index h = 0; h < volume.bscan_count(); ++h)
    map.row(h) = full.middleRows(h * mosaic.bscan_depth, mosaic.bscan_depth).colwise().maxCoeff();
  const double lo = map.minCoeff(), hi = map.maxCoeff();
  if (!(hi > lo)) return Image<float>::Zero(map.rows(), map.cols());
  return ((map - lo) / (hi - lo)).cast<float>();
}

std::uint64_t config_hash(const PreprocessConfig& config) {
  const std::string text = nlohmann::json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

nlohmann::json architecture_json(const Network& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers())
    layers.push_back({{"name", l.name},
                      {"kind", nn::to_string(l.kind)},
                      {"block", nn::to_string(l.block)},
                      {"kernel", {l.kernel_h, l.kernel_w}},
                      {"in", l.in_ch},
                      {"out", l.out_ch},
                      {"stride", l.stride},
                      {"padding", l.padding},
                      {"momentum", l.momentum},
                      {"epsilon", l.epsilon},
                      {"slope", l.slope}});
  nlohmann::json frozen = nlohmann::json::array();
  for (auto b : net.frozen_blocks()) frozen.push_back(nn::to_string(b));
  return {{"input_shape", net.input_shape(0)}, {"layers", layers}, {"frozen_blocks", frozen}};
}

Network network_from_json(const nlohmann::json& j) {
  try {
    Network net(j.at("input_shape").get<nn::Shape>());
    for (const auto& l : j.at("layers")) {
      nn::LayerSpec s;
      s.name = l.at("name").get<std::string>();
      s.kind = nn::parse_layer_kind(l.at("kind").get<std::string>());
      s.block = nn::parse_block(l.at("block").get<std::string>());
      s.kernel_h = l.at("kernel").at(0).get<Index>();
      s.kernel_w = l.at("kernel").at(1).get<Index>();
      s.in_ch = l.at("in").get<Index>();
      s.out_ch = l.at("out").get<Index>();
      s.stride = l.at("stride").get<Index>();
      s.padding = l.at("padding").get<Index>();
      s.momentum = l.at("momentum").get<double>();
      s.epsilon = l.at("epsilon").get<double>();
      s.slope = l.at("slope").get<double>();
      net.add(s);
    }
    for (const auto& b : j.at("frozen_blocks")) net.freeze(nn::parse_block(b.get<std::string>()));
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed architecture table: ") + e.what());
  }
}

void save_model(const Network& net, const ModelInfo& info, const std::filesystem::path& path) {
  nn::save_weights(net, path);
  nlohmann::json side = {{"kind", info.kind},
                         {"architecture", architecture_json(net)},
                         {"preprocess", info.preprocess},
                         {"preprocess_config_hash", hex(config_hash(info.preprocess))},
                         {"seed", info.seed}};
  std::ofstream out(path.string() + ".json");
  if (!(out << side.dump(2) << '\n')) throw DataError("cannot write " + path.string() + ".json");
}

Network load_model(const std::filesystem::path& path, ModelInfo* info) {
  const std::filesystem::path side_path = path.string() + ".json";
  std::ifstream in(side_path);
  if (!in) throw DataError("missing file " + side_path.string());
  nlohmann::json side;
  ModelInfo mi;
  try {
    side = nlohmann::json::parse(in);
    mi.kind = side.at("kind").get<std::string>();
    mi.preprocess = side.at("preprocess").get<PreprocessConfig>();
    mi.seed = side.at("seed").get<std::uint64_t>();
    if (side.at("preprocess_config_hash").get<std::string>() != hex(config_hash(mi.preprocess)))
      throw DataError("preprocess config hash mismatch in " + side_path.string());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed model sidecar " + side_path.string() + ": " + e.what());
  }
  Network net = network_from_json(side.at("architecture"));
  nn::load_weights(path, net);
  if (info) *info = std::move(mi);
  return net;
}

}  // namespace retinet
