#include "retinet/dataset.hpp"
#include "retinet/eval.hpp"
#include "retinet/model.hpp"
#include "retinet/phantom.hpp"
#include "retinet/plot.hpp"
#include "retinet/preprocess.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <malloc.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

namespace fs = std::filesystem;
using namespace retinet;

namespace {

/// Bad invocation: exit 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Settings {
  PreprocessConfig preprocess;
  TrainConfig train;
  std::string manifest;
  std::string out;
};

/// Config file: {"preprocess": {...}, "train": {...}, "manifest": path, "out": path}.
Settings load_settings(const std::string& path) {
  Settings s;
  if (path.empty()) return s;
  std::ifstream in(path);
  if (!in) throw DataError("missing file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("malformed config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "preprocess")
      s.preprocess = value.get<PreprocessConfig>();
    else if (key == "train")
      s.train = value.get<TrainConfig>();
    else if (key == "manifest")
      s.manifest = value.get<std::string>();
    else if (key == "out")
      s.out = value.get<std::string>();
    else
      throw ConfigError("unknown config key '" + key + "'");
  }
  return s;
}

int default_threads() {
  if (const char* env = std::getenv("RETINET_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*env == '\0' || *end != '\0' || n < 1) throw UsageError("RETINET_THREADS must be a positive integer");
    return static_cast<int>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out || !(out << j.dump(2) << '\n')) throw DataError("cannot write " + path.string());
}

nlohmann::json trace_json(const TrainingResult& r) {
  nlohmann::json t = nlohmann::json::array();
  for (const auto& e : r.trace) t.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
  return {{"best_epoch", r.best_epoch}, {"trace", t}};
}

/// Options shared by the subcommands that train or preprocess.
struct Common {
  std::string config_path, manifest, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> max_epochs, patience, folds, threads;
  std::optional<double> kappa, diffusion_step, dog_sigma_fine, dog_sigma_coarse, ransac_inlier_threshold,
      ransac_min_inlier_fraction, bm_anchor_fraction;
  std::optional<int> diffusion_iterations, ransac_iterations;
  std::optional<Eigen::Index> resize_w, resize_d;

  void add_to(CLI::App* sub, bool training) {
    sub->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--manifest", manifest, "dataset manifest");
    sub->add_option("--out", out, "output directory");
    sub->add_option("--seed", seed, "seed for preprocessing and training");
    sub->add_option("--kappa", kappa, "diffusion conduction scale");
    sub->add_option("--diffusion-iterations", diffusion_iterations);
    sub->add_option("--diffusion-step", diffusion_step);
    sub->add_option("--dog-sigma-fine", dog_sigma_fine);
    sub->add_option("--dog-sigma-coarse", dog_sigma_coarse);
    sub->add_option("--ransac-iterations", ransac_iterations);
    sub->add_option("--ransac-inlier-threshold", ransac_inlier_threshold);
    sub->add_option("--ransac-min-inlier-fraction", ransac_min_inlier_fraction);
    sub->add_option("--bm-anchor-fraction", bm_anchor_fraction);
    sub->add_option("--resize-w", resize_w, "width after resizing");
    sub->add_option("--resize-d", resize_d, "depth after resizing, before the half-depth crop");
    if (!training) return;
    sub->add_option("--epochs", max_epochs, "maximum epochs");
    sub->add_option("--patience", patience, "early stopping patience");
    sub->add_option("--folds", folds, "cross-validation folds");
    sub->add_option("--threads", threads, "folds trained concurrently (default RETINET_THREADS)");
  }

  /// Config file, then flags; everything is validated before returning.
  Settings resolve() const {
    Settings s = load_settings(config_path);
    if (!manifest.empty()) s.manifest = manifest;
    if (!out.empty()) s.out = out;
    if (seed) s.train.rng_seed = s.preprocess.rng_seed = *seed;
    auto& p = s.preprocess;
    if (kappa) p.kappa = *kappa;
    if (diffusion_iterations) p.diffusion_iterations = *diffusion_iterations;
    if (diffusion_step) p.diffusion_step = *diffusion_step;
    if (dog_sigma_fine) p.dog_sigma_fine = *dog_sigma_fine;
    if (dog_sigma_coarse) p.dog_sigma_coarse = *dog_sigma_coarse;
    if (ransac_iterations) p.ransac_iterations = *ransac_iterations;
    if (ransac_inlier_threshold) p.ransac_inlier_threshold = *ransac_inlier_threshold;
    if (ransac_min_inlier_fraction) p.ransac_min_inlier_fraction = *ransac_min_inlier_fraction;
    if (bm_anchor_fraction) p.bm_anchor_fraction = *bm_anchor_fraction;
    if (resize_w) p.resize_w = *resize_w;
    if (resize_d) p.resize_d = *resize_d;
    if (max_epochs) s.train.max_epochs = *max_epochs;
    if (patience) s.train.patience = *patience;
    if (folds) s.train.folds = *folds;
    if (s.manifest.empty()) throw UsageError("--manifest is required");
    if (s.out.empty()) throw UsageError("--out is required");
    s.preprocess.validate();
    s.train.validate();
    return s;
  }
};

int gen_synthetic(const std::string& out, int n_control, int n_amd, std::uint64_t seed, const PhantomSpec& base) {
  if (n_control < 0 || n_amd < 0 || n_control + n_amd == 0) throw ConfigError("n-control and n-amd must give at least one volume");
  base.validate();
  fs::create_directories(out);
  DatasetManifest manifest;
  manifest.seed = seed;
  int index = 0;
  for (const auto label : {ClassLabel::Control, ClassLabel::Amd}) {
    const int n = label == ClassLabel::Control ? n_control : n_amd;
    for (int i = 0; i < n; ++i, ++index) {
      PhantomSpec spec = base;
      spec.label = label;
      Volume v = generate_phantom(spec, derive_seed(seed, 1000 + static_cast<std::uint64_t>(index))).volume;
      v.set_laterality(index % 2 ? Laterality::Right : Laterality::Left);
      char id[16];
      std::snprintf(id, sizeof id, "%s%03d", label == ClassLabel::Amd ? "amd" : "ctl", i);
      const fs::path path = fs::path(out) / (std::string(id) + ".octv");
      save_volume(v, path);
      manifest.entries.push_back({id, path, v.label(), v.laterality()});
    }
  }
  save_manifest(manifest, fs::path(out) / "manifest.json");
  std::cerr << "wrote " << manifest.entries.size() << " volumes to " << out << '\n';
  return 0;
}

int preprocess(const Settings& s) {
  const DatasetManifest in = load_manifest(s.manifest);
  fs::create_directories(s.out);
  DatasetManifest out;
  out.seed = in.seed;
  for (Volume& v : load_volumes(in)) {
    const fs::path path = fs::path(s.out) / (v.id() + ".octv");
    const Volume p = preprocess_volume(v, s.preprocess);
    save_volume(p, path);
    out.entries.push_back({v.id(), path, p.label(), p.laterality()});
    std::cerr << "preprocessed " << v.id() << '\n';
  }
  save_manifest(out, fs::path(s.out) / "manifest.json");
  return 0;
}

std::vector<Volume> prepared_volumes(const Settings& s) {
  std::vector<Volume> volumes = load_volumes(load_manifest(s.manifest));
  for (auto& v : volumes) {
    Volume p = preprocess_volume(v, s.preprocess);
    p.set_id(v.id());
    v = std::move(p);
  }
  return volumes;
}

int train(const Settings& s, const std::string& stage, const std::string& b_weights, int fold) {
  if (stage == "c" && b_weights.empty()) throw UsageError("--b-weights is required for --stage c");
  if (stage != "c" && !b_weights.empty()) throw UsageError("--b-weights only applies to --stage c");

  std::optional<Network> b;
  if (!b_weights.empty()) {
    ModelInfo info;
    b = load_model(b_weights, &info);
    if (info.kind != "retinet_b") throw DataError(b_weights + " is not a stage-B model");
    if (config_hash(info.preprocess) != config_hash(s.preprocess))
      throw ConfigError("preprocess: config differs from the one the stage-B model was trained with");
  }

  const std::vector<Volume> volumes = prepared_volumes(s);
  const FoldSplit split = fold_split(volumes, s.train, fold);
  TrainConfig config = s.train;
  config.rng_seed ^= static_cast<std::uint64_t>(std::max(fold, 0));  // as in cross_validate
  fs::create_directories(s.out);

  nlohmann::json log = {{"fold", fold}, {"train_ids", split.train_ids}, {"val_ids", split.val_ids},
                        {"test_ids", split.test_ids}, {"config", {{"preprocess", s.preprocess}, {"train", s.train}}}};
  if (stage != "c") {
    TrainingResult r = fit_stage_b(split.train, split.val, config, &std::cerr);
    save_model(r.network, {"retinet_b", s.preprocess, config.rng_seed}, fs::path(s.out) / "retinet_b.rntw");
    log["stage_b"] = trace_json(r);
    b = std::move(r.network);
  }
  if (stage != "b") {
    TrainingResult r = fit_stage_c(split.train, split.val, *b, config, &std::cerr);
    save_model(r.network, {"retinet_c", s.preprocess, config.rng_seed}, fs::path(s.out) / "retinet_c.rntw");
    log["stage_c"] = trace_json(r);
  }
  write_json(log, fs::path(s.out) / "training.json");
  return 0;
}

int evaluate(const Settings& s, int threads) {
  const EvalReport report =
      cross_validate(load_manifest(s.manifest), s.preprocess, s.train, {threads, &std::cerr});
  serialize_report(report, s.out);
  std::printf("mean AUC %.4f (sd %.4f), B Extreme %.4f (sd %.4f)\n", report.mean_auc, report.sd_auc,
              report.baseline_mean_auc, report.baseline_sd_auc);
  return 0;
}

int predict(const std::string& model_path, const std::string& volume_path, const std::string& map_path) {
  ModelInfo info;
  const Network net = load_model(model_path, &info);
  const Volume raw = load_volume(volume_path);
  Volume v = preprocess_volume(raw, info.preprocess);
  v.set_id(raw.id());
  nlohmann::json out = {{"id", v.id()}, {"model", info.kind}};
  if (info.kind == "retinet_c") {
    const auto p = predict_volume_probabilities(net, v);
    out["p_control"] = p[0];
    out["p_amd"] = p[1];
  } else {
    out["p_amd"] = predict_bscan_mean(net, v);
  }
  if (!map_path.empty()) {
    if (info.kind != "retinet_c") throw UsageError("--map needs a stage-C model");
    const Image<float> map = export_activation_map(net, v);
    std::ofstream csv(map_path);
    for (Eigen::Index h = 0; h < map.rows(); ++h)
      for (Eigen::Index w = 0; w < map.cols(); ++w) csv << map(h, w) << (w + 1 < map.cols() ? ',' : '\n');
    if (!csv) throw DataError("cannot write " + map_path);
  }
  std::cout << out.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Training allocates and frees large buffers every batch; keep them mapped.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"RetiNet OCT volume classification"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-synthetic", "write labelled phantom volumes and a manifest");
  std::string gen_out;
  int n_control = 40, n_amd = 40;
  std::uint64_t gen_seed = 0;
  PhantomSpec spec;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n-control", n_control, "control volumes")->capture_default_str();
  gen->add_option("--n-amd", n_amd, "AMD volumes")->capture_default_str();
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen->add_option("--width", spec.width, "A-scans per B-scan")->capture_default_str();
  gen->add_option("--bscans", spec.bscan_count, "B-scans per volume")->capture_default_str();
  gen->add_option("--depth", spec.depth, "pixels per A-scan")->capture_default_str();

  auto* pre = app.add_subcommand("preprocess", "flatten, normalise and crop every volume of a manifest");
  Common pre_opts;
  pre_opts.add_to(pre, false);

  auto* tr = app.add_subcommand("train", "train stage B, stage C or both");
  Common tr_opts;
  tr_opts.add_to(tr, true);
  std::string stage = "both", b_weights;
  int fold = -1;
  tr->add_option("--stage", stage, "b, c or both")->check(CLI::IsMember({"b", "c", "both"}))->capture_default_str();
  tr->add_option("--b-weights", b_weights, "stage-B model for --stage c");
  tr->add_option("--fold", fold, "hold out this fold (default: train on every volume)");

  auto* ev = app.add_subcommand("evaluate", "cross-validate and write report.json plus per-fold ROC CSVs");
  Common ev_opts;
  ev_opts.add_to(ev, true);

  auto* pr = app.add_subcommand("predict", "score one raw volume with a saved model");
  std::string model_path, volume_path, map_path;
  pr->add_option("--model", model_path, "model weights")->required();
  pr->add_option("--volume", volume_path, "OCTV volume")->required();
  pr->add_option("--map", map_path, "write the activation map as CSV");

  auto* pl = app.add_subcommand("plot", "render ROC and FNR-FPR curves of a report as SVG");
  std::string report_dir, svg_path;
  pl->add_option("--report", report_dir, "directory holding report.json")->required();
  pl->add_option("--out", svg_path, "SVG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return gen_synthetic(gen_out, n_control, n_amd, gen_seed, spec);
    if (pre->parsed()) return preprocess(pre_opts.resolve());
    if (tr->parsed()) {
      if (fold < -1) throw UsageError("--fold must be a fold index");
      return train(tr_opts.resolve(), stage, b_weights, fold);
    }
    if (ev->parsed()) {
      const Settings s = ev_opts.resolve();
      return evaluate(s, ev_opts.threads.value_or(default_threads()));
    }
    if (pr->parsed()) return predict(model_path, volume_path, map_path);
    if (pl->parsed()) {
      plot_curves(report_dir, svg_path);
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    // ConfigError, DataError, file system and JSON errors: the data or config is at fault
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
