#include "retinet/model.hpp"
#include "retinet/nn/optim.hpp"
#include "retinet/phantom.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <random>

using namespace retinet;
using nn::Block;
using nn::Mode;

namespace {

Volume random_volume(const std::string& id, Index w, Index h, Index d, ClassLabel label, std::uint64_t seed) {
  Volume v(id, w, h, d, label);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g;
  for (auto& x : v.voxels()) x = g(rng);
  return v;
}

/// Toy volumes whose Amd members carry a bright blob in every B-scan.
Volume toy_volume(const std::string& id, ClassLabel label, std::uint64_t seed, Index h = 4) {
  Volume v = random_volume(id, 32, h, 32, label, seed);
  if (label == ClassLabel::Amd)
    for (Index b = 0; b < h; ++b)
      for (Index y = 12; y < 20; ++y)
        for (Index x = 10; x < 22; ++x) v(b, y, x) += 3.0f;
  return v;
}

std::vector<nn::Tensor<float>> block_values(const Network& net, Block b) {
  std::vector<nn::Tensor<float>> out;
  const auto [lo, hi] = net.block_range(b);
  for (Index i = lo; i < hi; ++i)
    for (const auto& p : net.parameters(i)) out.push_back(p.value);
  return out;
}

}  // namespace

TEST_CASE("build_retinet_b") {
  const Network net = build_retinet_b(64, 64, 3);
  SUBCASE("64x64 input gives a probability pair") {
    const auto x = image_tensor(random_volume("v", 64, 1, 64, ClassLabel::Control, 1).bscan(0));
    const auto p = nn::forward(net, x, Mode::Infer).output();
    REQUIRE(p.size() == 2);
    CHECK(p[0] + p[1] == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("parameter count matches the layer table") {
    // (k*k*in + 1)*out per conv, then Dense(64*8*8 -> 64) and Dense(64 -> 2)
    const Index feature = (25 * 1 + 1) * 16 + (9 * 16 + 1) * 16 + (9 * 16 + 1) * 32 + (9 * 32 + 1) * 32 +
                          (9 * 32 + 1) * 64 + (9 * 64 + 1) * 64 + (9 * 64 + 1) * 64;
    const Index head = (64 * 8 * 8 + 1) * 64 + (64 + 1) * 2;
    CHECK(net.parameter_count(Block::Feature) == feature);
    CHECK(net.parameter_count(Block::Classification) == head);
    CHECK(net.parameter_count() == 371314);
  }
  SUBCASE("seeded initialisation") {
    const Network again = build_retinet_b(64, 64, 3);
    for (const auto& name : net.parameter_names()) CHECK(again.parameter(name) == net.parameter(name));
    CHECK(build_retinet_b(64, 64, 4).parameter("feature.c1.weight") != net.parameter("feature.c1.weight"));
    CHECK(net.parameter("classification.d1.bias").values().abs().maxCoeff() == 0.0f);
  }
  CHECK_THROWS_AS(build_retinet_b(31, 64, 0), ConfigError);
  CHECK_THROWS_AS(build_retinet_b(64, 16, 0), ConfigError);
}

TEST_CASE("build_retinet_c") {
  const Network b = build_retinet_b(64, 64, 5);
  const Network c = build_retinet_c(b, 64, 16 * 64, 6);
  CHECK(c.is_frozen(Block::Feature));
  CHECK(block_values(c, Block::Feature) == block_values(b, Block::Feature));
  CHECK(c.has_block(Block::Adapt));
  Index adapt_convs = 0;
  for (const auto& l : c.layers()) adapt_convs += l.block == Block::Adapt && l.kind == nn::LayerKind::Conv2D;
  CHECK(adapt_convs == 5);

  const Volume v = random_volume("v", 64, 16, 64, ClassLabel::Amd, 2);
  const auto p = predict_volume_probabilities(c, v);
  CHECK(std::abs(p[0] + p[1] - 1.0) <= 1e-9);
  CHECK(predict_volume(c, v) == predict_volume(c, v));

  CHECK_THROWS_AS(build_retinet_c(b, 4, 64, 0), ConfigError);
  Network no_feature({1, 4, 4});
  no_feature.add(nn::flatten("f", Block::Classification));
  CHECK_THROWS_AS(build_retinet_c(no_feature, 64, 64, 0), ConfigError);
}

TEST_CASE("feature transfer: mosaic activations match B-scan activations away from seams") {
  const Network b = build_retinet_b(64, 64, 8);
  const Volume v = random_volume("v", 64, 4, 64, ClassLabel::Control, 9);
  const Network c = build_retinet_c(b, 64, 4 * 64, 10);
  const Index fe = feature_end(b);

  // C7 output row o reads input rows [8o - 23, 8o + 30]
  CHECK(feature_row_support(b, 3) == std::pair<Index, Index>{1, 54});
  const auto [lo, hi] = seam_free_rows(b, 64);
  CHECK(lo == 3);
  CHECK(hi == 5);

  const auto mosaic = nn::forward(c, image_tensor(build_mosaic(v).pixels), Mode::Infer, 0, fe).output();
  const Index rows = 64 / kFeatureStride;
  double worst = 0, seam = 0;
  for (Index h = 0; h < 4; ++h) {
    const auto single = nn::forward(b, image_tensor(v.bscan(h)), Mode::Infer, 0, fe).output();
    for (Index ch = 0; ch < single.channels(); ++ch)
      for (Index r = 0; r < rows; ++r)
        for (Index x = 0; x < single.width(); ++x) {
          const double d = std::abs(single(0, ch, r, x) - mosaic(0, ch, h * rows + r, x));
          if (r >= lo && r < hi)
            worst = std::max(worst, d);
          else
            seam = std::max(seam, d);
        }
  }
  CHECK(worst <= 1e-6);
  CHECK(seam > 1e-3);  // rows near seams do see the neighbouring B-scan
}

TEST_CASE("assign_weak_labels") {
  const Volume control = random_volume("c", 8, 16, 8, ClassLabel::Control, 1);
  const auto items = assign_weak_labels(control);
  REQUIRE(items.size() == 16);
  for (Index h = 0; h < 16; ++h) {
    const auto& it = items[static_cast<std::size_t>(h)];
    CHECK(it.weak_label == ClassLabel::Control);
    CHECK(it.index == h);
    CHECK(it.volume_id == "c");
    CHECK((it.image == control.bscan(h)).all());
  }
  for (const auto& it : assign_weak_labels(random_volume("a", 8, 5, 8, ClassLabel::Amd, 2)))
    CHECK(it.weak_label == ClassLabel::Amd);
  CHECK(assign_weak_labels(Volume("e", 8, 0, 8)).empty());
}

TEST_CASE("build_mosaic") {
  SUBCASE("H=2, D=3, w=2 layout") {
    Volume v("v", 2, 2, 3);
    for (Index h = 0; h < 2; ++h)
      for (Index d = 0; d < 3; ++d)
        for (Index w = 0; w < 2; ++w) v(h, d, w) = static_cast<float>(100 * h + 10 * d + w);
    const Mosaic m = build_mosaic(v);
    CHECK(m.width() == 2);
    CHECK(m.height() == 6);
    for (Index r = 0; r < 6; ++r)
      for (Index w = 0; w < 2; ++w) CHECK(m.pixels(r, w) == v(r / 3, r % 3, w));
  }
  SUBCASE("slices reproduce every B-scan bitwise") {
    const Volume v = random_volume("v", 7, 5, 6, ClassLabel::Amd, 3);
    const Mosaic m = build_mosaic(v);
    REQUIRE(m.bscan_count() == 5);
    for (Index h = 0; h < 5; ++h) CHECK((m.slice(h) == extract_bscan(v, h)).all());
    CHECK_THROWS_AS(m.slice(5), std::out_of_range);
  }
  SUBCASE("preprocessed 64x16x64 phantom gives a 64x512 mosaic") {
    PhantomSpec spec;
    spec.depth = 64;
    PreprocessConfig pre;
    pre.resize_w = 64;
    pre.resize_d = 64;
    const Volume v = preprocess_volume(generate_phantom(spec, 4).volume, pre);
    const Mosaic m = build_mosaic(v);
    CHECK(m.bscan_depth == 32);
    CHECK(m.width() == 64);
    CHECK(m.height() == 512);
  }
  SUBCASE("mirroring commutes with mosaic construction") {
    const Volume v = random_volume("v", 9, 3, 4, ClassLabel::Control, 5);
    CHECK((build_mosaic(flip_width(v)).pixels == build_mosaic(v).pixels.rowwise().reverse()).all());
  }
}

TEST_CASE("train_stage_b on a toy set") {
  std::vector<WeakLabeledBScan> train, val;
  for (int i = 0; i < 10; ++i)
    train.push_back(assign_weak_labels(toy_volume("t" + std::to_string(i), ClassLabel(i % 2), 100 + i, 1))[0]);
  for (int i = 0; i < 4; ++i)
    val.push_back(assign_weak_labels(toy_volume("v" + std::to_string(i), ClassLabel(i % 2), 200 + i, 1))[0]);
  TrainConfig config;
  config.max_epochs = 6;
  config.patience = 5;
  config.batch_size_b = 4;
  config.rng_seed = 11;
  const auto r = train_stage_b(train, val, config);
  REQUIRE(r.trace.size() >= 5);
  CHECK(r.trace[4].train_loss < r.trace[0].train_loss);
  CHECK(r.best_epoch >= 1);

  const Network init = build_retinet_b(32, 32, derive_seed(config.rng_seed, 1));
  CHECK(block_values(r.network, Block::Classification) == block_values(init, Block::Classification));
  CHECK(block_values(r.network, Block::Feature) != block_values(init, Block::Feature));

  CHECK_THROWS_AS(train_stage_b({}, val, config), ConfigError);
  CHECK_THROWS_AS(train_stage_b(train, {}, config), ConfigError);
}

TEST_CASE("train_stage_c on a toy set") {
  std::vector<LabeledMosaic> train, val;
  for (int i = 0; i < 8; ++i) train.push_back(labeled_mosaic(toy_volume("t" + std::to_string(i), ClassLabel(i % 2), 300 + i)));
  for (int i = 0; i < 4; ++i) val.push_back(labeled_mosaic(toy_volume("v" + std::to_string(i), ClassLabel(i % 2), 400 + i)));
  const Network source = build_retinet_b(32, 32, 12);
  TrainConfig config;
  config.max_epochs = 8;
  config.patience = 4;
  config.rng_seed = 13;

  const auto r = train_stage_c(train, val, source, config);
  CHECK(block_values(r.network, Block::Feature) == block_values(source, Block::Feature));

  // validation loss of the untrained network built the same way
  const Network init = build_retinet_c(source, 32, 128, derive_seed(config.rng_seed, 3));
  double initial = 0;
  for (const auto& m : val) {
    const auto probs = nn::forward(init, image_tensor(m.mosaic.pixels), Mode::Infer).output();
    const int y[] = {m.label == ClassLabel::Amd};
    initial += nn::cross_entropy(probs, y).loss / static_cast<double>(val.size());
  }
  const auto best = r.trace[static_cast<std::size_t>(r.best_epoch - 1)].val_loss;
  CHECK(best <= initial);

  const auto again = train_stage_c(train, val, source, config);
  for (const auto& name : r.network.parameter_names()) CHECK(again.network.parameter(name) == r.network.parameter(name));
  CHECK(again.best_epoch == r.best_epoch);

  CHECK_THROWS_AS(train_stage_c({}, val, source, config), ConfigError);
  std::vector<LabeledMosaic> odd = val;
  odd.push_back(labeled_mosaic(toy_volume("odd", ClassLabel::Amd, 5, 3)));
  CHECK_THROWS_AS(train_stage_c(train, odd, source, config), ConfigError);
}

TEST_CASE("predict_bscan_mean") {
  Network b = build_retinet_b(32, 32, 14);
  SUBCASE("a network with equal logits scores 0.5") {
    b.parameter("classification.d2.weight").set_zero();
    b.parameter("classification.d2.bias").set_zero();
    CHECK(predict_bscan_mean(b, random_volume("v", 32, 5, 32, ClassLabel::Amd, 1)) == 0.5);
  }
  SUBCASE("H=1 equals the single B-scan score") {
    const Volume v = random_volume("v", 32, 1, 32, ClassLabel::Amd, 2);
    const auto p = nn::forward(b, image_tensor(v.bscan(0)), Mode::Infer).output();
    CHECK(predict_bscan_mean(b, v) == doctest::Approx(p[1]).epsilon(1e-6));
    CHECK(predict_bscans(b, v).size() == 1);
  }
  SUBCASE("mean of the per-B-scan scores") {
    const Volume v = random_volume("v", 32, 3, 32, ClassLabel::Amd, 3);
    const auto s = predict_bscans(b, v);
    CHECK(predict_bscan_mean(b, v) == doctest::Approx((s[0] + s[1] + s[2]) / 3).epsilon(1e-15));
  }
  CHECK_THROWS_AS(predict_bscan_mean(b, Volume("e", 32, 0, 32)), DataError);
  CHECK_THROWS_AS(predict_bscan_mean(b, random_volume("v", 40, 2, 32, ClassLabel::Amd, 4)), ConfigError);
}

TEST_CASE("export_activation_map") {
  // 16 B-scans so that the last ADAPT convolution still has 4 rows
  const Network c = build_retinet_c(build_retinet_b(32, 32, 15), 32, 16 * 32, 16);
  const Image<float> map = export_activation_map(c, random_volume("v", 32, 16, 32, ClassLabel::Amd, 5));
  CHECK(map.rows() == 16);
  CHECK(map.cols() == 32);
  CHECK(map.minCoeff() == 0.0f);
  CHECK(map.maxCoeff() == 1.0f);
  CHECK((export_activation_map(c, random_volume("v", 32, 16, 32, ClassLabel::Amd, 5)) == map).all());

  // zero input: every activation is a spatial constant, so the map is too
  const Image<float> flat = export_activation_map(c, Volume("z", 32, 16, 32));
  CHECK((flat == 0.0f).all());
}

TEST_CASE("model files") {
  test::TempDir dir("model");
  const Network c = build_retinet_c(build_retinet_b(32, 32, 17), 32, 4 * 32, 18);
  ModelInfo info{"retinet_c", PreprocessConfig{}, 18};
  save_model(c, info, dir / "c.rntw");
  ModelInfo back;
  const Network loaded = load_model(dir / "c.rntw", &back);
  CHECK(back.kind == "retinet_c");
  CHECK(back.seed == 18);
  CHECK(loaded.is_frozen(Block::Feature));
  const Volume v = random_volume("v", 32, 4, 32, ClassLabel::Amd, 6);
  CHECK(predict_volume(loaded, v) == predict_volume(c, v));

  CHECK(config_hash(PreprocessConfig{}) == config_hash(PreprocessConfig{}));
  PreprocessConfig other;
  other.kappa = 49;
  CHECK(config_hash(other) != config_hash(PreprocessConfig{}));
  CHECK_THROWS_AS(load_model(dir / "missing.rntw"), DataError);
}

TEST_CASE("train config") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.patience = 100;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("patience"), ConfigError);
  const nlohmann::json j = TrainConfig{};
  CHECK(j.get<TrainConfig>().max_epochs == 100);
  CHECK_THROWS_WITH_AS(nlohmann::json({{"epochs", 3}}).get<TrainConfig>(), doctest::Contains("epochs"), ConfigError);
}
