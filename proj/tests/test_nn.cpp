#include "nn_check.hpp"
#include "retinet/nn/weights.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <fstream>

using namespace retinet;
using namespace retinet::nn;
using retinet::test::random_tensor;

namespace {

Network<double> small_net(std::mt19937_64& rng) {
  Network<double> net({2, 8, 8});
  net.add(conv2d("feature.c1", Block::Feature, 3, 2, 4))
      .add(leaky_relu("feature.a1", Block::Feature))
      .add(max_pool("feature.p1", Block::Feature, 2, 2))
      .add(flatten("classification.flat", Block::Classification))
      .add(dense("classification.fc", Block::Classification, 64, 2))
      .add(softmax("classification.prob", Block::Classification));
  glorot_initialize(net, rng);
  return net;
}

template <typename Net>
std::vector<Tensor<typename Net::Scalar>> snapshot(const Net& net, Block b) {
  std::vector<Tensor<typename Net::Scalar>> out;
  for (Index i = 0; i < net.layer_count(); ++i)
    if (net.layer(i).block == b)
      for (const auto& p : net.parameters(i)) out.push_back(p.value);
  return out;
}

void train_steps(Network<double>& net, int steps, std::mt19937_64& rng) {
  AdadeltaState<double> opt(net);
  const int labels[] = {0, 1, 1};
  for (int s = 0; s < steps; ++s) {
    const auto acts = forward(net, random_tensor({3, 2, 8, 8}, rng), Mode::Train);
    const auto ce = cross_entropy(acts.output(), labels);
    adadelta_step(net, backward(net, acts, ce.logit_gradient), opt);
  }
}

}  // namespace

TEST_CASE("glorot_init") {
  std::mt19937_64 rng(1);
  SUBCASE("fan 3+3 stays within [-1, 1]") {
    const auto t = glorot_init<double>({1000}, 3, 3, rng);
    CHECK(t.values().abs().maxCoeff() <= 1.0);
  }
  SUBCASE("moments of 1e5 samples match U(-1, 1)") {
    const auto t = glorot_init<double>({100000}, 2, 4, rng);
    const double mean = t.values().mean();
    const double var = (t.values() - mean).square().mean();
    CHECK(std::abs(mean) <= 0.01);
    CHECK(std::abs(var - 1.0 / 3.0) <= 0.05 / 3.0);
  }
  SUBCASE("same seed, same tensor") {
    std::mt19937_64 a(9), b(9);
    CHECK(glorot_init<float>({4, 5}, 4, 5, a) == glorot_init<float>({4, 5}, 4, 5, b));
  }
  CHECK_THROWS_AS(glorot_init<double>({2}, 0, 3, rng), ConfigError);
}

TEST_CASE("forward semantics") {
  std::mt19937_64 rng(2);
  SUBCASE("softmax of (0, 0) is (0.5, 0.5)") {
    Network<double> net({2, 1, 1});
    net.add(softmax("p", Block::Classification));
    const auto y = forward(net, Tensor<double>({1, 2, 1, 1}), Mode::Infer).output();
    CHECK(y[0] == 0.5);
    CHECK(y[1] == 0.5);
  }
  SUBCASE("softmax rows sum to one and stay inside (0, 1)") {
    Network<double> net({7, 1, 1});
    net.add(softmax("p", Block::Classification));
    for (int t = 0; t < 50; ++t) {
      const auto y = forward(net, random_tensor({4, 7, 1, 1}, rng, 5.0), Mode::Infer).output();
      for (Index n = 0; n < 4; ++n) CHECK(std::abs(y.rows().row(n).sum() - 1.0) <= 1e-9);
      CHECK((y.values() > 0).all());
      CHECK((y.values() < 1).all());
    }
  }
  SUBCASE("1x1 identity convolution is the identity") {
    Network<float> net({3, 5, 4});
    net.add(conv2d("c", Block::Feature, 1, 3, 3));
    auto& w = net.parameter("c.weight");
    for (Index c = 0; c < 3; ++c) w[c * 3 + c] = 1.0f;
    Tensor<float> x = random_tensor({2, 3, 5, 4}, rng).cast<float>();
    CHECK(forward(net, x, Mode::Infer).output() == x);
  }
  SUBCASE("random 3-layer nets match the nested-loop evaluator") {
    for (int t = 0; t < 10; ++t) {
      Network<double> net({2, 9, 7});
      net.add(conv2d("c1", Block::Feature, 3, 2, 3))
          .add(leaky_relu("a1", Block::Feature))
          .add(max_pool("p1", Block::Feature, 2, 2))
          .add(conv2d("c2", Block::Adapt, 1, 3, 4))
          .add(batch_norm("bn", Block::Adapt, 4))
          .add(avg_pool("p2", Block::Adapt, 2, 1))
          .add(flatten("f", Block::Classification))
          .add(dense("fc", Block::Classification, 4 * 2 * 3, 3))
          .add(softmax("s", Block::Classification));
      test::randomize(net, rng);
      const auto x = random_tensor({3, 2, 9, 7}, rng);
      for (Mode mode : {Mode::Train, Mode::Infer}) {
        const auto fast = forward(net, x, mode).output();
        const auto slow = test::naive_forward(net, x, mode);
        REQUIRE(fast.shape() == slow.shape());
        CHECK((fast.values() - slow.values()).abs().maxCoeff() <= 1e-6);
      }
      Network<double> gap({3, 6, 5});
      gap.add(conv2d("c", Block::Adapt, 3, 3, 2)).add(global_avg_pool("g", Block::Adapt));
      test::randomize(gap, rng);
      const auto xg = random_tensor({2, 3, 6, 5}, rng);
      CHECK((forward(gap, xg, Mode::Infer).output().values() - test::naive_forward(gap, xg, Mode::Infer).values())
                .abs()
                .maxCoeff() <= 1e-6);
    }
  }
  SUBCASE("input shape is checked") {
    auto net = small_net(rng);
    CHECK_THROWS_WITH_AS(forward(net, Tensor<double>({1, 2, 8, 7}), Mode::Infer), doctest::Contains("shape mismatch"),
                         ConfigError);
  }
  SUBCASE("softmax must be last") {
    Network<double> net({2, 1, 1});
    net.add(softmax("s", Block::Classification));
    CHECK_THROWS_AS(net.add(flatten("f", Block::Classification)), ConfigError);
  }
}

TEST_CASE("batch norm in train mode standardises each channel") {
  std::mt19937_64 rng(3);
  Network<double> net({3, 4, 5});
  net.add(batch_norm("bn", Block::Adapt, 3));
  for (int t = 0; t < 20; ++t) {
    Tensor<double> x = random_tensor({2, 3, 4, 5}, rng, 3.0);
    x.values() += 7.0;
    const auto y = forward(net, x, Mode::Train).output();
    for (Index c = 0; c < 3; ++c) {
      double s = 0, ss = 0;
      for (Index n = 0; n < 2; ++n)
        for (Index k = 0; k < 20; ++k) s += y(n, c, k / 5, k % 5);
      const double mean = s / 40;
      for (Index n = 0; n < 2; ++n)
        for (Index k = 0; k < 20; ++k) ss += std::pow(y(n, c, k / 5, k % 5) - mean, 2);
      CHECK(std::abs(mean) <= 1e-5);
      CHECK(std::abs(ss / 40 - 1.0) <= 1e-3);
    }
  }
  SUBCASE("running statistics move towards the batch statistics") {
    Tensor<double> x = random_tensor({4, 3, 4, 5}, rng);
    x.values() += 2.0;
    const auto acts = forward(net, x, Mode::Train);
    update_batch_norm_statistics(net, acts);
    const auto& mean = net.parameter("bn.running_mean");
    CHECK(mean[0] == doctest::Approx(0.01 * acts.caches[0].stats.mean[0]));
  }
}

TEST_CASE("cross entropy") {
  const int amd[] = {1};
  SUBCASE("one-hot prediction has zero loss") {
    Tensor<double> p({1, 2, 1, 1});
    p[1] = 1.0;
    CHECK(cross_entropy(p, amd).loss == 0.0);
  }
  SUBCASE("uniform prediction costs ln 2") {
    Tensor<double> p({1, 2, 1, 1}, 0.5);
    CHECK(cross_entropy(p, amd).loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  }
  SUBCASE("zero probability is clamped") {
    Tensor<double> p({1, 2, 1, 1});
    p[0] = 1.0;
    CHECK(cross_entropy(p, amd).loss == doctest::Approx(-std::log(1e-12)));
  }
  SUBCASE("logit gradient matches central differences") {
    std::mt19937_64 rng(4);
    Network<double> net({3, 1, 1});
    net.add(softmax("s", Block::Classification));
    for (int t = 0; t < 20; ++t) {
      const Tensor<double> z = random_tensor({4, 3, 1, 1}, rng, 2.0);
      std::vector<int> labels(4);
      for (auto& y : labels) y = std::uniform_int_distribution<int>(0, 2)(rng);
      const auto loss = [&](const Tensor<double>& logits) {
        return cross_entropy(forward(net, logits, Mode::Infer).output(), labels).loss;
      };
      const auto analytic = cross_entropy(forward(net, z, Mode::Infer).output(), labels).logit_gradient;
      Eigen::ArrayXd numeric(z.size());
      Tensor<double> w = z;
      for (Index k = 0; k < z.size(); ++k) {
        w[k] = z[k] + 1e-5;
        const double up = loss(w);
        w[k] = z[k] - 1e-5;
        numeric[k] = (up - loss(w)) / 2e-5;
        w[k] = z[k];
      }
      CHECK(test::relative_error(analytic.values(), numeric) <= 1e-4);
    }
  }
}

TEST_CASE("gradient suite: every layer kind against central differences") {
  std::mt19937_64 rng(5);
  for (auto& c : test::gradient_cases(30, rng)) {
    CAPTURE(c.label);
    const auto rep = test::check_gradients(c.net, c.input, rng);
    CAPTURE(rep.where);
    CHECK(rep.worst <= 1e-4);
  }
}

TEST_CASE("backward edge cases") {
  std::mt19937_64 rng(6);
  auto net = small_net(rng);
  const auto x = random_tensor({2, 2, 8, 8}, rng);
  SUBCASE("zero loss gradient gives zero gradients") {
    const auto acts = forward(net, x, Mode::Train);
    const auto g = backward(net, acts, Tensor<double>(acts.output().shape()));
    for (const auto& layer : g.layers)
      for (const auto& t : layer) CHECK((t.values() == 0).all());
  }
  SUBCASE("all blocks frozen gives zero gradients") {
    net.freeze(Block::Feature);
    net.freeze(Block::Classification);
    const auto acts = forward(net, x, Mode::Train);
    const auto g = backward(net, acts, random_tensor(acts.output().shape(), rng));
    for (const auto& layer : g.layers)
      for (const auto& t : layer) CHECK((t.values() == 0).all());
  }
  SUBCASE("backward needs a train-mode forward pass") {
    CHECK_THROWS_AS(backward(net, Activations<double>{}, Tensor<double>({2, 2, 1, 1})), ConfigError);
    const auto acts = forward(net, x, Mode::Infer);
    CHECK_THROWS_AS(backward(net, acts, Tensor<double>(acts.output().shape())), ConfigError);
  }
}

TEST_CASE("adadelta") {
  Network<double> net({1, 1, 1});
  net.add(dense("fc", Block::Classification, 1, 2));
  net.parameter("fc.weight")[0] = 0.3;
  AdadeltaState<double> opt(net, 0.95, 1e-6);
  Gradients<double> g(net);

  SUBCASE("zero gradient leaves parameters and decays accumulators") {
    opt.mean_sq_grad[0][0][0] = 2.0;
    opt.mean_sq_update[0][0][0] = 4.0;
    adadelta_step(net, g, opt);
    CHECK(net.parameter("fc.weight")[0] == 0.3);
    CHECK(opt.mean_sq_grad[0][0][0] == doctest::Approx(1.9));
    CHECK(opt.mean_sq_update[0][0][0] == doctest::Approx(3.8));
  }
  SUBCASE("first step with g = 1") {
    g.layers[0][0].values().setOnes();
    adadelta_step(net, g, opt);
    // -sqrt(1e-6) / sqrt(0.05 + 1e-6)
    CHECK(net.parameter("fc.weight")[0] - 0.3 == doctest::Approx(-4.47209e-3).epsilon(1e-5));
    CHECK(net.parameter("fc.weight")[1] - 0.0 == doctest::Approx(-4.47209e-3).epsilon(1e-5));
  }
  SUBCASE("equal gradient histories give identical updates") {
    std::mt19937_64 rng(7);
    net.parameter("fc.weight")[1] = 0.3;
    for (int s = 0; s < 20; ++s) {
      const double v = std::normal_distribution<double>()(rng);
      g.layers[0][0].values().setConstant(v);
      adadelta_step(net, g, opt);
      CHECK(net.parameter("fc.weight")[0] == net.parameter("fc.weight")[1]);
    }
  }
}

TEST_CASE("freezing") {
  std::mt19937_64 rng(8);
  auto net = small_net(rng);
  SUBCASE("frozen CLASSIFICATION stays bitwise constant while FEATURE trains") {
    net.freeze(Block::Classification);
    const auto cls = snapshot(net, Block::Classification);
    const auto feat = snapshot(net, Block::Feature);
    train_steps(net, 10, rng);
    CHECK(snapshot(net, Block::Classification) == cls);
    CHECK(snapshot(net, Block::Feature) != feat);

    net.unfreeze(Block::Classification);
    train_steps(net, 2, rng);
    CHECK(snapshot(net, Block::Classification) != cls);
  }
  SUBCASE("unknown block") {
    CHECK_THROWS_AS(net.freeze(Block::Adapt), ConfigError);
  }
}

TEST_CASE("transfer_block") {
  std::mt19937_64 rng(9);
  auto src = small_net(rng);
  auto dst = small_net(rng);
  REQUIRE(snapshot(src, Block::Feature) != snapshot(dst, Block::Feature));
  const auto cls = snapshot(dst, Block::Classification);
  transfer_block(src, dst, Block::Feature);
  CHECK(snapshot(dst, Block::Feature) == snapshot(src, Block::Feature));
  CHECK(snapshot(dst, Block::Classification) == cls);

  const auto x = random_tensor({1, 2, 8, 8}, rng);
  const auto end = src.block_range(Block::Feature).second;
  const auto a = forward(src, x, Mode::Infer, 0, end).output();
  const auto b = forward(dst, x, Mode::Infer, 0, end).output();
  CHECK((a.values() - b.values()).abs().maxCoeff() <= 1e-6);

  Network<double> wide({2, 8, 8});
  wide.add(conv2d("feature.c1", Block::Feature, 3, 2, 5));
  CHECK_THROWS_WITH_AS(transfer_block(src, wide, Block::Feature), doctest::Contains("shape mismatch"), ConfigError);
  CHECK_THROWS_WITH_AS(transfer_block(src, wide, Block::Adapt), doctest::Contains("missing block"), ConfigError);
}

TEST_CASE("weights files") {
  test::TempDir dir("weights");
  std::mt19937_64 rng(10);
  Network<float> net({2, 8, 8});
  net.add(conv2d("feature.c1", Block::Feature, 3, 2, 4))
      .add(batch_norm("adapt.bn", Block::Adapt, 4))
      .add(global_avg_pool("adapt.gap", Block::Adapt))
      .add(dense("classification.fc", Block::Classification, 4, 2))
      .add(softmax("classification.prob", Block::Classification));
  glorot_initialize(net, rng);
  net.parameter("adapt.bn.running_var")[2] = 3.5f;
  save_weights(net, dir / "w.rntw");

  SUBCASE("round trip restores parameters and predictions") {
    Network<float> copy = net;
    for (Index i = 0; i < copy.layer_count(); ++i)
      for (auto& p : copy.parameters(i)) p.value.set_zero();
    load_weights(dir / "w.rntw", copy);
    for (const auto& name : net.parameter_names()) CHECK(copy.parameter(name) == net.parameter(name));
    const auto x = random_tensor({2, 2, 8, 8}, rng).cast<float>();
    CHECK(forward(copy, x, Mode::Infer).output() == forward(net, x, Mode::Infer).output());
  }
  SUBCASE("different architecture") {
    Network<float> other({2, 8, 8});
    other.add(conv2d("feature.c1", Block::Feature, 5, 2, 4))
        .add(batch_norm("adapt.bn", Block::Adapt, 4))
        .add(global_avg_pool("adapt.gap", Block::Adapt))
        .add(dense("classification.fc", Block::Classification, 4, 2))
        .add(softmax("classification.prob", Block::Classification));
    CHECK_THROWS_WITH_AS(load_weights(dir / "w.rntw", other), doctest::Contains("shape mismatch"), DataError);
    Network<float> fewer({2, 8, 8});
    fewer.add(conv2d("feature.c1", Block::Feature, 3, 2, 4));
    CHECK_THROWS_WITH_AS(load_weights(dir / "w.rntw", fewer), doctest::Contains("shape mismatch"), DataError);
  }
  SUBCASE("version 99") {
    std::fstream f(dir / "w.rntw", std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(4);
    const std::uint32_t v = 99;
    f.write(reinterpret_cast<const char*>(&v), 4);
    f.close();
    CHECK_THROWS_WITH_AS(load_weights(dir / "w.rntw", net), doctest::Contains("unsupported version"), DataError);
  }
  SUBCASE("bad magic") {
    std::ofstream(dir / "x.rntw", std::ios::binary) << "XXXX";
    CHECK_THROWS_WITH_AS(load_weights(dir / "x.rntw", net), doctest::Contains("bad magic"), DataError);
  }
}
