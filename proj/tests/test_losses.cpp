#include <cmath>
#include <random>

#include "doctest.h"
#include "fvae/layers.hpp"
#include "fvae/losses.hpp"
#include "test_util.hpp"

using namespace fvae;
using fvae::testing::leaf_gradcheck;
using fvae::testing::random_tensor;

TEST_SUITE("losses") {

TEST_CASE("reconstruction_loss") {
  std::mt19937_64 rng(1);
  const Tensor x = fvae::testing::random_tensor_f(Shape{2, 1, 3, 3}, rng);
  CHECK(reconstruction_loss(x, x) == 0.0f);
  CHECK(reconstruction_loss(Tensor(Shape{1, 2, 2}, 1.0f), Tensor(Shape{1, 2, 2}, 0.0f)) == 4.0f);

  const auto a = random_tensor(Shape{3, 2, 4, 5}, rng);
  const auto b = random_tensor(Shape{3, 2, 4, 5}, rng);
  double oracle = 0;
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t q = 0; q < 5; ++q) oracle += std::pow(a.at(n, c, y, q) - b.at(n, c, y, q), 2);
  oracle /= 3.0;
  CHECK(std::abs(reconstruction_loss(a.cast<float>(), b.cast<float>()) - oracle) < 1e-6 * std::max(1.0, oracle));
  CHECK_THROWS_AS(reconstruction_loss(Tensor(Shape{1, 2, 2}), Tensor(Shape{1, 2, 3})), std::invalid_argument);
}

TEST_CASE("prior_loss") {
  CHECK(prior_loss(Tensor(Shape{4}), Tensor(Shape{4})) == 0.0f);
  CHECK(prior_loss(Tensor(Shape{1}, 1.0f), Tensor(Shape{1}, 0.0f)) == doctest::Approx(1.0));
  const float lv = std::log(0.25f);
  CHECK(prior_loss(Tensor(Shape{1}, 0.5f), Tensor(Shape{1}, lv)) == doctest::Approx(0.886294).epsilon(1e-6));
}

TEST_CASE("prior_loss is non-negative") {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const auto mu = random_tensor(Shape{2, 3, 2, 2}, rng, -3, 3);
    const auto lv = random_tensor(Shape{2, 3, 2, 2}, rng, -4, 4);
    CHECK(prior_loss(mu, lv) >= 0.0);
  }
}

TEST_CASE("flow_coherence_loss reference values") {
  LossWeights w;
  w.alpha = 1.0f;
  SUBCASE("constant field") {
    Tensor c(Shape{5, 6, 2});
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = i % 2 ? 0.3f : -0.8f;
    std::mt19937_64 rng(3);
    CHECK(flow_coherence_loss(FlowField(c), fvae::testing::random_tensor_f(Shape{1, 5, 6}, rng), w) == 0.0f);
  }
  SUBCASE("single pixel has no neighbors") {
    CHECK(flow_coherence_loss(FlowField(Tensor(Shape{1, 1, 2}, 0.4f)), Tensor(Shape{3, 1, 1}), w) == 0.0f);
  }
  SUBCASE("1x2 pair counted in both directions") {
    Tensor c(Shape{1, 2, 2}, std::vector<float>{0, 0, 1, 0});
    const float v = flow_coherence_loss(FlowField(c), Tensor(Shape{1, 1, 2}, 0.2f), w);
    CHECK(std::abs(v - 2.0 * std::exp(-1.0)) < 1e-6);
    CHECK(std::abs(v - 0.735759) < 1e-6);
  }
}

TEST_CASE("flow_coherence_loss properties") {
  std::mt19937_64 rng(4);
  LossWeights w;
  for (int trial = 0; trial < 10; ++trial) {
    const auto flows = random_tensor(Shape{2, 2, 6, 5}, rng);
    const auto target = random_tensor(Shape{2, 3, 6, 5}, rng);
    auto shifted = flows;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 30; ++i) {
        shifted[(n * 2 + 0) * 30 + i] += 0.37;
        shifted[(n * 2 + 1) * 30 + i] -= 1.1;
      }
    CHECK(flow_coherence_loss(shifted, target, w) == doctest::Approx(flow_coherence_loss(flows, target, w)).epsilon(1e-12));
    LossWeights sharper = w;
    sharper.alpha = w.alpha * 2.0f;
    CHECK(flow_coherence_loss(flows, target, sharper) < flow_coherence_loss(flows, target, w));
    CHECK(flow_coherence_loss(flows, target, w) >= 0.0);
  }
}

TEST_CASE("total_loss") {
  LossWeights w;
  CHECK(total_loss(1, 0, 0, w) == 1.0);
  CHECK(total_loss(0, 1, 1, w) == doctest::Approx(0.004).epsilon(1e-6));
  LossWeights custom;
  custom.lambda_prior = 0.1f;
  custom.lambda_flow = 0.2f;
  CHECK(total_loss(2, 3, 5, custom) == doctest::Approx(3.3).epsilon(1e-6));
  try {
    total_loss(1, NAN, 0, w);
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("prior") != std::string::npos);
  }
}

TEST_CASE("soft_confidence_label") {
  std::mt19937_64 rng(5);
  const Tensor t = fvae::testing::random_tensor_f(Shape{2, 3, 4, 4}, rng);
  const Tensor perfect = soft_confidence_label(t, t, 0.1f);
  CHECK(perfect.shape() == Shape{2, 1, 4, 4});
  for (float v : perfect.data()) CHECK(v == 1.0f);

  // two channels each off by sqrt(beta / 2): squared residual equals beta
  const float beta = 0.1f;
  Tensor a(Shape{2, 1, 1}, 0.0f);
  Tensor b(Shape{2, 1, 1}, std::sqrt(beta / 2));
  CHECK(soft_confidence_label(a, b, beta)[0] == doctest::Approx(0.367879).epsilon(1e-5));

  float previous = 2.0f;
  for (float r : {0.0f, 0.1f, 0.5f, 1.0f, 3.0f, 30.0f}) {
    const float y = soft_confidence_label(Tensor(Shape{1, 1, 1}, 0.0f), Tensor(Shape{1, 1, 1}, r), beta)[0];
    CHECK(y < previous);
    CHECK(y >= 0.0f);
    previous = y;
  }
  CHECK(previous < 1e-30f);
}

TEST_CASE("mask_cross_entropy") {
  CHECK(mask_cross_entropy(Tensor(Shape{1}, 1.0f), Tensor(Shape{1}, 1.0f)) < 1e-6f);
  CHECK(mask_cross_entropy(Tensor(Shape{1}, 0.5f), Tensor(Shape{1}, 0.5f)) == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(mask_cross_entropy(Tensor(Shape{1}, 1.0f), Tensor(Shape{1}, 0.5f)) == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(std::isfinite(mask_cross_entropy(Tensor(Shape{1}, 1.0f), Tensor(Shape{1}, 0.0f))));
}

TEST_CASE("mask_cross_entropy is minimized at M = y") {
  for (double y : {0.1, 0.3, 0.5, 0.77, 0.9}) {
    double best_m = 0, best = 1e300;
    for (int k = 1; k < 1000; ++k) {
      const double m = k / 1000.0;
      const double v = mask_cross_entropy(BasicTensor<double>(Shape{1}, y), BasicTensor<double>(Shape{1}, m));
      if (v < best) {
        best = v;
        best_m = m;
      }
    }
    CHECK(std::abs(best_m - y) <= 1e-3 + 1e-12);
  }
}

TEST_CASE("loss gradients match finite differences") {
  std::mt19937_64 rng(6);
  LossWeights w;
  for (int trial = 0; trial < 3; ++trial) {
    const auto target = random_tensor(Shape{2, 3, 5, 6}, rng);
    const auto warped = random_tensor(Shape{2, 3, 5, 6}, rng);
    const auto flows = random_tensor(Shape{2, 2, 5, 6}, rng);
    const auto mu = random_tensor(Shape{2, 4, 2, 2}, rng);
    const auto lv = random_tensor(Shape{2, 4, 2, 2}, rng);
    const auto label = random_tensor(Shape{2, 1, 5, 6}, rng, 0.0, 1.0);
    const auto mask = random_tensor(Shape{2, 1, 5, 6}, rng, 0.05, 0.95);
    CHECK(leaf_gradcheck([&](Graph<double>& g, Var v) { return nn::reconstruction_loss(g, target, v); }, warped) < 1e-5);
    CHECK(leaf_gradcheck([&](Graph<double>& g, Var v) { return nn::prior_loss(g, v, g.constant(lv)); }, mu) < 1e-5);
    CHECK(leaf_gradcheck([&](Graph<double>& g, Var v) { return nn::prior_loss(g, g.constant(mu), v); }, lv) < 1e-5);
    CHECK(leaf_gradcheck([&](Graph<double>& g, Var v) { return nn::flow_coherence_loss(g, v, target, w); }, flows) < 1e-5);
    CHECK(leaf_gradcheck([&](Graph<double>& g, Var v) { return nn::mask_cross_entropy(g, label, v); }, mask) < 1e-5);
    CHECK(leaf_gradcheck([&](Graph<double>& g, Var v) {
            return nn::total_loss(g, nn::reconstruction_loss(g, target, v), nn::prior_loss(g, g.constant(mu), g.constant(lv)),
                                  nn::flow_coherence_loss(g, g.constant(flows), target, w), w);
          }, warped) < 1e-5);
  }
}

TEST_CASE("graph losses agree with the plain forms") {
  std::mt19937_64 rng(8);
  const Tensor target = fvae::testing::random_tensor_f(Shape{2, 1, 4, 4}, rng);
  const Tensor flows = fvae::testing::random_tensor_f(Shape{2, 2, 4, 4}, rng);
  Graph<float> g;
  LossWeights w;
  CHECK(g.value(nn::flow_coherence_loss(g, g.constant(flows), target, w)).item() == flow_coherence_loss(flows, target, w));
  const Tensor warped = fvae::testing::random_tensor_f(Shape{2, 1, 4, 4}, rng);
  CHECK(g.value(nn::reconstruction_loss(g, target, g.constant(warped))).item() == reconstruction_loss(target, warped));
}

TEST_CASE("LossWeights validation") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.neighborhood_radius = 0;
  CHECK_THROWS(w.validate());
  w = LossWeights{};
  w.beta = 0.0f;
  CHECK_THROWS(w.validate());
  w = LossWeights{};
  w.lambda_prior = 0.0f;
  w.lambda_flow = 0.0f;
  CHECK_NOTHROW(w.validate());
  w.lambda_flow = -0.1f;
  CHECK_THROWS(w.validate());
}

}
