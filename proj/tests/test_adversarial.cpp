#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "maad/adversarial.hpp"
#include "maad/gradcheck.hpp"
#include "maad/tensor.hpp"
#include "oracles.hpp"

using maad::DomainClassifier;
using maad::DomainClassifierConfig;
using maad::Shape;
using maad::SpatialAttention;
using maad::Tensor;
using oracles::stable_sigmoid;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = false,
                     double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<size_t>(maad::shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

TEST_CASE("grl schedule") {
  maad::GrlConfig constant;
  constant.lambda_p = 0.4;
  CHECK(constant.lambda_at(0.0) == 0.4);
  CHECK(constant.lambda_at(0.5) == 0.4);
  CHECK(constant.lambda_at(1.0) == 0.4);

  maad::GrlConfig ramp;
  ramp.schedule = maad::GrlConfig::Schedule::kDannRamp;
  auto expected = [](double p) { return 2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0; };
  CHECK(ramp.lambda_at(0.0) == 0.0);
  CHECK(std::fabs(ramp.lambda_at(0.5) - expected(0.5)) < 1e-15);
  CHECK(std::fabs(ramp.lambda_at(1.0) - expected(1.0)) < 1e-15);
  // progress clamps to [0,1]
  CHECK(ramp.lambda_at(-0.5) == ramp.lambda_at(0.0));
  CHECK(ramp.lambda_at(2.0) == ramp.lambda_at(1.0));
  for (double p : {0.1, 0.3, 0.9}) {
    CHECK(ramp.lambda_at(p) >= 0.0);
    CHECK(ramp.lambda_at(p) < 1.0);
  }
}

TEST_CASE("spatial attention") {
  SUBCASE("zero-initialized conv gives a uniform 0.5 map") {
    SpatialAttention att;  // weights default to zero
    std::mt19937_64 rng(101);
    Tensor f = random_tensor({2, 4, 5, 5}, rng);
    auto out = att.forward(f);
    REQUIRE(out.attention.shape() == Shape{2, 1, 5, 5});
    for (double m : out.attention.values()) CHECK(m == 0.5);
    REQUIRE(out.weighted.shape() == f.shape());
    for (size_t i = 0; i < f.values().size(); ++i) {
      CHECK(out.weighted.values()[i] == 0.5 * f.values()[i]);
    }
  }
  SUBCASE("attention entries stay strictly inside (0,1)") {
    SpatialAttention att;
    std::mt19937_64 rng(102);
    att.init(rng, 0.2);
    Tensor f = random_tensor({1, 8, 9, 9}, rng, false, -4.0, 4.0);
    auto out = att.forward(f);
    for (double m : out.attention.values()) {
      CHECK(m > 0.0);
      CHECK(m < 1.0);
    }
  }
  SUBCASE("matches a scalar pool-conv-sigmoid-hadamard reference") {
    SpatialAttention att;
    std::mt19937_64 rng(103);
    att.init(rng, 0.2);
    const int64_t N = 2, C = 5, H = 6, W = 7;
    Tensor f = random_tensor({N, C, H, W}, rng);
    auto out = att.forward(f);

    const auto& fv = f.values();
    const auto& wv = att.conv.weight.values();  // (1,2,7,7)
    const double b = att.conv.bias.values()[0];
    for (int64_t n = 0; n < N; ++n) {
      // channel pools
      std::vector<double> pool(static_cast<size_t>(2 * H * W));
      for (int64_t y = 0; y < H; ++y) {
        for (int64_t x = 0; x < W; ++x) {
          double s = 0.0, mx = fv[static_cast<size_t>(((n * C) * H + y) * W + x)];
          for (int64_t c = 0; c < C; ++c) {
            const double v = fv[static_cast<size_t>(((n * C + c) * H + y) * W + x)];
            s += v;
            if (v > mx) mx = v;
          }
          pool[static_cast<size_t>(y * W + x)] = s / static_cast<double>(C);
          pool[static_cast<size_t>(H * W + y * W + x)] = mx;
        }
      }
      for (int64_t y = 0; y < H; ++y) {
        for (int64_t x = 0; x < W; ++x) {
          double acc = 0.0;
          for (int64_t c = 0; c < 2; ++c) {
            for (int64_t ky = 0; ky < 7; ++ky) {
              for (int64_t kx = 0; kx < 7; ++kx) {
                const int64_t iy = y - 3 + ky;
                const int64_t ix = x - 3 + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += pool[static_cast<size_t>(c * H * W + iy * W + ix)] *
                       wv[static_cast<size_t>((c * 7 + ky) * 7 + kx)];
              }
            }
          }
          const double m = stable_sigmoid(acc + b);
          const size_t mi = static_cast<size_t>((n * H + y) * W + x);
          CHECK(std::fabs(out.attention.values()[mi] - m) <= 1e-12);
          for (int64_t c = 0; c < C; ++c) {
            const size_t fi = static_cast<size_t>(((n * C + c) * H + y) * W + x);
            CHECK(std::fabs(out.weighted.values()[fi] - m * fv[fi]) <= 1e-12);
          }
        }
      }
    }
  }
  SUBCASE("parameter names") {
    SpatialAttention att;
    std::vector<maad::NamedParam> params;
    att.collect("att", params);
    REQUIRE(params.size() == 2);
    CHECK(params[0].name == "att.conv.weight");
    CHECK(params[1].name == "att.conv.bias");
  }
}

TEST_CASE("domain classifier config validation") {
  DomainClassifierConfig bad_last;
  bad_last.filters = {8, 16, 32, 4};
  CHECK_THROWS_AS(bad_last.validate(), std::invalid_argument);
  DomainClassifierConfig bad_count;
  bad_count.filters = {8, 16, 1};
  CHECK_THROWS_AS(bad_count.validate(), std::invalid_argument);
  DomainClassifierConfig bad_alpha;
  bad_alpha.leaky_relu_alpha = 1.5;
  CHECK_THROWS_AS(bad_alpha.validate(), std::invalid_argument);
}

TEST_CASE("high-level domain classifier") {
  SUBCASE("default plan maps 16x16 to a 4x4 logit grid") {
    DomainClassifier clf(64, DomainClassifierConfig{});
    std::mt19937_64 rng(111);
    clf.init(rng);
    Tensor x = random_tensor({2, 64, 16, 16}, rng, false, -1.0, 1.0);
    Tensor logits = clf.forward(x, false);
    CHECK(logits.shape() == Shape{2, 1, 4, 4});
  }
  SUBCASE("small config shape plan and zero init") {
    DomainClassifierConfig cfg;
    cfg.filters = {8, 12, 16, 1};
    DomainClassifier clf(6, cfg);  // zero weights until init
    std::mt19937_64 rng(112);
    Tensor x = random_tensor({1, 6, 12, 12}, rng);
    Tensor logits = clf.forward(x, false);
    CHECK(logits.shape() == Shape{1, 1, 3, 3});
    for (double v : logits.values()) CHECK(v == 0.0);  // logits == zero bias
  }
  SUBCASE("input below 4x4 is rejected") {
    DomainClassifierConfig cfg;
    cfg.filters = {4, 4, 4, 1};
    DomainClassifier clf(3, cfg);
    std::mt19937_64 rng(113);
    Tensor x = random_tensor({1, 3, 3, 5}, rng);
    CHECK_THROWS_AS(clf.forward(x, false), std::invalid_argument);
  }
  SUBCASE("parameter and buffer names") {
    DomainClassifier clf(4, []{
      DomainClassifierConfig c;
      c.filters = {4, 4, 4, 1};
      return c;
    }());
    std::vector<maad::NamedParam> params;
    clf.collect("had", params);
    REQUIRE(params.size() == 12);  // 4 convs x (w,b) + 2 bns x (gamma,beta)
    CHECK(params[0].name == "had.conv1.weight");
    CHECK(params[8].name == "had.bn2.gamma");
    std::vector<maad::NamedBuffer> bufs;
    clf.collect_buffers("had", bufs);
    REQUIRE(bufs.size() == 4);
    CHECK(bufs[0].name == "had.bn2.running_mean");
  }
}

TEST_CASE("low-level domain classifier") {
  DomainClassifierConfig cfg;
  cfg.level = DomainClassifierConfig::Level::kLow;
  cfg.filters = {8, 12, 16, 1};

  SUBCASE("preserves spatial dims") {
    DomainClassifier clf(5, cfg);
    std::mt19937_64 rng(121);
    clf.init(rng);
    Tensor x = random_tensor({2, 5, 9, 6}, rng);
    CHECK(clf.forward(x, false).shape() == Shape{2, 1, 9, 6});
  }
  SUBCASE("single pixel input") {
    DomainClassifier clf(8, []{
      DomainClassifierConfig c;
      c.level = DomainClassifierConfig::Level::kLow;
      c.filters = {8, 12, 16, 1};
      return c;
    }());
    std::mt19937_64 rng(122);
    clf.init(rng);
    Tensor x = random_tensor({1, 8, 1, 1}, rng);
    CHECK(clf.forward(x, false).shape() == Shape{1, 1, 1, 1});
  }
  SUBCASE("per-pixel locality: permuting pixels permutes logits") {
    DomainClassifier clf(5, cfg);
    std::mt19937_64 rng(123);
    clf.init(rng);
    Tensor x = random_tensor({1, 5, 2, 3}, rng);
    Tensor base = clf.forward(x, false);

    // swap pixel (0,0) with (1,2) in every channel
    Tensor xs = Tensor::from_values(x.shape(), x.values());
    const int64_t HW = 6;
    for (int64_t c = 0; c < 5; ++c) {
      std::swap(xs.values()[static_cast<size_t>(c * HW + 0)],
                xs.values()[static_cast<size_t>(c * HW + 5)]);
    }
    Tensor swapped = clf.forward(xs, false);
    CHECK(swapped.values()[0] == base.values()[5]);
    CHECK(swapped.values()[5] == base.values()[0]);
    for (int64_t i : {1, 2, 3, 4}) {
      CHECK(swapped.values()[static_cast<size_t>(i)] ==
            base.values()[static_cast<size_t>(i)]);
    }
  }
}

TEST_CASE("bce discriminator loss") {
  SUBCASE("uniform 0.5 predictions give ln 2") {
    Tensor logits = Tensor::zeros({2, 1, 2, 2});
    Tensor loss = maad::bce_discriminator_loss(logits, {1.0, 0.0});
    CHECK(std::fabs(loss.item() - std::log(2.0)) <= 1e-12);
  }
  SUBCASE("confident correct predictions approach zero") {
    Tensor logits = Tensor::full({1, 1, 2, 2}, 40.0);
    Tensor loss = maad::bce_discriminator_loss(logits, {1.0});
    CHECK(loss.item() < 1e-6);
    CHECK(loss.item() >= 0.0);
  }
  SUBCASE("worked 2x2 example") {
    const std::vector<double> probs = {0.9, 0.8, 0.6, 0.5};
    std::vector<double> lv;
    for (double p : probs) lv.push_back(logit(p));
    Tensor logits = Tensor::from_values({1, 1, 2, 2}, lv);
    Tensor loss = maad::bce_discriminator_loss(logits, {1.0});
    double expected = 0.0;
    for (double p : probs) expected -= std::log(p);
    expected /= 4.0;
    CHECK(std::fabs(loss.item() - expected) <= 1e-10);
    CHECK(loss.item() == doctest::Approx(0.383119).epsilon(1e-4));
  }
  SUBCASE("matches the scalar reference on random logits") {
    std::mt19937_64 rng(131);
    std::normal_distribution<double> dist(0.0, 3.0);
    for (int it = 0; it < 30; ++it) {
      const int64_t n = 2 + static_cast<int64_t>(it % 3);
      const int64_t h = 1 + static_cast<int64_t>(it % 4);
      const int64_t w = 2 + static_cast<int64_t>(it % 2);
      std::vector<double> lv(static_cast<size_t>(n * h * w));
      for (auto& v : lv) v = dist(rng);
      std::vector<double> labels;
      for (int64_t i = 0; i < n; ++i) labels.push_back(i % 2 == 0 ? 1.0 : 0.0);
      Tensor logits = Tensor::from_values({n, 1, h, w}, lv);
      const double got = maad::bce_discriminator_loss(logits, labels).item();
      const double want = oracles::bce_reference(lv, labels, h * w, maad::kBceEps);
      CHECK(std::fabs(got - want) <= 1e-10);
    }
  }
  SUBCASE("label validation") {
    Tensor logits = Tensor::zeros({2, 1, 1, 1});
    CHECK_THROWS_AS(maad::bce_discriminator_loss(logits, {1.0}),
                    std::invalid_argument);
    CHECK_THROWS_AS(maad::bce_discriminator_loss(logits, {1.0, 0.5}),
                    std::invalid_argument);
  }
}

TEST_CASE("least-squares discriminator loss") {
  SUBCASE("perfect and inverted predictions") {
    Tensor logits = Tensor::full({1, 1, 1, 2}, 40.0);
    CHECK(maad::lsq_discriminator_loss(logits, {1.0}).item() <= 1e-12);
    CHECK(std::fabs(maad::lsq_discriminator_loss(logits, {0.0}).item() - 1.0) <=
          1e-12);
  }
  SUBCASE("worked example") {
    Tensor logits =
        Tensor::from_values({1, 1, 1, 2}, {0.0, logit(0.75)});
    Tensor loss = maad::lsq_discriminator_loss(logits, {1.0});
    CHECK(std::fabs(loss.item() - 0.15625) <= 1e-12);
  }
  SUBCASE("matches the scalar reference on random logits") {
    std::mt19937_64 rng(141);
    std::normal_distribution<double> dist(0.0, 3.0);
    for (int it = 0; it < 30; ++it) {
      const int64_t n = 2 + static_cast<int64_t>(it % 2);
      const int64_t hw = 3 + static_cast<int64_t>(it % 5);
      std::vector<double> lv(static_cast<size_t>(n * hw));
      for (auto& v : lv) v = dist(rng);
      std::vector<double> labels;
      for (int64_t i = 0; i < n; ++i) labels.push_back(i % 2 == 0 ? 0.0 : 1.0);
      Tensor logits = Tensor::from_values({n, 1, 1, hw}, lv);
      const double got = maad::lsq_discriminator_loss(logits, labels).item();
      const double want = oracles::lsq_reference(lv, labels, hw);
      CHECK(std::fabs(got - want) <= 1e-10);
    }
  }
}

TEST_CASE("combined objective") {
  SUBCASE("disabled discriminators fall back to the detection loss") {
    Tensor x = Tensor::from_values({2}, {0.25, 0.75}, true);
    Tensor l_det = maad::sum(x);
    maad::MaadObjectiveConfig cfg;
    cfg.enable_had = false;
    cfg.enable_lad = false;
    Tensor total = maad::maad_objective(l_det, Tensor(), Tensor(), cfg);
    CHECK(total.item() == l_det.item());
    total.backward();
    CHECK(x.grad() == std::vector<double>{1.0, 1.0});
  }
  SUBCASE("weighted sums") {
    maad::MaadObjectiveConfig cfg;
    cfg.enable_lad = false;
    Tensor t1 = maad::maad_objective(Tensor::full({}, 1.0),
                                     Tensor::full({}, 0.7), Tensor(), cfg);
    CHECK(std::fabs(t1.item() - 1.0007) <= 1e-12);

    maad::MaadObjectiveConfig all;
    Tensor t2 = maad::maad_objective(Tensor::full({}, 2.0),
                                     Tensor::full({}, 0.6),
                                     Tensor::full({}, 0.5), all);
    CHECK(std::fabs(t2.item() - 2.00065) <= 1e-12);
  }
  SUBCASE("disabled terms contribute no gradients") {
    Tensor x = Tensor::from_values({1}, {0.5}, true);
    Tensor y = Tensor::from_values({1}, {0.25}, true);
    maad::MaadObjectiveConfig cfg;
    cfg.enable_lad = false;
    Tensor total =
        maad::maad_objective(maad::sum(x), maad::sum(y), maad::sum(y), cfg);
    total.backward();
    CHECK(x.grad() == std::vector<double>{1.0});
    CHECK(y.grad() == std::vector<double>{0.001});  // only the enabled branch
  }
  SUBCASE("config and argument validation") {
    maad::MaadObjectiveConfig bad;
    bad.lambda_had = -0.1;
    CHECK_THROWS_AS(maad::maad_objective(Tensor::full({}, 1.0), Tensor(),
                                         Tensor(), bad),
                    std::invalid_argument);
    maad::MaadObjectiveConfig cfg;
    CHECK_THROWS_AS(
        maad::maad_objective(Tensor(), Tensor::full({}, 1.0),
                             Tensor::full({}, 1.0), cfg),
        std::invalid_argument);
    CHECK_THROWS_AS(maad::maad_objective(Tensor::full({}, 1.0), Tensor(),
                                         Tensor::full({}, 1.0), cfg),
                    std::invalid_argument);
  }
}

TEST_CASE("minimax wiring through the reversal layer") {
  // One backward pass with the GRL must hand the classifier the gradient of
  // +loss while the attention module and features see -lambda_p x the
  // gradients of an identical graph without the GRL.
  const double lambda_p = 0.5;
  const double lambda_w = 0.001;

  auto build = [](std::mt19937_64& rng, SpatialAttention& att,
                  DomainClassifier& clf, Tensor& x) {
    att.init(rng, 0.2);
    clf.init(rng);
    x = random_tensor({2, 6, 8, 8}, rng, true, -1.0, 1.0);
  };

  DomainClassifierConfig cfg;
  cfg.filters = {4, 6, 8, 1};

  SpatialAttention att_a;
  DomainClassifier clf_a(6, cfg);
  Tensor x_a;
  std::mt19937_64 rng_a(151);
  build(rng_a, att_a, clf_a, x_a);

  SpatialAttention att_b;
  DomainClassifier clf_b(6, cfg);
  Tensor x_b;
  std::mt19937_64 rng_b(151);  // same seed: identical weights
  build(rng_b, att_b, clf_b, x_b);

  const std::vector<double> labels = {1.0, 0.0};

  auto weighted_loss = [&](SpatialAttention& att, DomainClassifier& clf,
                           const Tensor& x, bool with_grl) {
    Tensor feat = att.forward(x).weighted;
    if (with_grl) feat = maad::grl(feat, lambda_p);
    Tensor logits = clf.forward(feat, false);
    return maad::scale(maad::bce_discriminator_loss(logits, labels), lambda_w);
  };

  weighted_loss(att_a, clf_a, x_a, true).backward();
  weighted_loss(att_b, clf_b, x_b, false).backward();

  // classifier parameters sit above the GRL: identical gradients
  std::vector<maad::NamedParam> pa, pb;
  clf_a.collect("d", pa);
  clf_b.collect("d", pb);
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].tensor.has_grad());
    const auto& ga = pa[i].tensor.grad();
    const auto& gb = pb[i].tensor.grad();
    for (size_t j = 0; j < ga.size(); ++j) CHECK(ga[j] == gb[j]);
  }

  // attention parameters and input features sit below it: reversed and scaled
  auto check_reversed = [&](const std::vector<double>& ga,
                            const std::vector<double>& gb) {
    for (size_t j = 0; j < ga.size(); ++j) {
      const double want = -lambda_p * gb[j];
      const double tol = 1e-12 * std::max(1.0, std::fabs(want));
      CHECK(std::fabs(ga[j] - want) <= tol);
    }
  };
  std::vector<maad::NamedParam> aa, ab;
  att_a.collect("a", aa);
  att_b.collect("a", ab);
  for (size_t i = 0; i < aa.size(); ++i) {
    REQUIRE(aa[i].tensor.has_grad());
    check_reversed(aa[i].tensor.grad(), ab[i].tensor.grad());
  }
  REQUIRE(x_a.has_grad());
  check_reversed(x_a.grad(), x_b.grad());
}
