#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "maad/detector.hpp"
#include "maad/gradcheck.hpp"
#include "oracles.hpp"

using namespace maad;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo, double hi,
                     bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = u(rng);
  return Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

// Leaf with stem and vein running along the box axis, strictly inside the box.
InstanceAnnotation make_leaf(double cx, double cy, double w, double h,
                             double theta) {
  InstanceAnnotation a;
  a.obb = {cx, cy, w, h, theta};
  const double dx = std::cos(theta), dy = std::sin(theta);
  const double r = 0.35 * w;
  const Vec2 base{cx - 0.1 * w * dx, cy - 0.1 * w * dy};
  a.stem.part = PartLabel::kStem;
  a.stem.points = {{cx - r * dx, cy - r * dy}, base};
  a.vein.part = PartLabel::kVein;
  a.vein.points = {base, {cx + r * dx, cy + r * dy}};
  return a;
}

// Idealized head outputs that reproduce the encoded targets exactly.
HeadOutputs targets_to_outputs(const EncodedTargets& t) {
  auto tensor = [&](const std::vector<double>& v, int64_t c) {
    return Tensor::from_values({1, c, t.h, t.w}, v);
  };
  HeadOutputs out;
  out.center_heatmap = tensor(t.center_heatmap, 1);
  out.kp_heatmap = tensor(t.kp_heatmap, 1);
  out.offset = tensor(t.offset, 2);
  out.obb = tensor(t.obb, 4);
  out.keypoints = tensor(t.keypoints, 2 * t.k);
  return out;
}

}  // namespace

TEST_CASE("gaussian radius solves its three overlap cases") {
  const double w = 10.0, h = 10.0, o = 0.3;

  // Each case's root must satisfy its defining overlap equation.
  const double b1 = w + h, c1 = w * h * (1 - o) / (1 + o);
  const double r1 = (b1 - std::sqrt(b1 * b1 - 4 * c1)) / 2;
  const double inter1 = (w - r1) * (h - r1);
  CHECK(inter1 / (2 * w * h - inter1) == doctest::Approx(o).epsilon(1e-9));

  const double b2 = 2 * (w + h), c2 = (1 - o) * w * h;
  const double r2 = (b2 - std::sqrt(b2 * b2 - 16 * c2)) / 8;
  CHECK((w - 2 * r2) * (h - 2 * r2) / (w * h) ==
        doctest::Approx(o).epsilon(1e-9));

  const double b3 = -2 * o * (w + h), c3 = (o - 1) * w * h;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 16 * o * c3)) / (8 * o);
  CHECK(w * h / ((w + 2 * r3) * (h + 2 * r3)) ==
        doctest::Approx(o).epsilon(1e-9));

  const double r = gaussian_radius(w, h, o);
  CHECK(r == doctest::Approx(std::min({r1, r2, r3})).epsilon(1e-12));
  CHECK(r == doctest::Approx(2.2613872124).epsilon(1e-8));

  // Monotone in box size, positive for valid inputs.
  CHECK(gaussian_radius(4, 3, o) < gaussian_radius(8, 6, o));
  CHECK(gaussian_radius(0.5, 0.5, o) > 0.0);
  CHECK_THROWS_AS(gaussian_radius(0.0, 5.0, o), std::invalid_argument);
  CHECK_THROWS_AS(gaussian_radius(5.0, 5.0, 1.5), std::invalid_argument);
}

TEST_CASE("backbone produces the documented tap shapes") {
  std::mt19937_64 rng(5);
  Detector det;
  det.init(rng);

  Tensor x = random_tensor({2, 3, 64, 64}, rng, 0.0, 1.0);
  auto fwd = det.forward(x, false);
  CHECK(fwd.taps.low.shape() == Shape{2, 16, 64, 64});
  CHECK(fwd.taps.high.shape() == Shape{2, 64, 16, 16});
  CHECK(fwd.heads.center_heatmap.shape() == Shape{2, 1, 16, 16});
  CHECK(fwd.heads.offset.shape() == Shape{2, 2, 16, 16});
  CHECK(fwd.heads.obb.shape() == Shape{2, 4, 16, 16});
  CHECK(fwd.heads.keypoints.shape() == Shape{2, 16, 16, 16});
  CHECK(fwd.heads.kp_heatmap.shape() == Shape{2, 1, 16, 16});

  SUBCASE("same seed gives bitwise identical outputs") {
    std::mt19937_64 rng2(5);
    Detector det2;
    det2.init(rng2);
    auto fwd2 = det2.forward(x, false);
    CHECK(fwd2.taps.high.values() == fwd.taps.high.values());
    CHECK(fwd2.heads.center_heatmap.values() ==
          fwd.heads.center_heatmap.values());
  }

  SUBCASE("zero input through a zero-initialized backbone stays zero") {
    Detector zero_det;  // construction leaves every weight at zero
    Tensor zeros = Tensor::zeros({1, 3, 8, 8});
    auto taps = zero_det.forward_taps(zeros, true);
    for (double v : taps.high.values()) CHECK(v == 0.0);
    for (double v : taps.low.values()) CHECK(v == 0.0);
  }

  SUBCASE("input validation") {
    CHECK_THROWS_AS(det.forward(random_tensor({2, 3, 62, 62}, rng, 0, 1), false),
                    std::invalid_argument);
    CHECK_THROWS_AS(det.forward(random_tensor({2, 1, 64, 64}, rng, 0, 1), false),
                    std::invalid_argument);
  }
}

TEST_CASE("heads start at the heatmap prior") {
  std::mt19937_64 rng(11);
  Detector det;  // zero weights
  fill_tensor(det.heads.center.proj.bias, kHeatmapBiasInit);
  fill_tensor(det.heads.kp_heatmap.proj.bias, kHeatmapBiasInit);

  Tensor x = random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
  auto fwd = det.forward(x, false);
  const double prior = 1.0 / (1.0 + std::exp(2.19));
  CHECK(prior == doctest::Approx(0.1001).epsilon(1e-3));
  for (double v : fwd.heads.center_heatmap.values()) {
    CHECK(v == doctest::Approx(prior).epsilon(1e-12));
  }
  for (double v : fwd.heads.kp_heatmap.values()) {
    CHECK(v == doctest::Approx(prior).epsilon(1e-12));
  }
  // Non-heatmap heads stay at zero under zero init.
  for (double v : fwd.heads.offset.values()) CHECK(v == 0.0);

  // After random init the heatmaps sit near the prior.
  Detector det2;
  det2.init(rng);
  auto fwd2 = det2.forward(x, false);
  for (double v : fwd2.heads.center_heatmap.values()) {
    CHECK(v > 0.05);
    CHECK(v < 0.2);
  }
}

TEST_CASE("encode_targets places peaks offsets and regression targets") {
  const KeypointLayout layout;

  SUBCASE("centered instance lands on its cell with zero offset") {
    auto t = encode_targets({make_leaf(32, 32, 16, 12, 0.3)}, 64, 64, layout);
    CHECK(t.h == 16);
    CHECK(t.w == 16);
    CHECK(t.center_heatmap[8 * 16 + 8] == 1.0);
    CHECK(t.center_peaks == 1);
    CHECK(t.mask[8 * 16 + 8] == 1.0);
    double mask_total = 0.0;
    for (double v : t.mask) mask_total += v;
    CHECK(mask_total == 1.0);
    CHECK(t.offset[0 * 256 + 8 * 16 + 8] == 0.0);
    CHECK(t.offset[1 * 256 + 8 * 16 + 8] == 0.0);
    CHECK(t.obb[0 * 256 + 8 * 16 + 8] ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(t.obb[1 * 256 + 8 * 16 + 8] ==
          doctest::Approx(std::log(3.0)).epsilon(1e-12));
    CHECK(t.obb[2 * 256 + 8 * 16 + 8] ==
          doctest::Approx(std::sin(0.3)).epsilon(1e-12));
    CHECK(t.obb[3 * 256 + 8 * 16 + 8] ==
          doctest::Approx(std::cos(0.3)).epsilon(1e-12));
    for (double v : t.center_heatmap) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(t.kp_peaks >= 1);
  }

  SUBCASE("offset target for center (34,34) is (0.5, 0.5)") {
    auto t = encode_targets({make_leaf(34, 34, 16, 12, 0.0)}, 64, 64, layout);
    CHECK(t.offset[0 * 256 + 8 * 16 + 8] == 0.5);
    CHECK(t.offset[1 * 256 + 8 * 16 + 8] == 0.5);
  }

  SUBCASE("keypoint targets are offsets from the center in cells") {
    auto leaf = make_leaf(30, 28, 18, 10, -0.4);
    auto t = encode_targets({leaf}, 64, 64, layout);
    const auto kps = instance_keypoints(leaf, layout);
    REQUIRE(int64_t(kps.size()) == t.k);
    const int64_t cell = (28 / 4) * 16 + (30 / 4);
    for (size_t i = 0; i < kps.size(); ++i) {
      CHECK(t.keypoints[size_t(2 * i) * 256 + size_t(cell)] ==
            doctest::Approx((kps[i].p.x - 30.0) / 4.0).epsilon(1e-12));
      CHECK(t.keypoints[size_t(2 * i + 1) * 256 + size_t(cell)] ==
            doctest::Approx((kps[i].p.y - 28.0) / 4.0).epsilon(1e-12));
    }
  }

  SUBCASE("two distant instances give two unit peaks") {
    auto t = encode_targets(
        {make_leaf(16, 16, 12, 8, 0.2), make_leaf(48, 48, 12, 8, -0.7)}, 64,
        64, layout);
    CHECK(t.center_peaks == 2);
    CHECK(*std::max_element(t.center_heatmap.begin(),
                            t.center_heatmap.end()) == 1.0);
    double mask_total = 0.0;
    for (double v : t.mask) mask_total += v;
    CHECK(mask_total == 2.0);
  }

  SUBCASE("validation") {
    InstanceAnnotation bad = make_leaf(32, 32, 16, 12, 0.0);
    bad.obb.w = 0.0;
    CHECK_THROWS_AS(encode_targets({bad}, 64, 64, layout),
                    std::invalid_argument);
    CHECK_THROWS_AS(
        encode_targets({make_leaf(70, 32, 16, 12, 0.0)}, 64, 64, layout),
        std::invalid_argument);
    CHECK_THROWS_AS(encode_targets({}, 62, 64, layout), std::invalid_argument);
  }
}

TEST_CASE("focal loss matches the scalar reference") {
  SUBCASE("perfect prediction is zero") {
    std::vector<double> gt(64, 0.0);
    gt[10] = 1.0;
    Tensor pred = Tensor::from_values({1, 1, 8, 8}, gt);
    Tensor gt_t = Tensor::from_values({1, 1, 8, 8}, gt);
    CHECK(focal_loss(pred, gt_t, 1).item() ==
          doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("half-confident peak gives the pinned value") {
    std::vector<double> gt(64, 0.0), pr(64, 0.0);
    gt[10] = 1.0;
    pr[10] = 0.5;
    Tensor pred = Tensor::from_values({1, 1, 8, 8}, pr);
    Tensor gt_t = Tensor::from_values({1, 1, 8, 8}, gt);
    const double got = focal_loss(pred, gt_t, 1).item();
    CHECK(got == doctest::Approx(0.25 * std::log(2.0)).epsilon(1e-9));
    CHECK(got == doctest::Approx(0.1732867951).epsilon(1e-8));
  }

  SUBCASE("agrees with the loop reference on random maps") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<double> gt(48), pr(48);
      int peaks = 0;
      for (size_t i = 0; i < gt.size(); ++i) {
        const double roll = u(rng);
        if (roll < 0.15) {
          gt[i] = 1.0;
          ++peaks;
        } else if (roll < 0.5) {
          gt[i] = u(rng) * 0.99;
        }
        pr[i] = u(rng);
      }
      Tensor pred = Tensor::from_values({2, 1, 4, 6}, pr);
      Tensor gt_t = Tensor::from_values({2, 1, 4, 6}, gt);
      const double expected = oracles::focal_reference(pr, gt, 1e-7);
      CHECK(focal_loss(pred, gt_t, peaks).item() ==
            doctest::Approx(expected).epsilon(1e-10));
      CHECK(focal_loss(pred, gt_t, peaks).item() >= 0.0);
    }
  }

  SUBCASE("no positive peak normalizes by one") {
    std::vector<double> gt(16, 0.2), pr(16, 0.3);
    Tensor pred = Tensor::from_values({1, 1, 4, 4}, pr);
    Tensor gt_t = Tensor::from_values({1, 1, 4, 4}, gt);
    const double expected = oracles::focal_reference(pr, gt, 1e-7);
    CHECK(focal_loss(pred, gt_t, 0).item() ==
          doctest::Approx(expected).epsilon(1e-12));
  }

  SUBCASE("validation") {
    Tensor a = Tensor::from_values({1, 1, 2, 2}, {0.5, 0.5, 0.5, 0.5});
    Tensor bad = Tensor::from_values({1, 1, 2, 2}, {0.5, 1.5, 0.5, 0.5});
    Tensor other = Tensor::from_values({1, 1, 1, 4}, {0.5, 0.5, 0.5, 0.5});
    CHECK_THROWS_AS(focal_loss(a, bad, 1), std::invalid_argument);
    CHECK_THROWS_AS(focal_loss(a, other, 1), std::invalid_argument);
  }
}

TEST_CASE("masked l1 matches the scalar reference") {
  SUBCASE("single masked cell") {
    Tensor pred = Tensor::from_values({1, 1, 2, 2}, {1.5, 9.0, 9.0, 9.0});
    Tensor target = Tensor::from_values({1, 1, 2, 2}, {1.0, 0.0, 0.0, 0.0});
    Tensor mask = Tensor::from_values({1, 1, 2, 2}, {1.0, 0.0, 0.0, 0.0});
    CHECK(l1_masked_loss(pred, target, mask).item() == 0.5);
    CHECK(l1_masked_loss(target, target, mask).item() == 0.0);
  }

  SUBCASE("multi-channel cells divide by the cell count") {
    // One masked cell, two channels off by 0.3 and 0.4: loss 0.7.
    Tensor pred = Tensor::from_values({1, 2, 1, 2}, {0.3, 0.0, -0.4, 0.0});
    Tensor target = Tensor::zeros({1, 2, 1, 2});
    Tensor mask = Tensor::from_values({1, 1, 1, 2}, {1.0, 0.0});
    CHECK(l1_masked_loss(pred, target, mask).item() ==
          doctest::Approx(0.7).epsilon(1e-12));
  }

  SUBCASE("empty mask gives zero, not NaN") {
    Tensor pred = Tensor::from_values({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor target = Tensor::zeros({1, 1, 2, 2});
    Tensor mask = Tensor::zeros({1, 1, 2, 2});
    CHECK(l1_masked_loss(pred, target, mask).item() == 0.0);
  }

  SUBCASE("agrees with the loop reference on random maps") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    std::bernoulli_distribution coin(0.3);
    for (int trial = 0; trial < 20; ++trial) {
      const int64_t n = 2, c = 3, hh = 4, ww = 5;
      std::vector<double> pr(size_t(n * c * hh * ww)), tg(pr.size());
      std::vector<double> mk(size_t(n * hh * ww), 0.0);
      for (auto& v : pr) v = u(rng);
      for (auto& v : tg) v = u(rng);
      for (auto& v : mk) v = coin(rng) ? 1.0 : 0.0;
      Tensor pred = Tensor::from_values({n, c, hh, ww}, pr);
      Tensor target = Tensor::from_values({n, c, hh, ww}, tg);
      Tensor mask = Tensor::from_values({n, 1, hh, ww}, mk);
      const double expected =
          oracles::l1_masked_reference(pr, tg, mk, n, c, hh * ww);
      CHECK(l1_masked_loss(pred, target, mask).item() ==
            doctest::Approx(expected).epsilon(1e-10));
    }
  }

  SUBCASE("validation") {
    Tensor pred = Tensor::zeros({1, 2, 2, 2});
    Tensor bad_mask = Tensor::zeros({1, 2, 2, 2});
    CHECK_THROWS_AS(l1_masked_loss(pred, pred, bad_mask),
                    std::invalid_argument);
  }
}

TEST_CASE("detection loss composes the five weighted terms") {
  const KeypointLayout layout;
  auto targets = stack_targets(
      {encode_targets({make_leaf(32, 32, 16, 12, 0.3)}, 64, 64, layout)});
  HeadOutputs perfect = targets_to_outputs(
      encode_targets({make_leaf(32, 32, 16, 12, 0.3)}, 64, 64, layout));

  SUBCASE("perfect predictions give zero loss") {
    auto terms = detection_loss(perfect, targets, {});
    CHECK(terms.total.item() == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("a lone offset error surfaces unscaled") {
    HeadOutputs outputs = perfect;
    auto vals = targets.offset.values();
    vals[8 * 16 + 8] += 0.5;  // x-offset channel at the masked cell
    outputs.offset = Tensor::from_values({1, 2, 16, 16}, vals);
    auto terms = detection_loss(outputs, targets, {});
    CHECK(terms.off.item() == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(terms.total.item() == doctest::Approx(0.5).epsilon(1e-10));
  }

  SUBCASE("doubling every weight doubles the loss") {
    std::mt19937_64 rng(3);
    HeadOutputs outputs;
    outputs.center_heatmap = random_tensor({1, 1, 16, 16}, rng, 0.05, 0.95);
    outputs.kp_heatmap = random_tensor({1, 1, 16, 16}, rng, 0.05, 0.95);
    outputs.offset = random_tensor({1, 2, 16, 16}, rng, -1.0, 1.0);
    outputs.obb = random_tensor({1, 4, 16, 16}, rng, -1.0, 1.0);
    outputs.keypoints = random_tensor({1, 16, 16, 16}, rng, -2.0, 2.0);
    DetectionLossWeights w;
    DetectionLossWeights w2{2 * w.cp, 2 * w.off, 2 * w.kp, 2 * w.kphm,
                            2 * w.obb};
    const double base = detection_loss(outputs, targets, w).total.item();
    const double twice = detection_loss(outputs, targets, w2).total.item();
    CHECK(twice == doctest::Approx(2.0 * base).epsilon(1e-12));
    CHECK(base > 0.0);
  }

  SUBCASE("negative weights are rejected") {
    DetectionLossWeights w;
    w.kp = -0.1;
    CHECK_THROWS_AS(detection_loss(perfect, targets, w),
                    std::invalid_argument);
  }
}

TEST_CASE("encode decode round trip recovers instances") {
  const KeypointLayout layout;
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> jitter(0.0, 4.0);
  std::uniform_real_distribution<double> size_d(9.0, 20.0);
  std::uniform_real_distribution<double> angle(-M_PI, M_PI);

  for (int scene = 0; scene < 40; ++scene) {
    std::vector<InstanceAnnotation> gt;
    const double bases[2] = {14.0, 44.0};
    for (double by : bases) {
      for (double bx : bases) {
        double theta = angle(rng);
        if (theta <= -M_PI) theta = M_PI;
        gt.push_back(make_leaf(bx + jitter(rng), by + jitter(rng),
                               size_d(rng), size_d(rng), theta));
      }
    }
    auto encoded = encode_targets(gt, 64, 64, layout);
    auto outputs = targets_to_outputs(encoded);
    DecodeConfig cfg;
    cfg.score_threshold = 0.5;
    cfg.top_k = 10;
    auto dets = decode_detections(outputs, 0, cfg);
    REQUIRE(dets.size() == gt.size());

    for (const auto& inst : gt) {
      // Match by nearest decoded center.
      const Detection* best = nullptr;
      double best_d = 1e18;
      for (const auto& d : dets) {
        const double dist = std::hypot(d.obb.cx - inst.obb.cx,
                                       d.obb.cy - inst.obb.cy);
        if (dist < best_d) {
          best_d = dist;
          best = &d;
        }
      }
      REQUIRE(best != nullptr);
      CHECK(best_d <= 0.5);
      CHECK(std::abs(best->obb.w - inst.obb.w) / inst.obb.w <= 1e-6);
      CHECK(std::abs(best->obb.h - inst.obb.h) / inst.obb.h <= 1e-6);
      const double dtheta = std::abs(
          normalize_angle(best->obb.theta - normalize_angle(inst.obb.theta)));
      CHECK(dtheta <= 1e-6);
      const auto kps = instance_keypoints(inst, layout);
      REQUIRE(best->keypoints.size() == kps.size());
      for (size_t i = 0; i < kps.size(); ++i) {
        CHECK(distance(best->keypoints[i], kps[i].p) <= 0.5);
      }
    }
  }
}

TEST_CASE("angle wrap does not change the decoded box") {
  const KeypointLayout layout;
  auto leaf_a = make_leaf(32, 32, 16, 10, 0.7);
  auto leaf_b = leaf_a;
  leaf_b.obb.theta = 0.7 + 2.0 * M_PI;

  DecodeConfig cfg;
  cfg.score_threshold = 0.5;
  auto da = decode_detections(
      targets_to_outputs(encode_targets({leaf_a}, 64, 64, layout)), 0, cfg);
  auto db = decode_detections(
      targets_to_outputs(encode_targets({leaf_b}, 64, 64, layout)), 0, cfg);
  REQUIRE(da.size() == 1);
  REQUIRE(db.size() == 1);
  CHECK(da[0].obb.theta == doctest::Approx(0.7).epsilon(1e-9));
  CHECK(db[0].obb.theta == doctest::Approx(0.7).epsilon(1e-9));

  // theta = pi is wrap-safe: atan2(sin, cos) normalizes onto (-pi, pi].
  auto leaf_pi = make_leaf(32, 32, 16, 10, M_PI);
  auto dp = decode_detections(
      targets_to_outputs(encode_targets({leaf_pi}, 64, 64, layout)), 0, cfg);
  REQUIRE(dp.size() == 1);
  CHECK(std::abs(normalize_angle(dp[0].obb.theta - M_PI)) <= 1e-9);
}

TEST_CASE("decode handles peaks thresholds and top-k") {
  const int64_t h = 8, w = 8;
  auto zeros = [&](int64_t c) { return Tensor::zeros({1, c, h, w}); };
  HeadOutputs out;
  out.offset = zeros(2);
  out.obb = zeros(4);
  out.keypoints = zeros(4);  // K = 2
  out.kp_heatmap = zeros(1);

  SUBCASE("single synthetic peak decodes at cell times stride") {
    std::vector<double> hm(size_t(h * w), 0.0);
    hm[3 * w + 5] = 0.9;
    out.center_heatmap = Tensor::from_values({1, 1, h, w}, hm);
    auto obb_vals = out.obb.values();
    obb_vals[size_t(0 * h * w + 3 * w + 5)] = std::log(2.0);
    obb_vals[size_t(1 * h * w + 3 * w + 5)] = std::log(1.5);
    obb_vals[size_t(2 * h * w + 3 * w + 5)] = std::sin(0.4);
    obb_vals[size_t(3 * h * w + 3 * w + 5)] = std::cos(0.4);
    out.obb = Tensor::from_values({1, 4, h, w}, obb_vals);

    auto dets = decode_detections(out, 0, {});
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].score == 0.9);
    CHECK(dets[0].obb.cx == 20.0);
    CHECK(dets[0].obb.cy == 12.0);
    CHECK(dets[0].obb.w == doctest::Approx(8.0).epsilon(1e-12));
    CHECK(dets[0].obb.h == doctest::Approx(6.0).epsilon(1e-12));
    CHECK(dets[0].obb.theta == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(dets[0].keypoints.size() == 2);
    CHECK(dets[0].keypoints[0].x == 20.0);
    CHECK(dets[0].keypoints[0].y == 12.0);
  }

  SUBCASE("flat heatmap below threshold decodes to nothing") {
    out.center_heatmap = Tensor::full({1, 1, h, w}, 0.1);
    CHECK(decode_detections(out, 0, {}).empty());
  }

  SUBCASE("top-k keeps the strongest peaks") {
    std::vector<double> hm(size_t(h * w), 0.0);
    hm[1 * w + 1] = 0.7;
    hm[1 * w + 6] = 0.9;
    hm[6 * w + 3] = 0.8;
    out.center_heatmap = Tensor::from_values({1, 1, h, w}, hm);
    DecodeConfig cfg;
    cfg.top_k = 2;
    auto dets = decode_detections(out, 0, cfg);
    REQUIRE(dets.size() == 2);
    CHECK(dets[0].score == 0.9);
    CHECK(dets[1].score == 0.8);
  }

  SUBCASE("snap moves keypoints onto strong nearby heatmap peaks") {
    std::vector<double> hm(size_t(h * w), 0.0);
    hm[4 * w + 4] = 1.0;
    out.center_heatmap = Tensor::from_values({1, 1, h, w}, hm);

    // Keypoint 0 regresses one cell right of the center (feature (5,4));
    // the heatmap peak sits at cell (6,4), 1.58 cells away. Keypoint 1 stays
    // at the center (feature (4,4)), 2.55 cells from the peak: out of range.
    auto kp_vals = out.keypoints.values();
    kp_vals[size_t(0 * h * w + 4 * w + 4)] = 1.0;  // dx: one cell
    out.keypoints = Tensor::from_values({1, 4, h, w}, kp_vals);

    std::vector<double> kphm(size_t(h * w), 0.0);
    kphm[4 * w + 6] = 0.9;
    out.kp_heatmap = Tensor::from_values({1, 1, h, w}, kphm);

    DecodeConfig cfg;
    cfg.snap_keypoints = true;
    auto dets = decode_detections(out, 0, cfg);
    REQUIRE(dets.size() == 1);
    // Keypoint 0 snapped to the peak cell center (6.5, 4.5) * 4.
    CHECK(dets[0].keypoints[0].x == doctest::Approx(26.0).epsilon(1e-12));
    CHECK(dets[0].keypoints[0].y == doctest::Approx(18.0).epsilon(1e-12));
    CHECK(dets[0].keypoints[1].x == 16.0);
    CHECK(dets[0].keypoints[1].y == 16.0);

    SUBCASE("weak peaks do not attract") {
      kphm[4 * w + 6] = 0.2;  // below snap_min_score
      out.kp_heatmap = Tensor::from_values({1, 1, h, w}, kphm);
      auto dets2 = decode_detections(out, 0, cfg);
      CHECK(dets2[0].keypoints[0].x == 20.0);
    }

    SUBCASE("snapping defaults off") {
      auto dets3 = decode_detections(out, 0, {});
      CHECK(dets3[0].keypoints[0].x == 20.0);
    }
  }

  SUBCASE("validation") {
    out.center_heatmap = Tensor::zeros({1, 1, h, w});
    CHECK_THROWS_AS(decode_detections(out, 1, {}), std::invalid_argument);
    DecodeConfig cfg;
    cfg.top_k = 0;
    CHECK_THROWS_AS(decode_detections(out, 0, cfg), std::invalid_argument);
  }
}

TEST_CASE("detection loss gradients pass finite differences") {
  const KeypointLayout layout{2, 3};
  DetectorConfig cfg;
  cfg.backbone.channels = {4, 6, 8};
  cfg.head_channels = 6;
  cfg.keypoints = layout;
  Detector det(cfg);
  std::mt19937_64 rng(13);
  det.init(rng, 0.05);

  Tensor x = random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
  auto targets = stack_targets(
      {encode_targets({make_leaf(8.3, 7.6, 6.0, 4.5, 0.5)}, 16, 16, layout)});

  auto forward = [&]() {
    auto fwd = det.forward(x, true);
    return detection_loss(fwd.heads, targets, {}).total;
  };

  // One parameter tensor per head plus backbone samples keeps FD affordable
  // while exercising every loss term's path.
  std::vector<GradCheckParam> params;
  params.push_back({"block1.conv1.w", det.backbone.blocks[0].conv1.weight});
  params.push_back({"block3.conv2.w", det.backbone.blocks[2].conv2.weight});
  params.push_back({"block2.bn1.gamma", det.backbone.blocks[1].bn1.gamma});
  params.push_back({"center.proj.w", det.heads.center.proj.weight});
  params.push_back({"center.proj.b", det.heads.center.proj.bias});
  params.push_back({"offset.proj.w", det.heads.offset.proj.weight});
  params.push_back({"obb.proj.w", det.heads.obb.proj.weight});
  params.push_back({"keypoints.proj.w", det.heads.keypoints.proj.weight});
  params.push_back({"kp_heatmap.proj.w", det.heads.kp_heatmap.proj.weight});
  params.push_back({"kp_heatmap.trunk.b", det.heads.kp_heatmap.trunk.bias});

  auto report = grad_check(forward, params, 1e-3);
  for (const auto& e : report.entries) {
    INFO(e.name << " max_rel_err " << e.max_rel_err);
    CHECK(e.pass);
  }
  CHECK(report.pass);
}

TEST_CASE("detector parameter collection has unique names") {
  Detector det;
  std::vector<NamedParam> params;
  det.collect(params);
  CHECK(params.size() == 44);  // 3 blocks x 8 + 5 heads x 4
  std::set<std::string> names;
  for (const auto& p : params) names.insert(p.name);
  CHECK(names.size() == params.size());
  CHECK(names.count("det.backbone.block1.conv1.weight") == 1);
  CHECK(names.count("det.heads.center.proj.bias") == 1);

  std::vector<NamedBuffer> buffers;
  det.collect_buffers(buffers);
  CHECK(buffers.size() == 12);  // 3 blocks x 2 BN x 2 stats
}
