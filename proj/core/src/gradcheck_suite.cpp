#include "maad/gradcheck_suite.hpp"

#include <chrono>
#include <random>

#include "maad/adversarial.hpp"
#include "maad/nn.hpp"
#include "maad/tensor.hpp"

namespace maad {

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0,
                     double hi = 2.0, bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& e : v) e = dist(rng);
  return Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

// Keeps finite differences away from activation kinks and clamp edges.
void nudge_away(Tensor& t, std::initializer_list<double> edges,
                double margin = 1e-3) {
  for (double& v : t.values()) {
    for (double e : edges) {
      if (std::fabs(v - e) < margin) v = e + (v >= e ? margin : -margin);
    }
  }
}

// Fixed random cotangent so the scalar loss exercises every output element.
Tensor cotangent_for(const Tensor& y, std::mt19937_64& rng) {
  NoGradGuard ng;
  return random_tensor(y.shape(), rng, -1.0, 1.0, false);
}

struct Fragment {
  std::string name;
  double tolerance;
  int seeds;
  // build returns the forward closure and the parameters to check
  std::function<std::pair<std::function<Tensor()>, std::vector<GradCheckParam>>(
      std::mt19937_64&)>
      build;
};

}  // namespace

std::vector<GradCheckSuiteResult> run_gradcheck_suite(uint64_t seed,
                                                      int seeds_per_op) {
  std::vector<Fragment> fragments;
  auto add_fragment = [&](std::string name, double tol, int seeds, auto build) {
    fragments.push_back(Fragment{std::move(name), tol, seeds, build});
  };

  add_fragment("add_broadcast", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor a = random_tensor({2, 3, 4, 4}, rng);
    Tensor b = random_tensor({2, 1, 4, 4}, rng);
    Tensor r = cotangent_for(a, rng);
    auto fwd = [=] { return sum(mul(add(a, b), r)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"a", a}, {"b", b}});
  });

  add_fragment("sub", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor a = random_tensor({3, 5}, rng);
    Tensor b = random_tensor({3, 5}, rng);
    Tensor r = cotangent_for(a, rng);
    auto fwd = [=] { return sum(mul(sub(a, b), r)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"a", a}, {"b", b}});
  });

  add_fragment("mul_broadcast", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor a = random_tensor({2, 4, 3, 3}, rng);
    Tensor b = random_tensor({2, 1, 3, 3}, rng);
    Tensor r = cotangent_for(a, rng);
    auto fwd = [=] { return sum(mul(mul(a, b), r)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"a", a}, {"b", b}});
  });

  add_fragment("scale_add_scalar_neg", 1e-4, seeds_per_op,
               [](std::mt19937_64& rng) {
    Tensor a = random_tensor({4, 6}, rng);
    Tensor r = cotangent_for(a, rng);
    auto fwd = [=] {
      return sum(mul(add_scalar(neg(scale(a, 1.7)), 0.3), r));
    };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"a", a}});
  });

  add_fragment("abs", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor a = random_tensor({5, 5}, rng);
    nudge_away(a, {0.0});
    Tensor r = cotangent_for(a, rng);
    auto fwd = [=] { return sum(mul(abs(a), r)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"a", a}});
  });

  add_fragment("log", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor a = random_tensor({4, 4}, rng, 0.1, 2.0);
    Tensor r = cotangent_for(a, rng);
    auto fwd = [=] { return sum(mul(log(a), r)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"a", a}});
  });

  add_fragment("exp", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor a = random_tensor({4, 4}, rng);
    Tensor r = cotangent_for(a, rng);
    auto fwd = [=] { return sum(mul(exp(a), r)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"a", a}});
  });

  add_fragment("clamp", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor a = random_tensor({6, 6}, rng);
    nudge_away(a, {-1.0, 1.0});
    Tensor r = cotangent_for(a, rng);
    auto fwd = [=] { return sum(mul(clamp(a, -1.0, 1.0), r)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"a", a}});
  });

  add_fragment("relu", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor a = random_tensor({2, 3, 4, 4}, rng);
    nudge_away(a, {0.0});
    Tensor r = cotangent_for(a, rng);
    auto fwd = [=] { return sum(mul(relu(a), r)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"a", a}});
  });

  add_fragment("leaky_relu", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor a = random_tensor({2, 3, 4, 4}, rng);
    nudge_away(a, {0.0});
    Tensor r = cotangent_for(a, rng);
    auto fwd = [=] { return sum(mul(leaky_relu(a, 0.2), r)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"a", a}});
  });

  add_fragment("sigmoid", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor a = random_tensor({3, 7}, rng);
    Tensor r = cotangent_for(a, rng);
    auto fwd = [=] { return sum(mul(sigmoid(a), r)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"a", a}});
  });

  add_fragment("sum_mean", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor a = random_tensor({3, 4}, rng);
    auto fwd = [=] { return add(sum(a), scale(mean(a), 0.5)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"a", a}});
  });

  add_fragment("spatial_mean", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor a = random_tensor({2, 3, 4, 5}, rng);
    Tensor r = cotangent_for(Tensor::zeros({2, 3}), rng);
    auto fwd = [=] { return sum(mul(spatial_mean(a), r)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"a", a}});
  });

  add_fragment("concat0", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor a = random_tensor({2, 3, 2, 2}, rng);
    Tensor b = random_tensor({3, 3, 2, 2}, rng);
    Tensor r = cotangent_for(Tensor::zeros({5, 3, 2, 2}), rng);
    auto fwd = [=] { return sum(mul(concat0(a, b), r)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"a", a}, {"b", b}});
  });

  add_fragment("conv2d", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor x = random_tensor({2, 2, 5, 5}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    Tensor y = conv2d(x, w, b, 1, 1);
    Tensor r = cotangent_for(y, rng);
    auto fwd = [=] { return mean(mul(conv2d(x, w, b, 1, 1), r)); };
    return std::make_pair(
        std::function<Tensor()>(fwd),
        std::vector<GradCheckParam>{{"x", x}, {"w", w}, {"b", b}});
  });

  add_fragment("conv2d_strided_asym_pad", 1e-4, seeds_per_op,
               [](std::mt19937_64& rng) {
    const Padding2d pad{1, 2, 0, 1};
    Tensor x = random_tensor({1, 3, 6, 7}, rng);
    Tensor w = random_tensor({2, 3, 4, 4}, rng);
    Tensor b = random_tensor({2}, rng);
    Tensor y = conv2d(x, w, b, 2, pad);
    Tensor r = cotangent_for(y, rng);
    auto fwd = [=] { return mean(mul(conv2d(x, w, b, 2, pad), r)); };
    return std::make_pair(
        std::function<Tensor()>(fwd),
        std::vector<GradCheckParam>{{"x", x}, {"w", w}, {"b", b}});
  });

  add_fragment("batch_norm2d_train", 1e-4, seeds_per_op,
               [](std::mt19937_64& rng) {
    Tensor x = random_tensor({4, 3, 3, 3}, rng);
    Tensor gamma = random_tensor({3}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({3}, rng, -0.5, 0.5);
    Tensor r = cotangent_for(x, rng);
    // running stats are scratch: training-mode output ignores them
    auto rm = std::make_shared<std::vector<double>>(3, 0.0);
    auto rv = std::make_shared<std::vector<double>>(3, 1.0);
    auto fwd = [=] {
      return sum(mul(batch_norm2d(x, gamma, beta, *rm, *rv, true, 0.1, 1e-5),
                     r));
    };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{
                              {"x", x}, {"gamma", gamma}, {"beta", beta}});
  });

  add_fragment("batch_norm2d_eval", 1e-4, seeds_per_op,
               [](std::mt19937_64& rng) {
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor gamma = random_tensor({3}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({3}, rng, -0.5, 0.5);
    Tensor r = cotangent_for(x, rng);
    auto rm = std::make_shared<std::vector<double>>(
        std::vector<double>{0.1, -0.2, 0.05});
    auto rv = std::make_shared<std::vector<double>>(
        std::vector<double>{1.1, 0.9, 1.3});
    auto fwd = [=] {
      return sum(mul(batch_norm2d(x, gamma, beta, *rm, *rv, false, 0.1, 1e-5),
                     r));
    };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{
                              {"x", x}, {"gamma", gamma}, {"beta", beta}});
  });

  add_fragment("channel_pool", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor x = random_tensor({2, 4, 3, 3}, rng);
    Tensor r = cotangent_for(Tensor::zeros({2, 2, 3, 3}), rng);
    auto fwd = [=] { return sum(mul(channel_pool(x), r)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"x", x}});
  });

  add_fragment("grl", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor x = random_tensor({2, 3, 3, 3}, rng);
    Tensor r = cotangent_for(x, rng);
    auto fwd = [=] { return sum(mul(grl(x, 0.7), r)); };
    // forward is identity, so finite differences see the unreversed slope;
    // the analytic gradient is -0.7x that
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"x", x, -0.7}});
  });

  add_fragment("mmd_rbf", 1e-4, seeds_per_op, [](std::mt19937_64& rng) {
    Tensor xs = random_tensor({4, 5}, rng);
    Tensor xt = random_tensor({3, 5}, rng);
    auto fwd = [=] { return mmd_rbf(xs, xt, 1.3); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{{"xs", xs}, {"xt", xt}});
  });

  add_fragment("spatial_attention", 1e-3, 5, [](std::mt19937_64& rng) {
    auto att = std::make_shared<SpatialAttention>();
    att->init(rng, 0.2);
    Tensor x = random_tensor({2, 4, 6, 6}, rng, -2.0, 2.0, false);
    Tensor r = cotangent_for(x, rng);
    auto fwd = [=] { return sum(mul(att->forward(x).weighted, r)); };
    return std::make_pair(std::function<Tensor()>(fwd),
                          std::vector<GradCheckParam>{
                              {"attention.conv.weight", att->conv.weight},
                              {"attention.conv.bias", att->conv.bias}});
  });

  // attention -> GRL -> high-level classifier, eval-mode BN. Parameters in
  // front of the GRL (the attention conv) check out against the negated
  // finite difference; classifier parameters sit behind it.
  add_fragment("maad_branch_composed", 1e-3, 3, [](std::mt19937_64& rng) {
    auto att = std::make_shared<SpatialAttention>();
    att->init(rng, 0.2);
    DomainClassifierConfig cfg;
    cfg.level = DomainClassifierConfig::Level::kHigh;
    cfg.filters = {6, 8, 10, 1};
    auto clf = std::make_shared<DomainClassifier>(6, cfg);
    clf->init(rng);
    Tensor x = random_tensor({2, 6, 8, 8}, rng, -2.0, 2.0, false);
    const std::vector<double> labels{1.0, 0.0};
    auto fwd = [=] {
      Tensor weighted = att->forward(x).weighted;
      Tensor reversed = grl(weighted, 1.0);
      Tensor logits = clf->forward(reversed, false);
      return bce_discriminator_loss(logits, labels);
    };
    std::vector<GradCheckParam> params;
    std::vector<NamedParam> named;
    att->collect("attention", named);
    for (auto& p : named) params.push_back({p.name, p.tensor, -1.0});
    named.clear();
    clf->collect("classifier", named);
    for (auto& p : named) params.push_back({p.name, p.tensor, 1.0});
    return std::make_pair(std::function<Tensor()>(fwd), params);
  });

  std::vector<GradCheckSuiteResult> results;
  for (const auto& frag : fragments) {
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckSuiteResult res;
    res.fragment = frag.name;
    res.tolerance = frag.tolerance;
    res.seeds = frag.seeds;
    res.pass = true;
    for (int s = 0; s < frag.seeds; ++s) {
      std::mt19937_64 rng(seed * 7919 + 31 * s + 1);
      auto [fwd, params] = frag.build(rng);
      GradCheckReport rep = grad_check(fwd, params, frag.tolerance);
      res.max_rel_err = std::max(res.max_rel_err, rep.max_rel_err);
      res.pass = res.pass && rep.pass;
    }
    res.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    results.push_back(std::move(res));
  }
  return results;
}

bool gradcheck_suite_passed(const std::vector<GradCheckSuiteResult>& results) {
  for (const auto& r : results) {
    if (!r.pass) return false;
  }
  return !results.empty();
}

}  // namespace maad
