#include "maad/adversarial.hpp"

#include <cmath>
#include <stdexcept>

namespace maad {

double GrlConfig::lambda_at(double progress) const {
  if (schedule == Schedule::kConstant) return lambda_p;
  const double p = std::min(std::max(progress, 0.0), 1.0);
  return 2.0 / (1.0 + std::exp(-gamma * p)) - 1.0;
}

SpatialAttention::SpatialAttention()
    : conv(2, 1, 7, 1, Padding2d{3, 3, 3, 3}, true) {}

SpatialAttention::Result SpatialAttention::forward(const Tensor& f) const {
  Tensor pooled = channel_pool(f);
  Tensor m = sigmoid(conv.forward(pooled));
  return Result{m, mul(m, f)};
}

void SpatialAttention::init(std::mt19937_64& rng, double leaky_alpha) {
  init_kaiming_normal(conv.weight, rng, leaky_alpha);
  fill_tensor(conv.bias, 0.0);
}

void SpatialAttention::collect(const std::string& prefix,
                               std::vector<NamedParam>& out) {
  conv.collect(prefix + ".conv", out);
}

void DomainClassifierConfig::validate() const {
  if (filters.size() != 4) {
    throw std::invalid_argument(
        "domain classifier: expected 4 layer filter counts, got " +
        std::to_string(filters.size()));
  }
  for (int64_t f : filters) {
    if (f < 1) {
      throw std::invalid_argument(
          "domain classifier: filter counts must be positive");
    }
  }
  if (filters.back() != 1) {
    throw std::invalid_argument(
        "domain classifier: final layer must have exactly 1 output channel");
  }
  if (!(leaky_relu_alpha > 0.0 && leaky_relu_alpha < 1.0)) {
    throw std::invalid_argument(
        "domain classifier: leaky_relu_alpha must be in (0,1)");
  }
}

DomainClassifier::DomainClassifier(int64_t in_channels,
                                   DomainClassifierConfig config)
    : cfg(std::move(config)) {
  cfg.validate();
  const bool high = cfg.level == DomainClassifierConfig::Level::kHigh;
  // strides (2,2,1,1); layers 3-4 keep the map via total padding 3 (k=4, s=1)
  const int64_t kernel = high ? 4 : 1;
  const int64_t strides[4] = {high ? 2 : 1, high ? 2 : 1, 1, 1};
  const Padding2d halve{1, 1, 1, 1};
  const Padding2d same{1, 2, 1, 2};
  const Padding2d none{0, 0, 0, 0};
  const Padding2d pads[4] = {high ? halve : none, high ? halve : none,
                             high ? same : none, high ? same : none};
  int64_t in_c = in_channels;
  for (int i = 0; i < 4; ++i) {
    convs.emplace_back(in_c, cfg.filters[i], kernel, strides[i], pads[i]);
    in_c = cfg.filters[i];
  }
  bns.emplace_back(cfg.filters[1]);
  bns.emplace_back(cfg.filters[2]);
}

Tensor DomainClassifier::forward(const Tensor& x, bool training) {
  if (cfg.level == DomainClassifierConfig::Level::kHigh &&
      (x.dim(2) < 4 || x.dim(3) < 4)) {
    throw std::invalid_argument(
        "domain classifier: input spatial size " + std::to_string(x.dim(2)) +
        "x" + std::to_string(x.dim(3)) + " is below the 4x4 kernel");
  }
  Tensor h = leaky_relu(convs[0].forward(x), cfg.leaky_relu_alpha);
  h = leaky_relu(bns[0].forward(convs[1].forward(h), training),
                 cfg.leaky_relu_alpha);
  h = leaky_relu(bns[1].forward(convs[2].forward(h), training),
                 cfg.leaky_relu_alpha);
  return convs[3].forward(h);
}

void DomainClassifier::init(std::mt19937_64& rng) {
  for (auto& c : convs) {
    init_kaiming_normal(c.weight, rng, cfg.leaky_relu_alpha);
    fill_tensor(c.bias, 0.0);
  }
  for (auto& bn : bns) {
    fill_tensor(bn.gamma, 1.0);
    fill_tensor(bn.beta, 0.0);
  }
}

void DomainClassifier::collect(const std::string& prefix,
                               std::vector<NamedParam>& out) {
  for (size_t i = 0; i < convs.size(); ++i) {
    convs[i].collect(prefix + ".conv" + std::to_string(i + 1), out);
  }
  for (size_t i = 0; i < bns.size(); ++i) {
    bns[i].collect(prefix + ".bn" + std::to_string(i + 2), out);
  }
}

void DomainClassifier::collect_buffers(const std::string& prefix,
                                       std::vector<NamedBuffer>& out) {
  for (size_t i = 0; i < bns.size(); ++i) {
    bns[i].collect_buffers(prefix + ".bn" + std::to_string(i + 2), out);
  }
}

namespace {

// (N,1,1,1) constant tensor of per-image domain labels, broadcastable
// against (N,1,h,w) logit maps.
Tensor label_tensor(const Tensor& logits, const std::vector<double>& labels,
                    const char* op) {
  if (logits.shape().size() != 4 || logits.dim(1) != 1) {
    throw std::invalid_argument(std::string(op) +
                                ": logits must be (N,1,h,w), got " +
                                shape_str(logits.shape()));
  }
  if (static_cast<int64_t>(labels.size()) != logits.dim(0)) {
    throw std::invalid_argument(
        std::string(op) + ": got " + std::to_string(labels.size()) +
        " labels for " + std::to_string(logits.dim(0)) + " images");
  }
  for (double d : labels) {
    if (d != 0.0 && d != 1.0) {
      throw std::invalid_argument(std::string(op) +
                                  ": domain labels must be 0 or 1");
    }
  }
  NoGradGuard ng;
  return Tensor::from_values({logits.dim(0), 1, 1, 1}, labels);
}

}  // namespace

Tensor bce_discriminator_loss(const Tensor& logits,
                              const std::vector<double>& domain_labels) {
  Tensor d = label_tensor(logits, domain_labels, "bce_discriminator_loss");
  Tensor p = clamp(sigmoid(logits), kBceEps, 1.0 - kBceEps);
  Tensor one_minus_d = add_scalar(neg(d), 1.0);
  Tensor one_minus_p = add_scalar(neg(p), 1.0);
  Tensor ll = add(mul(d, log(p)), mul(one_minus_d, log(one_minus_p)));
  return neg(mean(ll));
}

Tensor lsq_discriminator_loss(const Tensor& logits,
                              const std::vector<double>& domain_labels) {
  Tensor d = label_tensor(logits, domain_labels, "lsq_discriminator_loss");
  Tensor p = sigmoid(logits);
  Tensor one_minus_d = add_scalar(neg(d), 1.0);
  Tensor p_minus_1 = add_scalar(p, -1.0);
  Tensor term =
      add(mul(d, mul(p_minus_1, p_minus_1)), mul(one_minus_d, mul(p, p)));
  return mean(term);
}

void MaadObjectiveConfig::validate() const {
  if (lambda_had < 0.0 || lambda_lad < 0.0) {
    throw std::invalid_argument("maad objective: lambda weights must be >= 0");
  }
}

Tensor maad_objective(const Tensor& l_det, const Tensor& l_haad,
                      const Tensor& l_lad, const MaadObjectiveConfig& cfg) {
  cfg.validate();
  if (!l_det.defined()) {
    throw std::invalid_argument("maad objective: detection loss required");
  }
  Tensor total = l_det;
  if (cfg.enable_had) {
    if (!l_haad.defined()) {
      throw std::invalid_argument(
          "maad objective: HAAD enabled but loss missing");
    }
    total = add(total, scale(l_haad, cfg.lambda_had));
  }
  if (cfg.enable_lad) {
    if (!l_lad.defined()) {
      throw std::invalid_argument(
          "maad objective: LAAD enabled but loss missing");
    }
    total = add(total, scale(l_lad, cfg.lambda_lad));
  }
  return total;
}

}  // namespace maad
