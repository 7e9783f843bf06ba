#pragma once

#include <random>
#include <string>
#include <vector>

#include "maad/nn.hpp"

namespace maad {

struct GrlConfig {
  enum class Schedule { kConstant, kDannRamp };
  Schedule schedule = Schedule::kConstant;
  double lambda_p = 1.0;  // constant schedule value
  double gamma = 10.0;    // dann_ramp steepness
  // progress is the completed fraction of training in [0,1]
  double lambda_at(double progress) const;
};

// Attention map M = sigmoid(conv7x7([avg-pool; max-pool])) applied to the
// feature map as a per-pixel Hadamard weight.
class SpatialAttention {
 public:
  SpatialAttention();

  struct Result {
    Tensor attention;  // N x 1 x H x W, entries in (0,1)
    Tensor weighted;   // M broadcast over channels, times input
  };
  Result forward(const Tensor& f) const;

  void init(std::mt19937_64& rng, double leaky_alpha);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);

  Conv2d conv;  // 2 -> 1, kernel 7, stride 1, padding 3
};

struct DomainClassifierConfig {
  enum class Level { kHigh, kLow };
  Level level = Level::kHigh;
  std::vector<int64_t> filters = {128, 256, 512, 1};
  double leaky_relu_alpha = 0.2;
  void validate() const;
};

// Four fully convolutional layers; leaky ReLU after layers 1-3, batch norm
// after layers 2-3, raw logits out. The high-level variant uses 4x4 kernels
// with strides (2,2,1,1): layers 1-2 halve the map, layers 3-4 preserve it
// via same-padding. The low-level variant is all 1x1 stride-1 convs.
class DomainClassifier {
 public:
  DomainClassifier(int64_t in_channels, DomainClassifierConfig cfg);

  Tensor forward(const Tensor& x, bool training);

  void init(std::mt19937_64& rng);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);
  void collect_buffers(const std::string& prefix,
                       std::vector<NamedBuffer>& out);

  DomainClassifierConfig cfg;
  std::vector<Conv2d> convs;
  std::vector<BatchNorm2d> bns;  // bns[0] after convs[1], bns[1] after convs[2]
};

inline constexpr double kBceEps = 1e-7;

// Mean over images and pixels of -[d log p + (1-d) log(1-p)] with
// p = sigmoid(logit) clamped to [kBceEps, 1-kBceEps]. domain_labels holds one
// 0/1 entry per image.
Tensor bce_discriminator_loss(const Tensor& logits,
                              const std::vector<double>& domain_labels);

// Mean over images and pixels of d (p-1)^2 + (1-d) p^2 with p = sigmoid(logit).
Tensor lsq_discriminator_loss(const Tensor& logits,
                              const std::vector<double>& domain_labels);

struct MaadObjectiveConfig {
  double lambda_had = 0.001;
  double lambda_lad = 0.0001;
  bool enable_had = true;
  bool enable_lad = true;
  bool enable_grl = true;
  bool enable_attention = true;
  void validate() const;
};

// total = l_det + lambda_had * l_haad + lambda_lad * l_lad, with disabled
// terms contributing exactly zero and no gradients. Disabled terms may be
// passed as undefined tensors.
Tensor maad_objective(const Tensor& l_det, const Tensor& l_haad,
                      const Tensor& l_lad, const MaadObjectiveConfig& cfg);

}  // namespace maad
