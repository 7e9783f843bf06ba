#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "maad/geometry.hpp"
#include "maad/metrics.hpp"
#include "maad/nn.hpp"

namespace maad {

// conv3x3 -> BN -> ReLU, twice; the stride applies to the first conv.
class ConvBlock {
 public:
  ConvBlock(int64_t in_c, int64_t out_c, int64_t stride);

  Tensor forward(const Tensor& x, bool training);
  void init(std::mt19937_64& rng, double stddev);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);
  void collect_buffers(const std::string& prefix,
                       std::vector<NamedBuffer>& out);

  Conv2d conv1, conv2;
  BatchNorm2d bn1, bn2;
};

struct BackboneConfig {
  std::vector<int64_t> channels = {16, 32, 64};  // one entry per block
};

struct BackboneTaps {
  Tensor low;   // after block 1, input resolution
  Tensor high;  // after the last block, stride 4
};

// Three stacked blocks; blocks 2 and 3 downsample by 2 (output stride 4).
class Backbone {
 public:
  explicit Backbone(BackboneConfig cfg = {});

  BackboneTaps forward(const Tensor& images, bool training);
  void init(std::mt19937_64& rng, double stddev);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);
  void collect_buffers(const std::string& prefix,
                       std::vector<NamedBuffer>& out);

  BackboneConfig cfg;
  std::vector<ConvBlock> blocks;
};

inline constexpr int64_t kFeatureStride = 4;
inline constexpr double kHeatmapBiasInit = -2.19;  // sigmoid(-2.19) ~ 0.1

struct HeadOutputs {
  Tensor center_heatmap;  // N x 1, sigmoid
  Tensor offset;          // N x 2, center sub-cell offset in cells
  Tensor obb;             // N x 4: log w', log h', sin theta, cos theta
  Tensor keypoints;       // N x 2K, offsets from the center in cells
  Tensor kp_heatmap;      // N x 1, sigmoid
};

// Five parallel heads: 3x3 conv trunk -> ReLU -> 1x1 projection each.
class Heads {
 public:
  Heads(int64_t in_c, int64_t trunk_c, const KeypointLayout& layout);

  HeadOutputs forward(const Tensor& f_high) const;
  void init(std::mt19937_64& rng, double stddev);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);

  KeypointLayout layout;
  struct Head {
    Conv2d trunk;
    Conv2d proj;
  };
  Head center, offset, obb, keypoints, kp_heatmap;
};

struct DetectorConfig {
  BackboneConfig backbone;
  int64_t head_channels = 64;
  KeypointLayout keypoints;
};

class Detector {
 public:
  explicit Detector(DetectorConfig cfg = {});

  struct ForwardResult {
    BackboneTaps taps;
    HeadOutputs heads;
  };
  ForwardResult forward(const Tensor& images, bool training);
  BackboneTaps forward_taps(const Tensor& images, bool training);

  // Backbone and head weights from N(0, stddev); all biases zero except the
  // two heatmap projections, which start at the focal-loss prior.
  void init(std::mt19937_64& rng, double stddev = 0.001);
  void collect(std::vector<NamedParam>& out);
  void collect_buffers(std::vector<NamedBuffer>& out);

  DetectorConfig cfg;
  Backbone backbone;
  Heads heads;
};

// CenterNet-style radius: the largest integer radius keeping IoU >=
// min_overlap for a (w, h) box under corner jitter.
double gaussian_radius(double width, double height, double min_overlap = 0.3);

struct EncodedTargets {
  int64_t h = 0, w = 0, k = 0;
  std::vector<double> center_heatmap;  // h*w, peak cells exactly 1
  std::vector<double> kp_heatmap;      // h*w
  std::vector<double> offset;          // 2*h*w, valid at masked cells
  std::vector<double> obb;             // 4*h*w
  std::vector<double> keypoints;       // 2K*h*w
  std::vector<double> mask;            // h*w, 1 at instance center cells
  int64_t center_peaks = 0;            // cells that hold an exact 1
  int64_t kp_peaks = 0;
};

EncodedTargets encode_targets(const std::vector<InstanceAnnotation>& instances,
                              int64_t image_w, int64_t image_h,
                              const KeypointLayout& layout);

struct StackedTargets {
  Tensor center_heatmap;  // constants; never require grad
  Tensor kp_heatmap;
  Tensor offset;
  Tensor obb;
  Tensor keypoints;
  Tensor mask;
  int64_t center_peaks = 0;
  int64_t kp_peaks = 0;
};

StackedTargets stack_targets(const std::vector<EncodedTargets>& targets);

// Penalty-reduced focal loss (alpha=2, beta=4), normalized by
// max(1, num_peaks). pred must come from a sigmoid.
Tensor focal_loss(const Tensor& pred, const Tensor& gt, int64_t num_peaks);

// sum of |pred - target| over masked cells (all channels), divided by
// max(1, number of masked cells). mask is (N,1,h,w).
Tensor l1_masked_loss(const Tensor& pred, const Tensor& target,
                      const Tensor& mask);

struct DetectionLossWeights {
  double cp = 1.0;
  double off = 1.0;
  double kp = 0.1;
  double kphm = 1.0;
  double obb = 0.1;
  void validate() const;
};

struct DetectionLossTerms {
  Tensor total;
  Tensor cp, off, kp, kphm, obb;
};

DetectionLossTerms detection_loss(const HeadOutputs& outputs,
                                  const StackedTargets& targets,
                                  const DetectionLossWeights& weights);

struct DecodeConfig {
  double score_threshold = 0.25;
  int64_t top_k = 32;
  bool snap_keypoints = false;    // refine via the keypoint heatmap
  double snap_radius_cells = 2.0;
  double snap_min_score = 0.25;
};

// Peaks = cells equal to their 3x3 neighborhood max and above the score
// threshold, best top_k by score. image_index selects the batch element.
std::vector<Detection> decode_detections(const HeadOutputs& outputs,
                                         int64_t image_index,
                                         const DecodeConfig& cfg);

}  // namespace maad
