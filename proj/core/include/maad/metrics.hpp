#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "maad/geometry.hpp"

namespace maad {

struct Detection {
  double score = 0.0;
  OrientedBox obb;
  std::vector<Vec2> keypoints;  // KeypointLayout order: stem first, then vein
};

struct OksConfig {
  double kappa = 0.1;  // uniform per-keypoint constant
};

// Object scale s = sqrt(ground-truth box area).
double oks_scale(const OrientedBox& gt_obb);

// Mean over keypoints of exp(-d_i^2 / (2 s^2 kappa^2)).
double oks(const std::vector<Vec2>& pred, const std::vector<Vec2>& gt,
           double scale, const OksConfig& cfg);

struct SubsetSimilarity {
  double all = 0.0;
  double stem = 0.0;
  double vein = 0.0;
};

// Projected OKS: each predicted keypoint measures distance to the nearer of
// its nominal ground-truth keypoint and the clamped projections onto the
// polyline segments adjacent to that keypoint (the containing segment and its
// immediate neighbors). Never smaller than plain OKS.
SubsetSimilarity poks(const std::vector<Vec2>& pred,
                      const InstanceAnnotation& gt,
                      const KeypointLayout& layout, const OksConfig& cfg);

// One evaluated image: detections with scores, ground-truth instances.
struct EvalInput {
  std::vector<Detection> detections;
  std::vector<InstanceAnnotation> ground_truth;
};

// Per-image match inputs for AP: detection scores plus the detection x GT
// similarity matrix (IoU or keypoint similarity), row-major.
struct MatchMatrix {
  std::vector<double> scores;
  size_t n_gt = 0;
  std::vector<double> sim;
};

// VOC-style AP: detections pooled across images and ranked by score (ties by
// input order), each matched greedily to its best-similarity ground truth,
// one match per ground truth; continuous interpolated precision-recall
// integration. nullopt when the image set has no ground truth.
std::optional<double> average_precision(const std::vector<MatchMatrix>& images,
                                        double threshold);

std::optional<double> map_obb(const std::vector<EvalInput>& images,
                              double iou_threshold = 0.5);

// 0.50, 0.55, ..., 0.95.
const std::vector<double>& similarity_thresholds();

struct KeypointMaps {
  double oks_all = 0.0;
  double poks_all = 0.0;
  double poks_stem = 0.0;
  double poks_vein = 0.0;
};

// Mean AP over the similarity thresholds; each subset is matched on its own
// similarity. Requires at least one ground-truth instance.
KeypointMaps map_keypoints(const std::vector<EvalInput>& images,
                           const KeypointLayout& layout, const OksConfig& cfg);

struct EvalMetrics {
  double map50_obb = 0.0;  // all values in [0,1]; reports scale by 100
  double map5095_oks = 0.0;
  double map5095_poks_all = 0.0;
  double map5095_poks_stem = 0.0;
  double map5095_poks_vein = 0.0;
};

EvalMetrics evaluate_detections(const std::vector<EvalInput>& images,
                                const KeypointLayout& layout,
                                const OksConfig& cfg);

}  // namespace maad
