#include "maad/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace maad {

double oks_scale(const OrientedBox& gt_obb) {
  validate_box(gt_obb);
  return std::sqrt(gt_obb.w * gt_obb.h);
}

namespace {

double similarity_term(double d, double scale, double kappa) {
  const double denom = 2.0 * scale * scale * kappa * kappa;
  return std::exp(-(d * d) / denom);
}

void check_oks_args(size_t pred, size_t gt, double scale, double kappa) {
  if (pred != gt) {
    throw std::invalid_argument("oks: keypoint counts differ, " +
                                std::to_string(pred) + " vs " +
                                std::to_string(gt));
  }
  if (pred == 0) throw std::invalid_argument("oks: no keypoints");
  if (!(scale > 0.0)) throw std::invalid_argument("oks: scale must be > 0");
  if (!(kappa > 0.0)) throw std::invalid_argument("oks: kappa must be > 0");
}

}  // namespace

double oks(const std::vector<Vec2>& pred, const std::vector<Vec2>& gt,
           double scale, const OksConfig& cfg) {
  check_oks_args(pred.size(), gt.size(), scale, cfg.kappa);
  double total = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    total += similarity_term(distance(pred[i], gt[i]), scale, cfg.kappa);
  }
  return total / static_cast<double>(pred.size());
}

SubsetSimilarity poks(const std::vector<Vec2>& pred,
                      const InstanceAnnotation& gt,
                      const KeypointLayout& layout, const OksConfig& cfg) {
  const auto nominal = instance_keypoints(gt, layout);
  const double scale = oks_scale(gt.obb);
  check_oks_args(pred.size(), nominal.size(), scale, cfg.kappa);

  double sum_all = 0.0, sum_stem = 0.0, sum_vein = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const auto& kp = nominal[i];
    const Polyline& line =
        kp.part == PartLabel::kStem ? gt.stem : gt.vein;
    double d = distance(pred[i], kp.p);
    const size_t n_seg = line.points.size() - 1;
    const size_t lo = kp.segment > 0 ? kp.segment - 1 : 0;
    const size_t hi = std::min(kp.segment + 1, n_seg - 1);
    for (size_t s = lo; s <= hi; ++s) {
      const Vec2 proj =
          project_to_segment(pred[i], line.points[s], line.points[s + 1]);
      d = std::min(d, distance(pred[i], proj));
    }
    const double term = similarity_term(d, scale, cfg.kappa);
    sum_all += term;
    if (kp.part == PartLabel::kStem) {
      sum_stem += term;
    } else {
      sum_vein += term;
    }
  }
  SubsetSimilarity out;
  out.all = sum_all / static_cast<double>(pred.size());
  out.stem = layout.stem > 0 ? sum_stem / layout.stem : 0.0;
  out.vein = layout.vein > 0 ? sum_vein / layout.vein : 0.0;
  return out;
}

std::optional<double> average_precision(const std::vector<MatchMatrix>& images,
                                        double threshold) {
  size_t total_gt = 0;
  for (const auto& img : images) {
    if (img.sim.size() != img.scores.size() * img.n_gt) {
      throw std::invalid_argument(
          "average_precision: similarity matrix size mismatch");
    }
    total_gt += img.n_gt;
  }
  if (total_gt == 0) return std::nullopt;

  struct Ranked {
    size_t image;
    size_t det;
    double score;
  };
  std::vector<Ranked> ranked;
  for (size_t i = 0; i < images.size(); ++i) {
    for (size_t d = 0; d < images[i].scores.size(); ++d) {
      ranked.push_back({i, d, images[i].scores[d]});
    }
  }
  // stable: equal scores keep pooled input order
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) {
                     return a.score > b.score;
                   });

  std::vector<std::vector<bool>> matched(images.size());
  for (size_t i = 0; i < images.size(); ++i) {
    matched[i].assign(images[i].n_gt, false);
  }

  std::vector<double> precision, recall;
  precision.reserve(ranked.size());
  recall.reserve(ranked.size());
  size_t tp = 0, fp = 0;
  for (const auto& r : ranked) {
    const auto& img = images[r.image];
    double best_sim = -1.0;
    size_t best_gt = 0;
    for (size_t g = 0; g < img.n_gt; ++g) {
      const double s = img.sim[r.det * img.n_gt + g];
      if (s > best_sim) {  // strict: equal-similarity ties keep the first
        best_sim = s;
        best_gt = g;
      }
    }
    if (img.n_gt > 0 && best_sim >= threshold && !matched[r.image][best_gt]) {
      matched[r.image][best_gt] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  // continuous interpolated integration of the precision-recall curve
  double ap = 0.0;
  double max_p = 0.0;
  for (size_t i = precision.size(); i-- > 0;) {
    max_p = std::max(max_p, precision[i]);
    const double r_lo = i == 0 ? 0.0 : recall[i - 1];
    ap += (recall[i] - r_lo) * max_p;
  }
  return ap;
}

std::optional<double> map_obb(const std::vector<EvalInput>& images,
                              double iou_threshold) {
  std::vector<MatchMatrix> mats;
  mats.reserve(images.size());
  for (const auto& img : images) {
    MatchMatrix m;
    m.n_gt = img.ground_truth.size();
    for (const auto& det : img.detections) m.scores.push_back(det.score);
    m.sim.resize(m.scores.size() * m.n_gt, 0.0);
    for (size_t d = 0; d < img.detections.size(); ++d) {
      for (size_t g = 0; g < m.n_gt; ++g) {
        m.sim[d * m.n_gt + g] =
            obb_iou(img.detections[d].obb, img.ground_truth[g].obb);
      }
    }
    mats.push_back(std::move(m));
  }
  return average_precision(mats, iou_threshold);
}

const std::vector<double>& similarity_thresholds() {
  static const std::vector<double> kThresholds = [] {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
    return t;
  }();
  return kThresholds;
}

KeypointMaps map_keypoints(const std::vector<EvalInput>& images,
                           const KeypointLayout& layout, const OksConfig& cfg) {
  // one similarity matrix set per reported metric; each is matched on itself
  std::vector<MatchMatrix> m_oks(images.size()), m_all(images.size()),
      m_stem(images.size()), m_vein(images.size());
  for (size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    const size_t nd = img.detections.size();
    const size_t ng = img.ground_truth.size();
    for (MatchMatrix* m : {&m_oks[i], &m_all[i], &m_stem[i], &m_vein[i]}) {
      m->n_gt = ng;
      for (const auto& det : img.detections) m->scores.push_back(det.score);
      m->sim.resize(nd * ng, 0.0);
    }
    for (size_t d = 0; d < nd; ++d) {
      for (size_t g = 0; g < ng; ++g) {
        const auto& gt = img.ground_truth[g];
        const auto nominal = instance_keypoints(gt, layout);
        std::vector<Vec2> gt_pts;
        gt_pts.reserve(nominal.size());
        for (const auto& kp : nominal) gt_pts.push_back(kp.p);
        const size_t idx = d * ng + g;
        m_oks[i].sim[idx] =
            oks(img.detections[d].keypoints, gt_pts, oks_scale(gt.obb), cfg);
        const SubsetSimilarity ps =
            poks(img.detections[d].keypoints, gt, layout, cfg);
        m_all[i].sim[idx] = ps.all;
        m_stem[i].sim[idx] = ps.stem;
        m_vein[i].sim[idx] = ps.vein;
      }
    }
  }

  auto mean_ap = [](const std::vector<MatchMatrix>& mats) {
    double total = 0.0;
    for (double thr : similarity_thresholds()) {
      const auto ap = average_precision(mats, thr);
      if (!ap.has_value()) {
        throw std::invalid_argument("map_keypoints: no ground truth instances");
      }
      total += *ap;
    }
    return total / static_cast<double>(similarity_thresholds().size());
  };

  KeypointMaps out;
  out.oks_all = mean_ap(m_oks);
  out.poks_all = mean_ap(m_all);
  out.poks_stem = mean_ap(m_stem);
  out.poks_vein = mean_ap(m_vein);
  return out;
}

EvalMetrics evaluate_detections(const std::vector<EvalInput>& images,
                                const KeypointLayout& layout,
                                const OksConfig& cfg) {
  const auto obb = map_obb(images, 0.5);
  if (!obb.has_value()) {
    throw std::invalid_argument(
        "evaluate_detections: no ground truth instances in the image set");
  }
  const KeypointMaps kp = map_keypoints(images, layout, cfg);
  EvalMetrics out;
  out.map50_obb = *obb;
  out.map5095_oks = kp.oks_all;
  out.map5095_poks_all = kp.poks_all;
  out.map5095_poks_stem = kp.poks_stem;
  out.map5095_poks_vein = kp.poks_vein;
  return out;
}

}  // namespace maad
