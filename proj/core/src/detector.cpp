#include "maad/detector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace maad {
namespace {

constexpr double kHeatmapEps = 1e-7;

int64_t feature_index(int64_t c, int64_t y, int64_t x, int64_t h, int64_t w) {
  return (c * h + y) * w + x;
}

}  // namespace

ConvBlock::ConvBlock(int64_t in_c, int64_t out_c, int64_t stride)
    : conv1(in_c, out_c, 3, stride, Padding2d{1, 1, 1, 1}),
      conv2(out_c, out_c, 3, 1, Padding2d{1, 1, 1, 1}),
      bn1(out_c),
      bn2(out_c) {}

Tensor ConvBlock::forward(const Tensor& x, bool training) {
  Tensor y = relu(bn1.forward(conv1.forward(x), training));
  return relu(bn2.forward(conv2.forward(y), training));
}

void ConvBlock::init(std::mt19937_64& rng, double stddev) {
  init_normal(conv1.weight, rng, stddev);
  fill_tensor(conv1.bias, 0.0);
  init_normal(conv2.weight, rng, stddev);
  fill_tensor(conv2.bias, 0.0);
  fill_tensor(bn1.gamma, 1.0);
  fill_tensor(bn1.beta, 0.0);
  fill_tensor(bn2.gamma, 1.0);
  fill_tensor(bn2.beta, 0.0);
}

void ConvBlock::collect(const std::string& prefix,
                        std::vector<NamedParam>& out) {
  conv1.collect(prefix + ".conv1", out);
  bn1.collect(prefix + ".bn1", out);
  conv2.collect(prefix + ".conv2", out);
  bn2.collect(prefix + ".bn2", out);
}

void ConvBlock::collect_buffers(const std::string& prefix,
                                std::vector<NamedBuffer>& out) {
  bn1.collect_buffers(prefix + ".bn1", out);
  bn2.collect_buffers(prefix + ".bn2", out);
}

Backbone::Backbone(BackboneConfig cfg_in) : cfg(std::move(cfg_in)) {
  if (cfg.channels.empty()) {
    throw std::invalid_argument("backbone: empty channel plan");
  }
  int64_t in_c = 3;
  for (size_t i = 0; i < cfg.channels.size(); ++i) {
    const int64_t stride = i == 0 ? 1 : 2;
    blocks.emplace_back(in_c, cfg.channels[i], stride);
    in_c = cfg.channels[i];
  }
}

BackboneTaps Backbone::forward(const Tensor& images, bool training) {
  if (images.shape().size() != 4 || images.dim(1) != 3) {
    throw std::invalid_argument("backbone: expected N x 3 x H x W input");
  }
  const int64_t down = int64_t(1) << (blocks.size() - 1);
  if (images.dim(2) % down != 0 || images.dim(3) % down != 0) {
    throw std::invalid_argument(
        "backbone: spatial dims must be divisible by the output stride");
  }
  BackboneTaps taps;
  Tensor x = images;
  for (size_t i = 0; i < blocks.size(); ++i) {
    x = blocks[i].forward(x, training);
    if (i == 0) taps.low = x;
  }
  taps.high = x;
  return taps;
}

void Backbone::init(std::mt19937_64& rng, double stddev) {
  for (auto& b : blocks) b.init(rng, stddev);
}

void Backbone::collect(const std::string& prefix,
                       std::vector<NamedParam>& out) {
  for (size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect(prefix + ".block" + std::to_string(i + 1), out);
  }
}

void Backbone::collect_buffers(const std::string& prefix,
                               std::vector<NamedBuffer>& out) {
  for (size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect_buffers(prefix + ".block" + std::to_string(i + 1), out);
  }
}

Heads::Heads(int64_t in_c, int64_t trunk_c, const KeypointLayout& layout_in)
    : layout(layout_in),
      center{Conv2d(in_c, trunk_c, 3, 1, Padding2d{1, 1, 1, 1}),
             Conv2d(trunk_c, 1, 1, 1, Padding2d{})},
      offset{Conv2d(in_c, trunk_c, 3, 1, Padding2d{1, 1, 1, 1}),
             Conv2d(trunk_c, 2, 1, 1, Padding2d{})},
      obb{Conv2d(in_c, trunk_c, 3, 1, Padding2d{1, 1, 1, 1}),
          Conv2d(trunk_c, 4, 1, 1, Padding2d{})},
      keypoints{Conv2d(in_c, trunk_c, 3, 1, Padding2d{1, 1, 1, 1}),
                Conv2d(trunk_c, 2 * int64_t(layout_in.total()), 1, 1,
                       Padding2d{})},
      kp_heatmap{Conv2d(in_c, trunk_c, 3, 1, Padding2d{1, 1, 1, 1}),
                 Conv2d(trunk_c, 1, 1, 1, Padding2d{})} {}

HeadOutputs Heads::forward(const Tensor& f_high) const {
  auto run = [&](const Head& head) {
    return head.proj.forward(relu(head.trunk.forward(f_high)));
  };
  HeadOutputs out;
  out.center_heatmap = sigmoid(run(center));
  out.offset = run(offset);
  out.obb = run(obb);
  out.keypoints = run(keypoints);
  out.kp_heatmap = sigmoid(run(kp_heatmap));
  return out;
}

void Heads::init(std::mt19937_64& rng, double stddev) {
  auto init_head = [&](Head& head, bool heatmap) {
    init_normal(head.trunk.weight, rng, stddev);
    fill_tensor(head.trunk.bias, 0.0);
    init_normal(head.proj.weight, rng, stddev);
    fill_tensor(head.proj.bias, heatmap ? kHeatmapBiasInit : 0.0);
  };
  init_head(center, true);
  init_head(offset, false);
  init_head(obb, false);
  init_head(keypoints, false);
  init_head(kp_heatmap, true);
}

void Heads::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  auto collect_head = [&](Head& head, const std::string& name) {
    head.trunk.collect(prefix + "." + name + ".trunk", out);
    head.proj.collect(prefix + "." + name + ".proj", out);
  };
  collect_head(center, "center");
  collect_head(offset, "offset");
  collect_head(obb, "obb");
  collect_head(keypoints, "keypoints");
  collect_head(kp_heatmap, "kp_heatmap");
}

Detector::Detector(DetectorConfig cfg_in)
    : cfg(std::move(cfg_in)),
      backbone(cfg.backbone),
      heads(cfg.backbone.channels.back(), cfg.head_channels, cfg.keypoints) {
  if (cfg.head_channels <= 0) {
    throw std::invalid_argument("detector: head_channels must be positive");
  }
}

Detector::ForwardResult Detector::forward(const Tensor& images,
                                          bool training) {
  ForwardResult result;
  result.taps = backbone.forward(images, training);
  result.heads = heads.forward(result.taps.high);
  return result;
}

BackboneTaps Detector::forward_taps(const Tensor& images, bool training) {
  return backbone.forward(images, training);
}

void Detector::init(std::mt19937_64& rng, double stddev) {
  backbone.init(rng, stddev);
  heads.init(rng, stddev);
}

void Detector::collect(std::vector<NamedParam>& out) {
  backbone.collect("det.backbone", out);
  heads.collect("det.heads", out);
}

void Detector::collect_buffers(std::vector<NamedBuffer>& out) {
  backbone.collect_buffers("det.backbone", out);
}

double gaussian_radius(double width, double height, double min_overlap) {
  if (width <= 0.0 || height <= 0.0) {
    throw std::invalid_argument("gaussian_radius: nonpositive box size");
  }
  if (min_overlap <= 0.0 || min_overlap >= 1.0) {
    throw std::invalid_argument("gaussian_radius: overlap must be in (0,1)");
  }
  // Case 1: whole box shifts diagonally by r; overlap (w-r)(h-r) against the
  // union 2wh - overlap.
  const double a1 = 1.0;
  const double b1 = height + width;
  const double c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
  const double r1 = (b1 - std::sqrt(b1 * b1 - 4.0 * a1 * c1)) / (2.0 * a1);
  // Case 2: both corners move inward by r (shrunk box over original).
  const double a2 = 4.0;
  const double b2 = 2.0 * (height + width);
  const double c2 = (1.0 - min_overlap) * width * height;
  const double r2 = (b2 - std::sqrt(b2 * b2 - 4.0 * a2 * c2)) / (2.0 * a2);
  // Case 3: both corners move outward by r (original over grown box).
  const double a3 = 4.0 * min_overlap;
  const double b3 = -2.0 * min_overlap * (height + width);
  const double c3 = (min_overlap - 1.0) * width * height;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4.0 * a3 * c3)) / (2.0 * a3);
  return std::min({r1, r2, r3});
}

namespace {

// Max-merge an unnormalized Gaussian centered on (cx, cy); the center cell
// lands exactly on the peak, so it holds exactly 1.
void splat_gaussian(std::vector<double>& map, int64_t h, int64_t w, int64_t cx,
                    int64_t cy, int64_t radius) {
  const double sigma = (2.0 * double(radius) + 1.0) / 6.0;
  const double denom = 2.0 * sigma * sigma;
  for (int64_t dy = -radius; dy <= radius; ++dy) {
    const int64_t y = cy + dy;
    if (y < 0 || y >= h) continue;
    for (int64_t dx = -radius; dx <= radius; ++dx) {
      const int64_t x = cx + dx;
      if (x < 0 || x >= w) continue;
      const double v = std::exp(-double(dx * dx + dy * dy) / denom);
      double& cell = map[size_t(y * w + x)];
      cell = std::max(cell, v);
    }
  }
}

int64_t count_unit_peaks(const std::vector<double>& map) {
  int64_t n = 0;
  for (double v : map) {
    if (v == 1.0) ++n;
  }
  return n;
}

void check_inside(Vec2 p, int64_t image_w, int64_t image_h) {
  if (p.x < 0.0 || p.x >= double(image_w) || p.y < 0.0 ||
      p.y >= double(image_h)) {
    throw std::invalid_argument("encode_targets: coordinate outside image");
  }
}

}  // namespace

EncodedTargets encode_targets(const std::vector<InstanceAnnotation>& instances,
                              int64_t image_w, int64_t image_h,
                              const KeypointLayout& layout) {
  if (image_w <= 0 || image_h <= 0 || image_w % kFeatureStride != 0 ||
      image_h % kFeatureStride != 0) {
    throw std::invalid_argument(
        "encode_targets: image dims must be positive multiples of the stride");
  }
  EncodedTargets t;
  t.w = image_w / kFeatureStride;
  t.h = image_h / kFeatureStride;
  t.k = layout.total();
  const size_t cells = size_t(t.h * t.w);
  t.center_heatmap.assign(cells, 0.0);
  t.kp_heatmap.assign(cells, 0.0);
  t.offset.assign(2 * cells, 0.0);
  t.obb.assign(4 * cells, 0.0);
  t.keypoints.assign(size_t(2 * t.k) * cells, 0.0);
  t.mask.assign(cells, 0.0);

  for (const auto& inst : instances) {
    validate_annotation(inst);
    check_inside({inst.obb.cx, inst.obb.cy}, image_w, image_h);
    for (const auto* line : {&inst.stem, &inst.vein}) {
      for (Vec2 p : line->points) check_inside(p, image_w, image_h);
    }

    const double fx = inst.obb.cx / double(kFeatureStride);
    const double fy = inst.obb.cy / double(kFeatureStride);
    const int64_t cx = int64_t(std::floor(fx));
    const int64_t cy = int64_t(std::floor(fy));

    const double r = gaussian_radius(inst.obb.w / double(kFeatureStride),
                                     inst.obb.h / double(kFeatureStride));
    const int64_t ri = std::max<int64_t>(0, int64_t(std::floor(r)));
    splat_gaussian(t.center_heatmap, t.h, t.w, cx, cy, ri);

    const size_t cell = size_t(feature_index(0, cy, cx, t.h, t.w));
    t.mask[cell] = 1.0;
    t.offset[size_t(feature_index(0, cy, cx, t.h, t.w))] = fx - double(cx);
    t.offset[size_t(feature_index(1, cy, cx, t.h, t.w))] = fy - double(cy);
    t.obb[size_t(feature_index(0, cy, cx, t.h, t.w))] =
        std::log(inst.obb.w / double(kFeatureStride));
    t.obb[size_t(feature_index(1, cy, cx, t.h, t.w))] =
        std::log(inst.obb.h / double(kFeatureStride));
    t.obb[size_t(feature_index(2, cy, cx, t.h, t.w))] = std::sin(inst.obb.theta);
    t.obb[size_t(feature_index(3, cy, cx, t.h, t.w))] = std::cos(inst.obb.theta);

    const auto kps = instance_keypoints(inst, layout);
    for (size_t i = 0; i < kps.size(); ++i) {
      const Vec2 p = kps[i].p;
      t.keypoints[size_t(feature_index(int64_t(2 * i), cy, cx, t.h, t.w))] =
          (p.x - inst.obb.cx) / double(kFeatureStride);
      t.keypoints[size_t(feature_index(int64_t(2 * i + 1), cy, cx, t.h, t.w))] =
          (p.y - inst.obb.cy) / double(kFeatureStride);
      const int64_t kx = int64_t(std::floor(p.x / double(kFeatureStride)));
      const int64_t ky = int64_t(std::floor(p.y / double(kFeatureStride)));
      splat_gaussian(t.kp_heatmap, t.h, t.w, kx, ky, ri);
    }
  }

  t.center_peaks = count_unit_peaks(t.center_heatmap);
  t.kp_peaks = count_unit_peaks(t.kp_heatmap);
  return t;
}

StackedTargets stack_targets(const std::vector<EncodedTargets>& targets) {
  if (targets.empty()) {
    throw std::invalid_argument("stack_targets: empty batch");
  }
  const int64_t h = targets.front().h;
  const int64_t w = targets.front().w;
  const int64_t k = targets.front().k;
  for (const auto& t : targets) {
    if (t.h != h || t.w != w || t.k != k) {
      throw std::invalid_argument("stack_targets: inconsistent target shapes");
    }
  }
  const int64_t n = int64_t(targets.size());
  auto stack = [&](std::vector<double> EncodedTargets::* field, int64_t c) {
    std::vector<double> flat;
    flat.reserve(size_t(n * c * h * w));
    for (const auto& t : targets) {
      const auto& src = t.*field;
      flat.insert(flat.end(), src.begin(), src.end());
    }
    return Tensor::from_values({n, c, h, w}, std::move(flat));
  };
  StackedTargets s;
  s.center_heatmap = stack(&EncodedTargets::center_heatmap, 1);
  s.kp_heatmap = stack(&EncodedTargets::kp_heatmap, 1);
  s.offset = stack(&EncodedTargets::offset, 2);
  s.obb = stack(&EncodedTargets::obb, 4);
  s.keypoints = stack(&EncodedTargets::keypoints, 2 * k);
  s.mask = stack(&EncodedTargets::mask, 1);
  for (const auto& t : targets) {
    s.center_peaks += t.center_peaks;
    s.kp_peaks += t.kp_peaks;
  }
  return s;
}

Tensor focal_loss(const Tensor& pred, const Tensor& gt, int64_t num_peaks) {
  if (pred.shape() != gt.shape()) {
    throw std::invalid_argument("focal_loss: shape mismatch");
  }
  const auto& g = gt.values();
  std::vector<double> pos_mask(g.size()), neg_weight(g.size());
  for (size_t i = 0; i < g.size(); ++i) {
    if (g[i] < 0.0 || g[i] > 1.0) {
      throw std::invalid_argument("focal_loss: gt outside [0,1]");
    }
    const bool peak = g[i] == 1.0;
    pos_mask[i] = peak ? 1.0 : 0.0;
    const double m = 1.0 - g[i];
    neg_weight[i] = peak ? 0.0 : m * m * m * m;
  }
  Tensor mp = Tensor::from_values(pred.shape(), std::move(pos_mask));
  Tensor wn = Tensor::from_values(pred.shape(), std::move(neg_weight));

  Tensor p = clamp(pred, kHeatmapEps, 1.0 - kHeatmapEps);
  Tensor one_minus_p = add_scalar(neg(p), 1.0);
  Tensor pos = mul(mp, mul(mul(one_minus_p, one_minus_p), log(p)));
  Tensor negt = mul(wn, mul(mul(p, p), log(one_minus_p)));
  const double norm = double(std::max<int64_t>(1, num_peaks));
  return scale(sum(add(pos, negt)), -1.0 / norm);
}

Tensor l1_masked_loss(const Tensor& pred, const Tensor& target,
                      const Tensor& mask) {
  if (pred.shape() != target.shape()) {
    throw std::invalid_argument("l1_masked_loss: pred/target shape mismatch");
  }
  if (mask.shape().size() != 4 || mask.dim(0) != pred.dim(0) ||
      mask.dim(1) != 1 || mask.dim(2) != pred.dim(2) ||
      mask.dim(3) != pred.dim(3)) {
    throw std::invalid_argument("l1_masked_loss: mask must be N x 1 x h x w");
  }
  double count = 0.0;
  for (double v : mask.values()) count += v;
  Tensor total = sum(mul(abs(sub(pred, target)), mask));
  return scale(total, 1.0 / std::max(1.0, count));
}

void DetectionLossWeights::validate() const {
  if (cp < 0.0 || off < 0.0 || kp < 0.0 || kphm < 0.0 || obb < 0.0) {
    throw std::invalid_argument("detection loss weights must be >= 0");
  }
}

DetectionLossTerms detection_loss(const HeadOutputs& outputs,
                                  const StackedTargets& targets,
                                  const DetectionLossWeights& weights) {
  weights.validate();
  DetectionLossTerms t;
  t.cp = focal_loss(outputs.center_heatmap, targets.center_heatmap,
                    targets.center_peaks);
  t.off = l1_masked_loss(outputs.offset, targets.offset, targets.mask);
  t.kp = l1_masked_loss(outputs.keypoints, targets.keypoints, targets.mask);
  t.kphm = focal_loss(outputs.kp_heatmap, targets.kp_heatmap, targets.kp_peaks);
  t.obb = l1_masked_loss(outputs.obb, targets.obb, targets.mask);
  t.total = add(
      add(add(scale(t.cp, weights.cp), scale(t.off, weights.off)),
          add(scale(t.kp, weights.kp), scale(t.kphm, weights.kphm))),
      scale(t.obb, weights.obb));
  return t;
}

namespace {

struct Peak {
  double score;
  int64_t y, x;
};

// Cells matching their 3x3 neighborhood max (border-clamped) at or above the
// threshold, in row-major order.
std::vector<Peak> local_maxima(const std::vector<double>& map, int64_t h,
                               int64_t w, double threshold) {
  std::vector<Peak> peaks;
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const double v = map[size_t(y * w + x)];
      if (v < threshold) continue;
      bool is_max = true;
      for (int64_t dy = -1; dy <= 1 && is_max; ++dy) {
        for (int64_t dx = -1; dx <= 1 && is_max; ++dx) {
          const int64_t ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          if (map[size_t(ny * w + nx)] > v) is_max = false;
        }
      }
      if (is_max) peaks.push_back({v, y, x});
    }
  }
  return peaks;
}

}  // namespace

std::vector<Detection> decode_detections(const HeadOutputs& outputs,
                                         int64_t image_index,
                                         const DecodeConfig& cfg) {
  const Tensor& hm = outputs.center_heatmap;
  if (hm.shape().size() != 4 || image_index < 0 || image_index >= hm.dim(0)) {
    throw std::invalid_argument("decode_detections: bad image index");
  }
  if (cfg.top_k <= 0) {
    throw std::invalid_argument("decode_detections: top_k must be positive");
  }
  const int64_t h = hm.dim(2);
  const int64_t w = hm.dim(3);
  const int64_t k = outputs.keypoints.dim(1) / 2;
  const size_t plane = size_t(h * w);

  auto channel = [&](const Tensor& t, int64_t c) {
    const double* base = t.values().data();
    return base + size_t((image_index * t.dim(1) + c) * h * w);
  };

  std::vector<double> hm_plane(channel(hm, 0), channel(hm, 0) + plane);
  auto peaks = local_maxima(hm_plane, h, w, cfg.score_threshold);
  std::stable_sort(peaks.begin(), peaks.end(),
                   [](const Peak& a, const Peak& b) { return a.score > b.score; });
  if (int64_t(peaks.size()) > cfg.top_k) peaks.resize(size_t(cfg.top_k));

  std::vector<Peak> kp_peaks;
  if (cfg.snap_keypoints) {
    std::vector<double> kp_plane(channel(outputs.kp_heatmap, 0),
                                 channel(outputs.kp_heatmap, 0) + plane);
    kp_peaks = local_maxima(kp_plane, h, w, cfg.snap_min_score);
  }

  const double s = double(kFeatureStride);
  std::vector<Detection> out;
  out.reserve(peaks.size());
  for (const auto& pk : peaks) {
    const size_t cell = size_t(pk.y * w + pk.x);
    Detection det;
    det.score = pk.score;
    const double ox = channel(outputs.offset, 0)[cell];
    const double oy = channel(outputs.offset, 1)[cell];
    det.obb.cx = (double(pk.x) + ox) * s;
    det.obb.cy = (double(pk.y) + oy) * s;
    det.obb.w = std::exp(channel(outputs.obb, 0)[cell]) * s;
    det.obb.h = std::exp(channel(outputs.obb, 1)[cell]) * s;
    det.obb.theta = normalize_angle(std::atan2(channel(outputs.obb, 2)[cell],
                                               channel(outputs.obb, 3)[cell]));
    det.keypoints.resize(size_t(k));
    for (int64_t i = 0; i < k; ++i) {
      Vec2 p{det.obb.cx + channel(outputs.keypoints, 2 * i)[cell] * s,
             det.obb.cy + channel(outputs.keypoints, 2 * i + 1)[cell] * s};
      if (cfg.snap_keypoints) {
        // Nearest qualifying heatmap peak within the snap radius, measured in
        // cells from the regressed position to the peak's cell center.
        const Vec2 f{p.x / s, p.y / s};
        const Peak* best = nullptr;
        double best_d = cfg.snap_radius_cells;
        for (const auto& q : kp_peaks) {
          const Vec2 c{double(q.x) + 0.5, double(q.y) + 0.5};
          const double d = distance(f, c);
          if (d <= best_d && (best == nullptr || d < best_d)) {
            best = &q;
            best_d = d;
          }
        }
        if (best != nullptr) {
          p = {(double(best->x) + 0.5) * s, (double(best->y) + 0.5) * s};
        }
      }
      det.keypoints[size_t(i)] = p;
    }
    out.push_back(std::move(det));
  }
  return out;
}

}  // namespace maad
