#include "maad/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace maad {

namespace {
constexpr double kPi = std::numbers::pi;
}

double norm(Vec2 v) { return std::hypot(v.x, v.y); }
double distance(Vec2 a, Vec2 b) { return norm(a - b); }

double normalize_angle(double theta) {
  double t = std::fmod(theta + kPi, 2.0 * kPi);
  if (t <= 0.0) t += 2.0 * kPi;
  return t - kPi;
}

void validate_box(const OrientedBox& b) {
  if (!(b.w > 0.0) || !(b.h > 0.0)) {
    throw std::invalid_argument("oriented box: w and h must be > 0, got w=" +
                                std::to_string(b.w) + " h=" +
                                std::to_string(b.h));
  }
  if (!std::isfinite(b.cx) || !std::isfinite(b.cy) || !std::isfinite(b.theta)) {
    throw std::invalid_argument("oriented box: non-finite field");
  }
}

Polygon obb_to_polygon(const OrientedBox& b) {
  validate_box(b);
  const double c = std::cos(b.theta);
  const double s = std::sin(b.theta);
  const double hw = 0.5 * b.w;
  const double hh = 0.5 * b.h;
  // counter-clockwise in the (x right, y up) sense; rotation preserves order
  const Vec2 local[4] = {{-hw, -hh}, {hw, -hh}, {hw, hh}, {-hw, hh}};
  Polygon out;
  out.reserve(4);
  for (const Vec2& l : local) {
    out.push_back({b.cx + c * l.x - s * l.y, b.cy + s * l.x + c * l.y});
  }
  return out;
}

double polygon_area(const Polygon& p) {
  if (p.size() < 3) return 0.0;
  double twice = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const Vec2& a = p[i];
    const Vec2& b = p[(i + 1) % p.size()];
    twice += cross(a, b);
  }
  return 0.5 * twice;
}

double convex_intersection_area(const Polygon& p, const Polygon& q) {
  if (p.size() < 3 || q.size() < 3) return 0.0;
  Polygon subject = p;
  for (size_t i = 0; i < q.size() && !subject.empty(); ++i) {
    const Vec2 a = q[i];
    const Vec2 b = q[(i + 1) % q.size()];
    const Vec2 edge = b - a;
    Polygon next;
    next.reserve(subject.size() + 1);
    for (size_t j = 0; j < subject.size(); ++j) {
      const Vec2 cur = subject[j];
      const Vec2 nxt = subject[(j + 1) % subject.size()];
      const double side_cur = cross(edge, cur - a);
      const double side_nxt = cross(edge, nxt - a);
      if (side_cur >= 0.0) next.push_back(cur);
      if ((side_cur > 0.0 && side_nxt < 0.0) ||
          (side_cur < 0.0 && side_nxt > 0.0)) {
        const double t = side_cur / (side_cur - side_nxt);
        next.push_back(cur + t * (nxt - cur));
      }
    }
    subject = std::move(next);
  }
  const double area = subject.size() < 3 ? 0.0 : polygon_area(subject);
  return std::max(area, 0.0);
}

double obb_iou(const OrientedBox& a, const OrientedBox& b) {
  const Polygon pa = obb_to_polygon(a);
  const Polygon pb = obb_to_polygon(b);
  const double inter = convex_intersection_area(pa, pb);
  const double uni = a.w * a.h + b.w * b.h - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

void validate_polyline(const Polyline& p) {
  if (p.points.size() < 2) {
    throw std::invalid_argument("polyline: needs at least 2 points, got " +
                                std::to_string(p.points.size()));
  }
  for (size_t i = 0; i + 1 < p.points.size(); ++i) {
    if (distance(p.points[i], p.points[i + 1]) <= 0.0) {
      throw std::invalid_argument(
          "polyline: consecutive duplicate point at index " +
          std::to_string(i));
    }
  }
}

double polyline_length(const Polyline& p) {
  validate_polyline(p);
  double total = 0.0;
  for (size_t i = 0; i + 1 < p.points.size(); ++i) {
    total += distance(p.points[i], p.points[i + 1]);
  }
  return total;
}

std::vector<PolylinePoint> resample_polyline(const Polyline& line, int n) {
  validate_polyline(line);
  if (n < 2) {
    throw std::invalid_argument("resample_polyline: need n >= 2, got " +
                                std::to_string(n));
  }
  const auto& pts = line.points;
  std::vector<double> cum(pts.size(), 0.0);
  for (size_t i = 1; i < pts.size(); ++i) {
    cum[i] = cum[i - 1] + distance(pts[i - 1], pts[i]);
  }
  const double total = cum.back();

  std::vector<PolylinePoint> out;
  out.reserve(static_cast<size_t>(n));
  size_t seg = 0;
  for (int k = 0; k < n; ++k) {
    const double target =
        total * static_cast<double>(k) / static_cast<double>(n - 1);
    while (seg + 2 < pts.size() && cum[seg + 1] < target) ++seg;
    const double seg_len = cum[seg + 1] - cum[seg];
    const double t = seg_len > 0.0 ? (target - cum[seg]) / seg_len : 0.0;
    out.push_back({pts[seg] + std::clamp(t, 0.0, 1.0) * (pts[seg + 1] - pts[seg]),
                   seg});
  }
  return out;
}

Vec2 project_to_segment(Vec2 q, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  if (len2 == 0.0) return a;
  const double t = std::clamp(dot(q - a, ab) / len2, 0.0, 1.0);
  return a + t * ab;
}

void validate_annotation(const InstanceAnnotation& a) {
  validate_box(a.obb);
  validate_polyline(a.stem);
  validate_polyline(a.vein);
  if (a.stem.part != PartLabel::kStem || a.vein.part != PartLabel::kVein) {
    throw std::invalid_argument("annotation: polyline part labels mismatched");
  }
  const Vec2 base_s = a.stem.points.back();
  const Vec2 base_v = a.vein.points.front();
  if (distance(base_s, base_v) > 1e-6) {
    throw std::invalid_argument(
        "annotation: stem endpoint must coincide with vein start");
  }
}

std::vector<InstanceKeypoint> instance_keypoints(const InstanceAnnotation& a,
                                                 const KeypointLayout& layout) {
  validate_annotation(a);
  std::vector<InstanceKeypoint> out;
  out.reserve(static_cast<size_t>(layout.total()));
  for (const auto& rp : resample_polyline(a.stem, layout.stem)) {
    out.push_back({rp.p, PartLabel::kStem, rp.segment});
  }
  for (const auto& rp : resample_polyline(a.vein, layout.vein)) {
    out.push_back({rp.p, PartLabel::kVein, rp.segment});
  }
  return out;
}

Affine2d Affine2d::identity() { return {}; }

Affine2d Affine2d::translation(double tx, double ty) {
  Affine2d t;
  t.m[2] = tx;
  t.m[5] = ty;
  return t;
}

Affine2d Affine2d::scaling(double sx, double sy) {
  Affine2d t;
  t.m[0] = sx;
  t.m[4] = sy;
  return t;
}

Affine2d Affine2d::rotation(double theta) {
  Affine2d t;
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  t.m[0] = c;
  t.m[1] = -s;
  t.m[3] = s;
  t.m[4] = c;
  return t;
}

Vec2 Affine2d::apply(Vec2 p) const {
  return {m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5]};
}

Affine2d Affine2d::compose(const Affine2d& other) const {
  Affine2d r;
  r.m[0] = m[0] * other.m[0] + m[1] * other.m[3];
  r.m[1] = m[0] * other.m[1] + m[1] * other.m[4];
  r.m[2] = m[0] * other.m[2] + m[1] * other.m[5] + m[2];
  r.m[3] = m[3] * other.m[0] + m[4] * other.m[3];
  r.m[4] = m[3] * other.m[1] + m[4] * other.m[4];
  r.m[5] = m[3] * other.m[2] + m[4] * other.m[5] + m[5];
  return r;
}

Affine2d Affine2d::inverse() const {
  const double det = m[0] * m[4] - m[1] * m[3];
  if (std::fabs(det) < 1e-300) {
    throw std::invalid_argument("affine inverse: singular matrix");
  }
  Affine2d r;
  r.m[0] = m[4] / det;
  r.m[1] = -m[1] / det;
  r.m[3] = -m[3] / det;
  r.m[4] = m[0] / det;
  r.m[2] = -(r.m[0] * m[2] + r.m[1] * m[5]);
  r.m[5] = -(r.m[3] * m[2] + r.m[4] * m[5]);
  return r;
}

}  // namespace maad
