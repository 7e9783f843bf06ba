#pragma once

#include <cstddef>
#include <vector>

namespace maad {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 v) { return {s * v.x, s * v.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
double norm(Vec2 v);
double distance(Vec2 a, Vec2 b);

// Wraps an angle into (-pi, pi]; -pi canonicalizes to +pi.
double normalize_angle(double theta);

struct OrientedBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;   // > 0
  double h = 0.0;   // > 0
  double theta = 0.0;  // radians in (-pi, pi]
};

void validate_box(const OrientedBox& b);

using Polygon = std::vector<Vec2>;

// Corners in counter-clockwise order (positive shoelace area).
Polygon obb_to_polygon(const OrientedBox& b);

// Signed shoelace area; counter-clockwise polygons come out positive.
double polygon_area(const Polygon& p);

// Sutherland-Hodgman clip of convex p against convex q (both CCW), then the
// shoelace area of the result. Degenerate overlap gives 0.
double convex_intersection_area(const Polygon& p, const Polygon& q);

// intersection / union of the two rectangles, in [0,1].
double obb_iou(const OrientedBox& a, const OrientedBox& b);

enum class PartLabel { kStem, kVein };

struct Polyline {
  std::vector<Vec2> points;  // >= 2, consecutive points distinct
  PartLabel part = PartLabel::kStem;
};

void validate_polyline(const Polyline& p);
double polyline_length(const Polyline& p);

// Point on a polyline together with the index of the segment it lies on.
struct PolylinePoint {
  Vec2 p;
  size_t segment = 0;
};

// n >= 2 points spaced evenly by arc length, endpoints included.
std::vector<PolylinePoint> resample_polyline(const Polyline& line, int n);

// Nearest point to q on segment [a, b] (projection clamped to the ends).
Vec2 project_to_segment(Vec2 q, Vec2 a, Vec2 b);

struct InstanceAnnotation {
  OrientedBox obb;
  Polyline stem;  // runs from the outer stem tip to the leaf base
  Polyline vein;  // runs from the leaf base to the leaf tip
};

// Box validity, polyline validity, stem-end == vein-start within tol.
void validate_annotation(const InstanceAnnotation& a);

// Fixed per-instance keypoint layout shared by the regression head and the
// keypoint metrics: stem points first, then vein points.
struct KeypointLayout {
  int stem = 3;
  int vein = 5;
  int total() const { return stem + vein; }
  PartLabel part(int i) const {
    return i < stem ? PartLabel::kStem : PartLabel::kVein;
  }
};

struct InstanceKeypoint {
  Vec2 p;
  PartLabel part = PartLabel::kStem;
  size_t segment = 0;  // segment of its source polyline it lies on
};

// Canonical ground-truth keypoints: layout.stem points resampled along the
// stem, layout.vein along the vein. The leaf base appears twice (stem end,
// vein start) by construction.
std::vector<InstanceKeypoint> instance_keypoints(const InstanceAnnotation& a,
                                                 const KeypointLayout& layout);

// Row-major 2x3 affine map p -> (m00 x + m01 y + m02, m10 x + m11 y + m12).
struct Affine2d {
  double m[6] = {1, 0, 0, 0, 1, 0};

  static Affine2d identity();
  static Affine2d translation(double tx, double ty);
  static Affine2d scaling(double sx, double sy);
  static Affine2d rotation(double theta);  // about the origin

  Vec2 apply(Vec2 p) const;
  // this ∘ other: apply other first, then this.
  Affine2d compose(const Affine2d& other) const;
  Affine2d inverse() const;  // throws on singular maps
};

}  // namespace maad
