#pragma once

#include <cstdint>
#include <vector>

#include "maad/geometry.hpp"
#include "maad/image.hpp"

namespace maad {

struct ImageStats {
  double intensity = 0.0;           // mean luma in [0,255]
  double brightness = 0.0;          // mean max(R,G,B)/255 in [0,1]
  double avg_edge_magnitude = 0.0;  // mean normalized Sobel magnitude in [0,1]
};

// Rec.601 luma, one double in [0,255] per pixel.
std::vector<double> to_grayscale(const ImageRgb& image);

// 3x3 Sobel with replicate padding; per-pixel magnitude normalized by
// 4*sqrt(2)*255 (the largest magnitude an 8-bit image can produce), averaged
// over the image. Requires h, w >= 3.
double sobel_edge_magnitude(const std::vector<double>& gray, int64_t height,
                            int64_t width);

ImageStats image_stats(const ImageRgb& image);

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation
};

Aggregate aggregate(const std::vector<double>& values);  // empty input errors

// Axis-aligned extent of the rotated box (its AABB width and height).
void obb_extent(const OrientedBox& box, double* extent_w, double* extent_h);

// Per-domain table mirroring how field/internet datasets get compared:
// annotation-derived counts and sizes plus the photometric image statistics.
struct DomainAggregates {
  Aggregate leaves_per_image;
  Aggregate leaf_width_pct;   // AABB extent as % of image width, per leaf
  Aggregate leaf_height_pct;  // per leaf, % of image height
  Aggregate intensity;
  Aggregate brightness;
  Aggregate edge_magnitude;
};

// One entry per image; annotation lists may be empty for individual images.
DomainAggregates domain_aggregates(
    const std::vector<ImageStats>& per_image,
    const std::vector<std::vector<InstanceAnnotation>>& annotations,
    double image_width, double image_height);

}  // namespace maad
