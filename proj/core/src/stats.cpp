#include "maad/stats.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace maad {

std::vector<double> to_grayscale(const ImageRgb& image) {
  std::vector<double> gray(static_cast<size_t>(image.width * image.height));
  for (int64_t y = 0; y < image.height; ++y) {
    for (int64_t x = 0; x < image.width; ++x) {
      gray[static_cast<size_t>(y * image.width + x)] =
          0.299 * image.at(x, y, 0) + 0.587 * image.at(x, y, 1) +
          0.114 * image.at(x, y, 2);
    }
  }
  return gray;
}

double sobel_edge_magnitude(const std::vector<double>& gray, int64_t height,
                            int64_t width) {
  if (height < 3 || width < 3) {
    throw std::invalid_argument("sobel_edge_magnitude: image below 3x3, got " +
                                std::to_string(height) + "x" +
                                std::to_string(width));
  }
  if (gray.size() != static_cast<size_t>(height * width)) {
    throw std::invalid_argument("sobel_edge_magnitude: buffer size mismatch");
  }
  const double norm = 4.0 * std::sqrt(2.0) * 255.0;
  auto px = [&](int64_t x, int64_t y) {
    x = std::clamp<int64_t>(x, 0, width - 1);  // replicate padding
    y = std::clamp<int64_t>(y, 0, height - 1);
    return gray[static_cast<size_t>(y * width + x)];
  };
  double total = 0.0;
  for (int64_t y = 0; y < height; ++y) {
    for (int64_t x = 0; x < width; ++x) {
      // Difference form so constant images cancel exactly per pair.
      const double gx = (px(x + 1, y - 1) - px(x - 1, y - 1)) +
                        2.0 * (px(x + 1, y) - px(x - 1, y)) +
                        (px(x + 1, y + 1) - px(x - 1, y + 1));
      const double gy = (px(x - 1, y + 1) - px(x - 1, y - 1)) +
                        2.0 * (px(x, y + 1) - px(x, y - 1)) +
                        (px(x + 1, y + 1) - px(x + 1, y - 1));
      total += std::hypot(gx, gy) / norm;
    }
  }
  return total / static_cast<double>(height * width);
}

ImageStats image_stats(const ImageRgb& image) {
  if (image.width <= 0 || image.height <= 0) {
    throw std::invalid_argument("image_stats: empty image");
  }
  ImageStats out;
  double luma = 0.0;
  double value = 0.0;
  for (int64_t y = 0; y < image.height; ++y) {
    for (int64_t x = 0; x < image.width; ++x) {
      const uint8_t r = image.at(x, y, 0);
      const uint8_t g = image.at(x, y, 1);
      const uint8_t b = image.at(x, y, 2);
      luma += 0.299 * r + 0.587 * g + 0.114 * b;
      value += std::max({r, g, b}) / 255.0;
    }
  }
  const double n = static_cast<double>(image.width * image.height);
  out.intensity = luma / n;
  out.brightness = value / n;
  out.avg_edge_magnitude =
      sobel_edge_magnitude(to_grayscale(image), image.height, image.width);
  return out;
}

Aggregate aggregate(const std::vector<double>& values) {
  if (values.empty()) {
    throw std::invalid_argument("aggregate: empty value list");
  }
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  return {mean, std::sqrt(var)};
}

void obb_extent(const OrientedBox& box, double* extent_w, double* extent_h) {
  const Polygon poly = obb_to_polygon(box);
  double x0 = poly[0].x, x1 = poly[0].x, y0 = poly[0].y, y1 = poly[0].y;
  for (const Vec2& v : poly) {
    x0 = std::min(x0, v.x);
    x1 = std::max(x1, v.x);
    y0 = std::min(y0, v.y);
    y1 = std::max(y1, v.y);
  }
  *extent_w = x1 - x0;
  *extent_h = y1 - y0;
}

DomainAggregates domain_aggregates(
    const std::vector<ImageStats>& per_image,
    const std::vector<std::vector<InstanceAnnotation>>& annotations,
    double image_width, double image_height) {
  if (per_image.empty() || per_image.size() != annotations.size()) {
    throw std::invalid_argument(
        "domain_aggregates: need matching nonempty image and annotation lists");
  }
  if (!(image_width > 0.0) || !(image_height > 0.0)) {
    throw std::invalid_argument("domain_aggregates: nonpositive image size");
  }

  std::vector<double> counts, widths, heights, intensity, brightness, edges;
  for (size_t i = 0; i < per_image.size(); ++i) {
    counts.push_back(static_cast<double>(annotations[i].size()));
    intensity.push_back(per_image[i].intensity);
    brightness.push_back(per_image[i].brightness);
    edges.push_back(per_image[i].avg_edge_magnitude);
    for (const auto& inst : annotations[i]) {
      double ew = 0.0, eh = 0.0;
      obb_extent(inst.obb, &ew, &eh);
      widths.push_back(100.0 * ew / image_width);
      heights.push_back(100.0 * eh / image_height);
    }
  }

  DomainAggregates out;
  out.leaves_per_image = aggregate(counts);
  // a domain with zero annotated leaves reports zeroed size aggregates
  out.leaf_width_pct = widths.empty() ? Aggregate{} : aggregate(widths);
  out.leaf_height_pct = heights.empty() ? Aggregate{} : aggregate(heights);
  out.intensity = aggregate(intensity);
  out.brightness = aggregate(brightness);
  out.edge_magnitude = aggregate(edges);
  return out;
}

}  // namespace maad
