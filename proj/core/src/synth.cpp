#include "maad/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace maad {

std::string domain_name(Domain d) {
  return d == Domain::kSource ? "source" : "target";
}

Domain parse_domain(const std::string& name) {
  if (name == "source") return Domain::kSource;
  if (name == "target") return Domain::kTarget;
  throw std::invalid_argument("unknown domain name: " + name);
}

void DomainSpec::validate() const {
  if (image_size < 16 || image_size % 4 != 0) {
    throw std::invalid_argument(
        "domain spec: image_size must be >= 16 and divisible by 4");
  }
  if (leaves.lo < 0 || leaves.hi < leaves.lo) {
    throw std::invalid_argument("domain spec: empty leaf count range");
  }
  if (!(leaf_scale.lo > 0.0) || leaf_scale.hi < leaf_scale.lo ||
      leaf_scale.hi >= 1.0) {
    throw std::invalid_argument("domain spec: leaf scale must sit in (0,1)");
  }
  if (noise_octaves < 1) {
    throw std::invalid_argument("domain spec: need at least one noise octave");
  }
  if (stroke_density < 0.0) {
    throw std::invalid_argument("domain spec: negative stroke density");
  }
  if (base_intensity < 0.0 || base_intensity > 1.0) {
    throw std::invalid_argument("domain spec: base intensity outside [0,1]");
  }
  if (!(brightness > 0.0) || brightness > 1.0) {
    throw std::invalid_argument("domain spec: brightness outside (0,1]");
  }
  if (clutter < 0.0 || clutter > 1.0) {
    throw std::invalid_argument("domain spec: clutter outside [0,1]");
  }
}

DomainSpec DomainSpec::source_default() { return DomainSpec{}; }

DomainSpec DomainSpec::target_default() {
  DomainSpec s;
  s.domain = Domain::kTarget;
  s.leaves = {3, 7};
  s.leaf_scale = {0.10, 0.30};
  s.background = BackgroundKind::kGrass;
  s.noise_octaves = 2;
  s.base_intensity = 0.17;
  s.stroke_density = 1.3;
  s.brightness = 0.62;
  s.clutter = 0.1;
  return s;
}

namespace {

double urand(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int irand(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

uint8_t clip255(double v) {
  return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
}

struct Rgb {
  double r, g, b;
  Rgb operator*(double s) const { return {r * s, g * s, b * s}; }
};

void put(ImageRgb& img, int64_t x, int64_t y, Rgb c) {
  if (x < 0 || x >= img.width || y < 0 || y >= img.height) return;
  img.at(x, y, 0) = clip255(c.r);
  img.at(x, y, 1) = clip255(c.g);
  img.at(x, y, 2) = clip255(c.b);
}

// Deterministic per-pixel texture independent of draw order.
double hash_noise(int64_t x, int64_t y, int64_t k) {
  uint64_t h = static_cast<uint64_t>(x) * 0x9E3779B97F4A7C15ull ^
               static_cast<uint64_t>(y) * 0xC2B2AE3D27D4EB4Full ^
               static_cast<uint64_t>(k) * 0x165667B19E3779F9ull;
  h ^= h >> 33;
  h *= 0xFF51AFD7ED558CCDull;
  h ^= h >> 33;
  return static_cast<double>(h >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

// Bilinear value noise over a coarse random lattice.
struct ValueNoise {
  int cells = 1;
  int size = 1;
  std::vector<double> lattice;

  static ValueNoise make(std::mt19937_64& rng, int image_size, int cell_px) {
    ValueNoise n;
    n.size = image_size;
    n.cells = std::max(1, image_size / std::max(1, cell_px));
    n.lattice.resize(static_cast<size_t>((n.cells + 1) * (n.cells + 1)));
    for (auto& v : n.lattice) v = urand(rng, -1.0, 1.0);
    return n;
  }

  double at(double x, double y) const {
    const double gx = x / size * cells;
    const double gy = y / size * cells;
    const int ix = std::min(static_cast<int>(gx), cells - 1);
    const int iy = std::min(static_cast<int>(gy), cells - 1);
    auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
    const double fx = smooth(gx - ix);
    const double fy = smooth(gy - iy);
    auto l = [&](int i, int j) {
      return lattice[static_cast<size_t>(j * (cells + 1) + i)];
    };
    const double top = l(ix, iy) * (1 - fx) + l(ix + 1, iy) * fx;
    const double bot = l(ix, iy + 1) * (1 - fx) + l(ix + 1, iy + 1) * fx;
    return top * (1 - fy) + bot * fy;
  }
};

void draw_line(ImageRgb& img, Vec2 a, Vec2 b, Rgb color, double radius) {
  const double len = distance(a, b);
  const int steps = std::max(1, static_cast<int>(len / 0.3));
  const int64_t rr = static_cast<int64_t>(std::ceil(radius));
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    const Vec2 p = a + t * (b - a);
    const int64_t px = std::llround(p.x);
    const int64_t py = std::llround(p.y);
    for (int64_t dy = -rr; dy <= rr; ++dy) {
      for (int64_t dx = -rr; dx <= rr; ++dx) {
        if (std::hypot(px + dx - p.x, py + dy - p.y) <= radius) {
          put(img, px + dx, py + dy, color);
        }
      }
    }
  }
}

void fill_ellipse(ImageRgb& img, Vec2 c, double a, double b, double theta,
                  Rgb color, int64_t texture_key) {
  const Vec2 dir{std::cos(theta), std::sin(theta)};
  const Vec2 nrm{-dir.y, dir.x};
  const double half_diag = std::hypot(a, b);
  for (int64_t y = static_cast<int64_t>(std::floor(c.y - half_diag));
       y <= static_cast<int64_t>(std::ceil(c.y + half_diag)); ++y) {
    for (int64_t x = static_cast<int64_t>(std::floor(c.x - half_diag));
         x <= static_cast<int64_t>(std::ceil(c.x + half_diag)); ++x) {
      const Vec2 rel{x - c.x, y - c.y};
      const double u = dot(rel, dir) / a;
      const double v = dot(rel, nrm) / b;
      const double q = u * u + v * v;
      if (q > 1.0) continue;
      const double shade =
          0.72 + 0.34 * (1.0 - q) + 0.12 * hash_noise(x, y, texture_key);
      put(img, x, y, color * shade);
    }
  }
}

bool point_in_convex_ccw(const Polygon& poly, Vec2 p) {
  for (size_t i = 0; i < poly.size(); ++i) {
    const Vec2 a = poly[i];
    const Vec2 b = poly[(i + 1) % poly.size()];
    if (cross(b - a, p - a) < -1e-9) return false;
  }
  return true;
}

void render_background(ImageRgb& img, const DomainSpec& spec,
                       std::mt19937_64& rng) {
  const int S = spec.image_size;
  const double base = spec.base_intensity * 255.0;
  if (spec.background == BackgroundKind::kTextured) {
    const double tint[3] = {urand(rng, 0.88, 1.08), urand(rng, 0.92, 1.12),
                            urand(rng, 0.74, 0.98)};
    std::vector<ValueNoise> octaves;
    int cell = std::max(2, S / 4);
    for (int o = 0; o < spec.noise_octaves; ++o) {
      octaves.push_back(ValueNoise::make(rng, S, cell));
      cell = std::max(1, cell / 2);
    }
    for (int64_t y = 0; y < S; ++y) {
      for (int64_t x = 0; x < S; ++x) {
        double n = 0.0, amp = 1.0, total = 0.0;
        for (const auto& oct : octaves) {
          n += amp * oct.at(static_cast<double>(x), static_cast<double>(y));
          total += amp;
          amp *= 0.55;
        }
        n /= total;
        const double grain = 14.0 * hash_noise(x, y, 9001);
        for (int c = 0; c < 3; ++c) {
          img.at(x, y, c) = clip255(base * tint[c] + 46.0 * n + grain);
        }
      }
    }
  } else {
    ValueNoise low = ValueNoise::make(rng, S, std::max(2, S / 4));
    const Rgb soil{base * 0.95, base * 1.25, base * 0.8};
    for (int64_t y = 0; y < S; ++y) {
      for (int64_t x = 0; x < S; ++x) {
        const double m =
            1.0 + 0.3 * low.at(static_cast<double>(x), static_cast<double>(y)) +
            0.08 * hash_noise(x, y, 9002);
        put(img, x, y, soil * m);
      }
    }
    const int n_strokes = static_cast<int>(std::lround(spec.stroke_density * S));
    for (int i = 0; i < n_strokes; ++i) {
      const double x0 = urand(rng, 0.0, S - 1.0);
      const double y0 = urand(rng, 0.0, S - 1.0);
      const double ang = -M_PI / 2.0 + urand(rng, -0.7, 0.7);
      const double len = urand(rng, 3.0, 8.0);
      const double lum = urand(rng, 1.35, 1.9);
      const Vec2 a{x0, y0};
      const Vec2 b{x0 + len * std::cos(ang), y0 + len * std::sin(ang)};
      draw_line(img, a, b, soil * lum, 0.45);
    }
  }
}

void render_clutter(ImageRgb& img, const DomainSpec& spec,
                    std::mt19937_64& rng) {
  const int S = spec.image_size;
  const int n = static_cast<int>(std::lround(spec.clutter * 8.0));
  for (int i = 0; i < n; ++i) {
    const Vec2 c{urand(rng, 3.0, S - 4.0), urand(rng, 3.0, S - 4.0)};
    const double a = urand(rng, 1.5, 4.0);
    const double b = urand(rng, 1.0, 3.0);
    const double theta = urand(rng, -M_PI, M_PI);
    const double lum = urand(rng, 0.75, 1.2);
    fill_ellipse(img, c, a, b, theta, Rgb{104, 94, 76} * lum, 7000 + i);
  }
}

}  // namespace

SceneSample generate_scene(const DomainSpec& spec, uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const int S = spec.image_size;

  SceneSample out;
  out.domain = spec.domain;
  out.seed = seed;
  out.image.width = S;
  out.image.height = S;
  out.image.pixels.assign(static_cast<size_t>(S) * S * 3, 0);

  render_background(out.image, spec, rng);
  render_clutter(out.image, spec, rng);

  const Vec2 plant_center{S / 2.0 + urand(rng, -S / 8.0, S / 8.0),
                          S / 2.0 + urand(rng, -S / 8.0, S / 8.0)};
  const int requested = irand(rng, spec.leaves.lo, spec.leaves.hi);
  out.requested_leaves = requested;

  for (int li = 0; li < requested; ++li) {
    for (int attempt = 0; attempt < 40; ++attempt) {
      const double length = urand(rng, spec.leaf_scale.lo, spec.leaf_scale.hi) * S;
      const double aspect = urand(rng, 0.32, 0.55);
      const double a = length / 2.0;
      const double b = aspect * length / 2.0;
      const double margin = std::hypot(a, b) + 1.5;
      if (2.0 * margin >= S - 2.0) continue;
      const Vec2 c{urand(rng, margin, S - 1.0 - margin),
                   urand(rng, margin, S - 1.0 - margin)};
      bool conflict = false;
      for (const auto& other : out.annotations) {
        if (std::hypot(other.obb.cx - c.x, other.obb.cy - c.y) < 5.0) {
          conflict = true;
          break;
        }
      }
      if (conflict) continue;

      // Major axis points away from the plant center, so the base faces it.
      const double theta = normalize_angle(
          std::atan2(c.y - plant_center.y, c.x - plant_center.x) +
          urand(rng, -0.5, 0.5));
      const Vec2 dir{std::cos(theta), std::sin(theta)};
      const Vec2 nrm{-dir.y, dir.x};

      InstanceAnnotation ann;
      ann.obb = {c.x, c.y, 2.0 * a, 2.0 * b, theta};

      const double bow = urand(rng, -0.22, 0.22) * b;
      ann.vein.part = PartLabel::kVein;
      for (int k = 0; k <= 3; ++k) {
        const double t = k / 3.0;
        const double u = -0.82 * a + 1.64 * a * t;
        const double v = bow * std::sin(M_PI * t);
        ann.vein.points.push_back(c + u * dir + v * nrm);
      }

      const Vec2 base = ann.vein.points.front();
      const Vec2 to_center = plant_center - base;
      const double dist_pc = norm(to_center);
      const Vec2 stem_dir =
          dist_pc > 1e-6 ? (1.0 / dist_pc) * to_center : -1.0 * dir;
      const double stem_len =
          std::max(1.2, std::min(urand(rng, 0.2, 0.35) * length,
                                 0.8 * std::max(dist_pc, 1.0)));
      const Vec2 stem_bow = urand(rng, -0.4, 0.4) * Vec2{-stem_dir.y, stem_dir.x};
      ann.stem.part = PartLabel::kStem;
      ann.stem.points = {base + stem_len * stem_dir,
                         base + 0.5 * stem_len * stem_dir + stem_bow, base};
      validate_annotation(ann);

      // Render: blob, midrib, stem; count how much of the blob the box holds.
      const Rgb leaf = {52.0 * urand(rng, 0.75, 1.25),
                        148.0 * urand(rng, 0.8, 1.2),
                        50.0 * urand(rng, 0.75, 1.25)};
      const Polygon box_poly = obb_to_polygon(ann.obb);
      int64_t mask_total = 0, mask_inside = 0;
      const double half_diag = std::hypot(a, b);
      for (int64_t y = static_cast<int64_t>(std::floor(c.y - half_diag));
           y <= static_cast<int64_t>(std::ceil(c.y + half_diag)); ++y) {
        for (int64_t x = static_cast<int64_t>(std::floor(c.x - half_diag));
             x <= static_cast<int64_t>(std::ceil(c.x + half_diag)); ++x) {
          const Vec2 rel{x - c.x, y - c.y};
          const double u = dot(rel, dir) / a;
          const double v = dot(rel, nrm) / b;
          const double q = u * u + v * v;
          if (q > 1.0) continue;
          ++mask_total;
          if (point_in_convex_ccw(box_poly, {static_cast<double>(x),
                                             static_cast<double>(y)})) {
            ++mask_inside;
          }
          const double shade =
              0.74 + 0.32 * (1.0 - q) + 0.1 * hash_noise(x, y, 100 + li);
          put(out.image, x, y, leaf * shade);
        }
      }
      if (mask_total > 0 &&
          static_cast<double>(mask_inside) < 0.9 * static_cast<double>(mask_total)) {
        throw std::logic_error("generate_scene: leaf mask leaked out of its box");
      }

      for (size_t k = 0; k + 1 < ann.vein.points.size(); ++k) {
        draw_line(out.image, ann.vein.points[k], ann.vein.points[k + 1],
                  leaf * 1.45, 0.5);
      }
      draw_line(out.image, ann.stem.points[0], ann.stem.points[1],
                Rgb{118, 96, 58}, 0.6);
      draw_line(out.image, ann.stem.points[1], ann.stem.points[2],
                Rgb{118, 96, 58}, 0.6);

      out.annotations.push_back(std::move(ann));
      break;
    }
  }

  if (spec.brightness < 1.0) {
    for (auto& p : out.image.pixels) {
      p = clip255(p * spec.brightness);
    }
  }
  return out;
}

void AugmentConfig::validate() const {
  for (double p : {p_hflip, p_rot90, p_zoom_out, p_color_jitter, p_gauss_noise,
                   p_brightness_contrast}) {
    if (p < 0.0 || p > 1.0) {
      throw std::invalid_argument("augment: probability outside [0,1]");
    }
  }
  if (zoom_max < 1.0) {
    throw std::invalid_argument("augment: zoom_max must be >= 1");
  }
  if (noise_std < 0.0) {
    throw std::invalid_argument("augment: negative noise std");
  }
}

SceneSample hflip_sample(const SceneSample& sample) {
  const int64_t w = sample.image.width;
  SceneSample out = sample;
  for (int64_t y = 0; y < sample.image.height; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        out.image.at(x, y, c) = sample.image.at(w - 1 - x, y, c);
      }
    }
  }
  for (auto& ann : out.annotations) {
    ann.obb.cx = (w - 1.0) - ann.obb.cx;
    ann.obb.theta = normalize_angle(-ann.obb.theta);
    for (auto* line : {&ann.stem, &ann.vein}) {
      for (auto& p : line->points) p.x = (w - 1.0) - p.x;
    }
  }
  return out;
}

SceneSample rot90_sample(const SceneSample& sample) {
  const int64_t s = sample.image.width;
  if (sample.image.height != s) {
    throw std::invalid_argument("rot90: square images only");
  }
  SceneSample out = sample;
  for (int64_t y = 0; y < s; ++y) {
    for (int64_t x = 0; x < s; ++x) {
      for (int c = 0; c < 3; ++c) {
        out.image.at(s - 1 - y, x, c) = sample.image.at(x, y, c);
      }
    }
  }
  auto map_point = [&](Vec2 p) { return Vec2{(s - 1.0) - p.y, p.x}; };
  for (auto& ann : out.annotations) {
    const Vec2 c = map_point({ann.obb.cx, ann.obb.cy});
    ann.obb.cx = c.x;
    ann.obb.cy = c.y;
    ann.obb.theta = normalize_angle(ann.obb.theta + M_PI / 2.0);
    for (auto* line : {&ann.stem, &ann.vein}) {
      for (auto& p : line->points) p = map_point(p);
    }
  }
  return out;
}

SceneSample zoom_out_sample(const SceneSample& sample, double factor,
                            int64_t offset_x, int64_t offset_y) {
  if (!(factor >= 1.0)) {
    throw std::invalid_argument("zoom_out: factor must be >= 1");
  }
  const int64_t w = sample.image.width;
  const int64_t h = sample.image.height;
  const int64_t sw = std::max<int64_t>(1, std::llround(w / factor));
  const double scale = static_cast<double>(sw) / static_cast<double>(w);
  const int64_t sh = std::max<int64_t>(1, std::llround(h * scale));
  if (offset_x < 0 || offset_x + sw > w || offset_y < 0 || offset_y + sh > h) {
    throw std::invalid_argument("zoom_out: offset places content outside");
  }

  // Pad with the mean color so the border is not an artificial hard edge.
  uint64_t mean[3] = {0, 0, 0};
  for (size_t i = 0; i < sample.image.pixels.size(); i += 3) {
    mean[0] += sample.image.pixels[i];
    mean[1] += sample.image.pixels[i + 1];
    mean[2] += sample.image.pixels[i + 2];
  }
  const uint64_t n_px = static_cast<uint64_t>(w * h);
  SceneSample out = sample;
  for (size_t i = 0; i < out.image.pixels.size(); i += 3) {
    out.image.pixels[i] = static_cast<uint8_t>(mean[0] / n_px);
    out.image.pixels[i + 1] = static_cast<uint8_t>(mean[1] / n_px);
    out.image.pixels[i + 2] = static_cast<uint8_t>(mean[2] / n_px);
  }
  for (int64_t y = 0; y < sh; ++y) {
    const int64_t sy = std::clamp<int64_t>(
        std::llround(static_cast<double>(y) / scale), 0, h - 1);
    for (int64_t x = 0; x < sw; ++x) {
      const int64_t sx = std::clamp<int64_t>(
          std::llround(static_cast<double>(x) / scale), 0, w - 1);
      for (int c = 0; c < 3; ++c) {
        out.image.at(offset_x + x, offset_y + y, c) = sample.image.at(sx, sy, c);
      }
    }
  }
  for (auto& ann : out.annotations) {
    ann.obb.cx = ann.obb.cx * scale + static_cast<double>(offset_x);
    ann.obb.cy = ann.obb.cy * scale + static_cast<double>(offset_y);
    ann.obb.w *= scale;
    ann.obb.h *= scale;
    for (auto* line : {&ann.stem, &ann.vein}) {
      for (auto& p : line->points) {
        p.x = p.x * scale + static_cast<double>(offset_x);
        p.y = p.y * scale + static_cast<double>(offset_y);
      }
    }
  }
  return out;
}

SceneSample augment(const SceneSample& sample, const AugmentConfig& cfg,
                    std::mt19937_64& rng) {
  cfg.validate();
  SceneSample cur = sample;
  auto roll = [&](double p) { return urand(rng, 0.0, 1.0) < p; };

  if (roll(cfg.p_hflip)) cur = hflip_sample(cur);

  if (roll(cfg.p_zoom_out)) {
    const double hi = std::max(1.3, cfg.zoom_max);
    const double f = urand(rng, 1.3, hi);
    const int64_t w = cur.image.width, h = cur.image.height;
    const int64_t sw = std::max<int64_t>(1, std::llround(w / f));
    const double scale = static_cast<double>(sw) / static_cast<double>(w);
    const int64_t sh = std::max<int64_t>(1, std::llround(h * scale));
    const int64_t ox = irand(rng, 0, static_cast<int>(w - sw));
    const int64_t oy = irand(rng, 0, static_cast<int>(h - sh));
    cur = zoom_out_sample(cur, f, ox, oy);
  }

  if (roll(cfg.p_color_jitter)) {
    double gain[3];
    for (auto& g : gain) g = urand(rng, 0.8, 1.25);
    for (size_t i = 0; i < cur.image.pixels.size(); ++i) {
      cur.image.pixels[i] = clip255(cur.image.pixels[i] * gain[i % 3]);
    }
  }

  if (roll(cfg.p_rot90)) {
    const int quarter_turns = irand(rng, 1, 3);
    for (int k = 0; k < quarter_turns; ++k) cur = rot90_sample(cur);
  }

  if (roll(cfg.p_gauss_noise)) {
    std::normal_distribution<double> noise(0.0, cfg.noise_std);
    for (auto& p : cur.image.pixels) {
      p = clip255(p + noise(rng));
    }
  }

  if (roll(cfg.p_brightness_contrast)) {
    const double contrast = urand(rng, 0.8, 1.2);
    const double shift = urand(rng, -20.0, 20.0);
    for (auto& p : cur.image.pixels) {
      p = clip255((p - 128.0) * contrast + 128.0 + shift);
    }
  }
  return cur;
}

}  // namespace maad
