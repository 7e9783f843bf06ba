#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "maad/geometry.hpp"
#include "maad/image.hpp"

namespace maad {

enum class Domain { kSource, kTarget };

std::string domain_name(Domain d);
Domain parse_domain(const std::string& name);

struct IntRange {
  int lo = 0;
  int hi = 0;
};

struct RealRange {
  double lo = 0.0;
  double hi = 0.0;
};

enum class BackgroundKind { kTextured, kGrass };

// Rendering recipe for one domain. The defaults imitate the gap between
// internet photos (few big bright leaves, busy backgrounds) and field robot
// imagery (small dark leaves over grass).
struct DomainSpec {
  Domain domain = Domain::kSource;
  int image_size = 64;            // square, multiple of 4
  IntRange leaves = {2, 25};
  RealRange leaf_scale = {0.20, 0.60};  // leaf length / image size
  BackgroundKind background = BackgroundKind::kTextured;
  int noise_octaves = 3;          // textured background detail
  double base_intensity = 0.55;   // background level in [0,1]
  double stroke_density = 0.0;    // grass blades per image pixel column
  double brightness = 1.0;        // global factor in (0,1]
  double clutter = 0.2;           // distractor blob level in [0,1]

  void validate() const;
  static DomainSpec source_default();
  static DomainSpec target_default();
};

struct SceneSample {
  ImageRgb image;
  std::vector<InstanceAnnotation> annotations;
  Domain domain = Domain::kSource;
  uint64_t seed = 0;
  int requested_leaves = 0;  // annotations.size() may be smaller on crowding
};

// Deterministic from (spec, seed). Leaves radiate from a per-scene plant
// center: the oriented box hugs an elongated elliptical blob, the vein runs
// base to tip along the blob, the stem drops from the base toward the plant
// center. Placement retries a bounded number of times and then gives up on
// the remaining leaves.
SceneSample generate_scene(const DomainSpec& spec, uint64_t seed);

struct AugmentConfig {
  double p_hflip = 0.5;
  double p_rot90 = 0.5;
  double p_zoom_out = 0.3;
  double zoom_max = 2.0;  // scale factor drawn from [1.3, zoom_max]
  double p_color_jitter = 0.5;
  double p_gauss_noise = 0.3;
  double noise_std = 5.0;  // 8-bit units
  double p_brightness_contrast = 0.5;

  void validate() const;
};

// Ops applied in a fixed order (flip, zoom-out, color jitter, rot90, noise,
// brightness/contrast), each with its probability; geometric ops move the
// annotations with the pixels. Square images only.
SceneSample augment(const SceneSample& sample, const AugmentConfig& cfg,
                    std::mt19937_64& rng);

// The individual geometric ops, exposed for direct testing.
SceneSample hflip_sample(const SceneSample& sample);
SceneSample rot90_sample(const SceneSample& sample);  // 90 degrees clockwise
SceneSample zoom_out_sample(const SceneSample& sample, double factor,
                            int64_t offset_x, int64_t offset_y);

}  // namespace maad
