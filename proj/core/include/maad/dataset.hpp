#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maad/image.hpp"
#include "maad/synth.hpp"
#include "maad/tensor.hpp"

namespace maad {

enum class Split { kTrain, kVal, kTest };
std::string split_name(Split s);
Split parse_split(const std::string& name);

struct SplitFractions {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
  void validate() const;
};

// Per-domain split sizes: floor each fraction, then hand the remainder out
// one sample at a time cycling train -> val -> test.
struct SplitCounts {
  int train = 0;
  int val = 0;
  int test = 0;
};
SplitCounts split_counts(int total, const SplitFractions& fractions);

struct GenerateConfig {
  DomainSpec source = DomainSpec::source_default();
  DomainSpec target = DomainSpec::target_default();
  int source_count = 20;
  int target_count = 20;
  SplitFractions split;
  uint64_t seed = 0;
  void validate() const;
};

// Writes out_dir/images/*.png, out_dir/annotations/*.json and
// out_dir/manifest.json. Sample i of the combined source-then-target order
// uses seed cfg.seed + i. Returns the manifest path.
std::string generate_dataset(const GenerateConfig& cfg, const std::string& out_dir);

// Config JSON: every key optional with the defaults above, unknown keys
// rejected. The manifest's "generator" block uses the same schema.
GenerateConfig parse_generate_config_text(const std::string& text,
                                          const std::string& context);
GenerateConfig parse_generate_config_file(const std::string& path);

// Annotations are parsed and validated up front; pixels decode on demand.
struct DatasetEntry {
  std::string image_path;
  std::string annotation_path;
  Domain domain = Domain::kSource;
  Split split = Split::kTrain;
  int64_t width = 0;
  int64_t height = 0;
  std::vector<InstanceAnnotation> annotations;

  ImageRgb load_image() const;
  SceneSample load_sample() const;
};

struct Dataset {
  std::string root;
  std::vector<DatasetEntry> entries;

  std::vector<const DatasetEntry*> select(Split split) const;
  std::vector<const DatasetEntry*> select(Split split, Domain domain) const;
};

Dataset load_dataset(const std::string& manifest_path);

// Channel-wise normalization in 8-bit units from the source train split.
struct NormStats {
  double mean[3] = {0.0, 0.0, 0.0};
  double stddev[3] = {1.0, 1.0, 1.0};
};
NormStats compute_norm_stats(const Dataset& dataset);

// (1,3,H,W) and (N,3,H,W) float tensors holding (value - mean) / stddev.
Tensor image_to_tensor(const ImageRgb& image, const NormStats& stats);
Tensor images_to_tensor(const std::vector<ImageRgb>& images,
                        const NormStats& stats);

}  // namespace maad
