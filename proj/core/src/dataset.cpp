#include "maad/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json_util.hpp"

namespace maad {

namespace fs = std::filesystem;
using jsonutil::json;

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  throw std::logic_error("split_name: bad enum");
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw std::invalid_argument("unknown split name: " + name);
}

void SplitFractions::validate() const {
  if (train < 0.0 || val < 0.0 || test < 0.0) {
    throw std::invalid_argument("split fractions must be nonnegative");
  }
  if (std::abs(train + val + test - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions must sum to 1");
  }
}

SplitCounts split_counts(int total, const SplitFractions& fractions) {
  fractions.validate();
  if (total < 0) {
    throw std::invalid_argument("split_counts: negative total");
  }
  // The epsilon keeps exact products like 20 * 0.7 from flooring down.
  SplitCounts c;
  c.train = static_cast<int>(std::floor(total * fractions.train + 1e-9));
  c.val = static_cast<int>(std::floor(total * fractions.val + 1e-9));
  c.test = static_cast<int>(std::floor(total * fractions.test + 1e-9));
  int leftover = total - (c.train + c.val + c.test);
  int* slot[3] = {&c.train, &c.val, &c.test};
  for (int i = 0; leftover > 0; i = (i + 1) % 3, --leftover) {
    ++*slot[i];
  }
  return c;
}

void GenerateConfig::validate() const {
  source.validate();
  target.validate();
  if (source.domain != Domain::kSource || target.domain != Domain::kTarget) {
    throw std::invalid_argument("generate config: spec domains swapped");
  }
  if (source.image_size != target.image_size) {
    throw std::invalid_argument(
        "generate config: domains must share one image size");
  }
  if (source_count <= 0 || target_count <= 0) {
    throw std::invalid_argument("generate config: counts must be positive");
  }
  split.validate();
}

namespace {

std::string sample_stem(Domain domain, int index, int count) {
  int width = 3;
  for (int v = count - 1; v >= 1000; v /= 10) ++width;
  std::ostringstream name;
  name << domain_name(domain) << "_";
  name.width(width);
  name.fill('0');
  name << index;
  return name.str();
}

json points_to_json(const Polyline& line) {
  json arr = json::array();
  for (const Vec2& p : line.points) {
    arr.push_back({p.x, p.y});
  }
  return arr;
}

json annotation_to_json(const InstanceAnnotation& ann) {
  json j;
  j["obb"] = {{"cx", ann.obb.cx},
              {"cy", ann.obb.cy},
              {"w", ann.obb.w},
              {"h", ann.obb.h},
              {"theta_rad", ann.obb.theta}};
  j["stem"] = points_to_json(ann.stem);
  j["vein"] = points_to_json(ann.vein);
  return j;
}

json spec_to_json(const DomainSpec& s) {
  return {{"image_size", s.image_size},
          {"leaves", {s.leaves.lo, s.leaves.hi}},
          {"leaf_scale", {s.leaf_scale.lo, s.leaf_scale.hi}},
          {"background",
           s.background == BackgroundKind::kTextured ? "textured" : "grass"},
          {"noise_octaves", s.noise_octaves},
          {"base_intensity", s.base_intensity},
          {"stroke_density", s.stroke_density},
          {"brightness", s.brightness},
          {"clutter", s.clutter}};
}

json config_to_json(const GenerateConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["source_count"] = cfg.source_count;
  j["target_count"] = cfg.target_count;
  j["split"] = {{"train", cfg.split.train},
                {"val", cfg.split.val},
                {"test", cfg.split.test}};
  j["source"] = spec_to_json(cfg.source);
  j["target"] = spec_to_json(cfg.target);
  return j;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) {
    throw std::runtime_error("cannot write " + path);
  }
}

Split split_for_index(int index, const SplitCounts& counts) {
  if (index < counts.train) return Split::kTrain;
  if (index < counts.train + counts.val) return Split::kVal;
  return Split::kTest;
}

void parse_spec_json(const json& j, const std::string& context, DomainSpec* spec) {
  jsonutil::reject_unknown_keys(
      j, context,
      {"image_size", "leaves", "leaf_scale", "background", "noise_octaves",
       "base_intensity", "stroke_density", "brightness", "clutter"});
  auto range_pair = [&](const json& v, const std::string& where, bool integral) {
    if (!v.is_array() || v.size() != 2) {
      throw std::runtime_error(where + ": expected [lo, hi]");
    }
    if (integral) {
      return std::pair<double, double>(
          static_cast<double>(jsonutil::as_integer(v[0], where)),
          static_cast<double>(jsonutil::as_integer(v[1], where)));
    }
    return std::pair<double, double>(jsonutil::as_number(v[0], where),
                                     jsonutil::as_number(v[1], where));
  };
  if (j.contains("image_size")) {
    spec->image_size =
        static_cast<int>(jsonutil::as_integer(j["image_size"], context + ".image_size"));
  }
  if (j.contains("leaves")) {
    auto [lo, hi] = range_pair(j["leaves"], context + ".leaves", true);
    spec->leaves = {static_cast<int>(lo), static_cast<int>(hi)};
  }
  if (j.contains("leaf_scale")) {
    auto [lo, hi] = range_pair(j["leaf_scale"], context + ".leaf_scale", false);
    spec->leaf_scale = {lo, hi};
  }
  if (j.contains("background")) {
    const std::string kind =
        jsonutil::as_string(j["background"], context + ".background");
    if (kind == "textured") {
      spec->background = BackgroundKind::kTextured;
    } else if (kind == "grass") {
      spec->background = BackgroundKind::kGrass;
    } else {
      throw std::runtime_error(context +
                               ".background: expected \"textured\" or \"grass\"");
    }
  }
  if (j.contains("noise_octaves")) {
    spec->noise_octaves = static_cast<int>(
        jsonutil::as_integer(j["noise_octaves"], context + ".noise_octaves"));
  }
  if (j.contains("base_intensity")) {
    spec->base_intensity =
        jsonutil::as_number(j["base_intensity"], context + ".base_intensity");
  }
  if (j.contains("stroke_density")) {
    spec->stroke_density =
        jsonutil::as_number(j["stroke_density"], context + ".stroke_density");
  }
  if (j.contains("brightness")) {
    spec->brightness =
        jsonutil::as_number(j["brightness"], context + ".brightness");
  }
  if (j.contains("clutter")) {
    spec->clutter = jsonutil::as_number(j["clutter"], context + ".clutter");
  }
}

GenerateConfig parse_generate_config_json(const json& j, const std::string& context) {
  jsonutil::reject_unknown_keys(
      j, context,
      {"seed", "source_count", "target_count", "split", "source", "target"});
  GenerateConfig cfg;
  if (j.contains("seed")) {
    const json& v = j["seed"];
    if (!v.is_number_integer() && !v.is_number_unsigned()) {
      throw std::runtime_error(context + ".seed: expected an integer");
    }
    cfg.seed = v.get<uint64_t>();
  }
  if (j.contains("source_count")) {
    cfg.source_count = static_cast<int>(
        jsonutil::as_integer(j["source_count"], context + ".source_count"));
  }
  if (j.contains("target_count")) {
    cfg.target_count = static_cast<int>(
        jsonutil::as_integer(j["target_count"], context + ".target_count"));
  }
  if (j.contains("split")) {
    const std::string where = context + ".split";
    jsonutil::require_object_keys(j["split"], where, {"train", "val", "test"});
    cfg.split.train = jsonutil::as_number(j["split"]["train"], where + ".train");
    cfg.split.val = jsonutil::as_number(j["split"]["val"], where + ".val");
    cfg.split.test = jsonutil::as_number(j["split"]["test"], where + ".test");
  }
  if (j.contains("source")) {
    parse_spec_json(j["source"], context + ".source", &cfg.source);
  }
  if (j.contains("target")) {
    parse_spec_json(j["target"], context + ".target", &cfg.target);
  }
  cfg.validate();
  return cfg;
}

}  // namespace

GenerateConfig parse_generate_config_text(const std::string& text,
                                          const std::string& context) {
  return parse_generate_config_json(jsonutil::parse_text(text, context), context);
}

GenerateConfig parse_generate_config_file(const std::string& path) {
  return parse_generate_config_json(jsonutil::parse_file(path), path);
}

std::string generate_dataset(const GenerateConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const fs::path root(out_dir);
  fs::create_directories(root / "images");
  fs::create_directories(root / "annotations");

  json splits;
  for (const char* name : {"train", "val", "test"}) {
    splits[name] = json::array();
  }

  struct DomainPlan {
    const DomainSpec* spec;
    int count;
    uint64_t seed_base;
  };
  const DomainPlan plans[2] = {
      {&cfg.source, cfg.source_count, cfg.seed},
      {&cfg.target, cfg.target_count,
       cfg.seed + static_cast<uint64_t>(cfg.source_count)},
  };

  for (const DomainPlan& plan : plans) {
    const SplitCounts counts = split_counts(plan.count, cfg.split);
    for (int i = 0; i < plan.count; ++i) {
      const SceneSample sample =
          generate_scene(*plan.spec, plan.seed_base + static_cast<uint64_t>(i));
      const std::string stem = sample_stem(plan.spec->domain, i, plan.count);
      const std::string image_rel = "images/" + stem + ".png";
      const std::string ann_rel = "annotations/" + stem + ".json";

      write_png((root / image_rel).string(), sample.image);

      json ann_json;
      ann_json["image"] = image_rel;
      ann_json["domain"] = domain_name(sample.domain);
      ann_json["instances"] = json::array();
      for (const InstanceAnnotation& ann : sample.annotations) {
        ann_json["instances"].push_back(annotation_to_json(ann));
      }
      write_text_file((root / ann_rel).string(), ann_json.dump(2) + "\n");

      splits[split_name(split_for_index(i, counts))].push_back(ann_rel);
    }
  }

  json manifest;
  manifest["generator"] = config_to_json(cfg);
  manifest["splits"] = splits;
  const std::string manifest_path = (root / "manifest.json").string();
  write_text_file(manifest_path, manifest.dump(2) + "\n");
  return manifest_path;
}

namespace {

[[noreturn]] void fail_at(const std::string& file, const std::string& message) {
  throw std::runtime_error("load_dataset: " + file + ": " + message);
}

Vec2 parse_point(const json& v, const std::string& file, const std::string& where) {
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
    fail_at(file, where + ": expected [x, y]");
  }
  return Vec2{v[0].get<double>(), v[1].get<double>()};
}

Polyline parse_polyline(const json& v, PartLabel part, const std::string& file,
                        const std::string& where) {
  if (!v.is_array() || v.size() < 2) {
    fail_at(file, where + ": expected at least two points");
  }
  Polyline line;
  line.part = part;
  for (size_t k = 0; k < v.size(); ++k) {
    line.points.push_back(
        parse_point(v[k], file, where + "[" + std::to_string(k) + "]"));
  }
  return line;
}

DatasetEntry load_entry(const fs::path& ann_path, const fs::path& root,
                        Split split) {
  const std::string file = ann_path.string();
  if (!fs::exists(ann_path)) {
    fail_at(file, "annotation file not found");
  }
  json j;
  try {
    j = jsonutil::parse_file(file);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string("load_dataset: ") + e.what());
  }
  try {
    jsonutil::require_object_keys(j, "annotation", {"image", "domain", "instances"});
  } catch (const std::runtime_error& e) {
    fail_at(file, e.what());
  }

  DatasetEntry entry;
  entry.annotation_path = file;
  entry.split = split;

  std::string image_rel;
  try {
    image_rel = jsonutil::as_string(j["image"], "image");
    const std::string domain = jsonutil::as_string(j["domain"], "domain");
    if (domain != "source" && domain != "target") {
      throw std::runtime_error("domain: expected \"source\" or \"target\"");
    }
    entry.domain = parse_domain(domain);
  } catch (const std::runtime_error& e) {
    fail_at(file, e.what());
  }

  const fs::path image_path =
      fs::path(image_rel).is_absolute() ? fs::path(image_rel) : root / image_rel;
  entry.image_path = image_path.string();
  if (!fs::exists(image_path)) {
    fail_at(file, "missing image file " + entry.image_path);
  }
  const PngSize size = png_size(entry.image_path);
  entry.width = size.width;
  entry.height = size.height;

  const json& instances = j["instances"];
  if (!instances.is_array()) {
    fail_at(file, "instances: expected an array");
  }
  for (size_t i = 0; i < instances.size(); ++i) {
    const std::string where = "instance " + std::to_string(i);
    InstanceAnnotation ann;
    try {
      const json& inst = instances[i];
      jsonutil::require_object_keys(inst, where, {"obb", "stem", "vein"});
      const json& obb = inst["obb"];
      jsonutil::require_object_keys(obb, where + ".obb",
                                    {"cx", "cy", "w", "h", "theta_rad"});
      ann.obb.cx = jsonutil::as_number(obb["cx"], where + ".obb.cx");
      ann.obb.cy = jsonutil::as_number(obb["cy"], where + ".obb.cy");
      ann.obb.w = jsonutil::as_number(obb["w"], where + ".obb.w");
      ann.obb.h = jsonutil::as_number(obb["h"], where + ".obb.h");
      ann.obb.theta = jsonutil::as_number(obb["theta_rad"], where + ".obb.theta_rad");
      ann.stem = parse_polyline(inst["stem"], PartLabel::kStem, file, where + ".stem");
      ann.vein = parse_polyline(inst["vein"], PartLabel::kVein, file, where + ".vein");
      validate_annotation(ann);
    } catch (const std::invalid_argument& e) {
      fail_at(file, where + ": " + e.what());
    } catch (const std::runtime_error& e) {
      fail_at(file, e.what());
    }
    auto inside = [&](Vec2 p) {
      return p.x >= 0.0 && p.x < static_cast<double>(entry.width) && p.y >= 0.0 &&
             p.y < static_cast<double>(entry.height);
    };
    bool ok = inside({ann.obb.cx, ann.obb.cy});
    for (const Polyline* line : {&ann.stem, &ann.vein}) {
      for (const Vec2& p : line->points) ok = ok && inside(p);
    }
    if (!ok) {
      fail_at(file, where + ": geometry outside image bounds");
    }
    entry.annotations.push_back(std::move(ann));
  }
  return entry;
}

}  // namespace

ImageRgb DatasetEntry::load_image() const { return read_png(image_path); }

SceneSample DatasetEntry::load_sample() const {
  SceneSample sample;
  sample.image = load_image();
  sample.annotations = annotations;
  sample.domain = domain;
  sample.seed = 0;
  sample.requested_leaves = static_cast<int>(annotations.size());
  return sample;
}

std::vector<const DatasetEntry*> Dataset::select(Split split) const {
  std::vector<const DatasetEntry*> out;
  for (const DatasetEntry& e : entries) {
    if (e.split == split) out.push_back(&e);
  }
  return out;
}

std::vector<const DatasetEntry*> Dataset::select(Split split, Domain domain) const {
  std::vector<const DatasetEntry*> out;
  for (const DatasetEntry& e : entries) {
    if (e.split == split && e.domain == domain) out.push_back(&e);
  }
  return out;
}

Dataset load_dataset(const std::string& manifest_path) {
  const fs::path mpath(manifest_path);
  if (!fs::exists(mpath)) {
    fail_at(manifest_path, "manifest not found");
  }
  const fs::path root = mpath.parent_path();

  json manifest;
  try {
    manifest = jsonutil::parse_file(manifest_path);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string("load_dataset: ") + e.what());
  }
  try {
    jsonutil::require_object_keys(manifest, "manifest", {"generator", "splits"});
    jsonutil::require_object_keys(manifest["splits"], "splits",
                                  {"train", "val", "test"});
  } catch (const std::runtime_error& e) {
    fail_at(manifest_path, e.what());
  }

  Dataset ds;
  ds.root = root.string();
  std::set<std::string> listed;
  for (Split split : {Split::kTrain, Split::kVal, Split::kTest}) {
    const json& list = manifest["splits"][split_name(split)];
    if (!list.is_array()) {
      fail_at(manifest_path, "splits." + split_name(split) + ": expected an array");
    }
    for (const json& item : list) {
      if (!item.is_string()) {
        fail_at(manifest_path,
                "splits." + split_name(split) + ": entries must be strings");
      }
      const std::string rel = item.get<std::string>();
      if (!listed.insert(rel).second) {
        fail_at(manifest_path, "annotation listed twice: " + rel);
      }
      const fs::path ann_path =
          fs::path(rel).is_absolute() ? fs::path(rel) : root / rel;
      ds.entries.push_back(load_entry(ann_path, root, split));
    }
  }
  return ds;
}

NormStats compute_norm_stats(const Dataset& dataset) {
  double sum[3] = {0, 0, 0};
  double sum_sq[3] = {0, 0, 0};
  int64_t count = 0;
  for (const DatasetEntry& e : dataset.entries) {
    if (e.split != Split::kTrain || e.domain != Domain::kSource) continue;
    const ImageRgb img = e.load_image();
    for (size_t i = 0; i < img.pixels.size(); i += 3) {
      for (int c = 0; c < 3; ++c) {
        const double v = img.pixels[i + c];
        sum[c] += v;
        sum_sq[c] += v * v;
      }
    }
    count += img.width * img.height;
  }
  if (count == 0) {
    throw std::invalid_argument("compute_norm_stats: no source train images");
  }
  NormStats stats;
  for (int c = 0; c < 3; ++c) {
    stats.mean[c] = sum[c] / static_cast<double>(count);
    const double var =
        std::max(0.0, sum_sq[c] / static_cast<double>(count) -
                          stats.mean[c] * stats.mean[c]);
    stats.stddev[c] = std::max(1e-6, std::sqrt(var));
  }
  return stats;
}

Tensor image_to_tensor(const ImageRgb& image, const NormStats& stats) {
  return images_to_tensor({image}, stats);
}

Tensor images_to_tensor(const std::vector<ImageRgb>& images,
                        const NormStats& stats) {
  if (images.empty()) {
    throw std::invalid_argument("images_to_tensor: empty batch");
  }
  const int64_t h = images.front().height;
  const int64_t w = images.front().width;
  const int64_t n = static_cast<int64_t>(images.size());
  std::vector<double> values(static_cast<size_t>(n * 3 * h * w));
  for (int64_t b = 0; b < n; ++b) {
    const ImageRgb& img = images[static_cast<size_t>(b)];
    if (img.width != w || img.height != h ||
        img.pixels.size() != static_cast<size_t>(w * h * 3)) {
      throw std::invalid_argument("images_to_tensor: inconsistent image sizes");
    }
    for (int c = 0; c < 3; ++c) {
      const double inv = 1.0 / stats.stddev[c];
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
          values[static_cast<size_t>(((b * 3 + c) * h + y) * w + x)] =
              (img.at(x, y, c) - stats.mean[c]) * inv;
        }
      }
    }
  }
  return Tensor::from_values({n, 3, h, w}, std::move(values));
}

}  // namespace maad
