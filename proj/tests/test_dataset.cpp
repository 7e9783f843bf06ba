#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "maad/dataset.hpp"
#include "maad/image.hpp"
#include "maad/synth.hpp"

using namespace maad;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "maad_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  REQUIRE(out.good());
}

template <typename Fn>
std::string thrown_message(Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

GenerateConfig small_config(int source_count, int target_count, uint64_t seed) {
  GenerateConfig cfg;
  cfg.source.image_size = 32;
  cfg.source.leaves = {2, 4};
  cfg.source.leaf_scale = {0.15, 0.40};
  cfg.target.image_size = 32;
  cfg.source_count = source_count;
  cfg.target_count = target_count;
  cfg.seed = seed;
  return cfg;
}

// One valid 8x8 scene: image img.png, one instance, all geometry in bounds.
std::string annotation_text(double box_w, const std::string& domain,
                            const std::string& image) {
  std::ostringstream s;
  s << "{\"image\": \"" << image << "\", \"domain\": \"" << domain << "\", "
    << "\"instances\": [{\"obb\": {\"cx\": 4.0, \"cy\": 3.0, \"w\": " << box_w
    << ", \"h\": 2.0, \"theta_rad\": 0.25}, "
    << "\"stem\": [[5.0, 4.5], [4.0, 4.0], [3.0, 3.0]], "
    << "\"vein\": [[3.0, 3.0], [5.5, 3.5]]}]}";
  return s.str();
}

std::string manifest_text(const std::string& train_list) {
  return "{\"generator\": {}, \"splits\": {\"train\": [" + train_list +
         "], \"val\": [], \"test\": []}}";
}

}  // namespace

TEST_CASE("split counts floor each fraction then hand out the remainder") {
  const SplitFractions f;  // 0.70 / 0.15 / 0.15
  SplitCounts c = split_counts(20, f);
  CHECK(c.train == 14);
  CHECK(c.val == 3);
  CHECK(c.test == 3);

  c = split_counts(7, f);  // floors 4/1/1, one left over, goes to train
  CHECK(c.train == 5);
  CHECK(c.val == 1);
  CHECK(c.test == 1);

  c = split_counts(1, f);
  CHECK(c.train == 1);
  CHECK(c.val == 0);
  CHECK(c.test == 0);

  const SplitFractions thirds{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  c = split_counts(5, thirds);  // floors 1/1/1, two left, train then val
  CHECK(c.train == 2);
  CHECK(c.val == 2);
  CHECK(c.test == 1);

  c = split_counts(0, f);
  CHECK(c.train + c.val + c.test == 0);

  CHECK_THROWS_AS(split_counts(-1, f), std::invalid_argument);
  CHECK_THROWS_AS(split_counts(4, SplitFractions{0.5, 0.5, 0.5}),
                  std::invalid_argument);
  CHECK_THROWS_AS(split_counts(4, SplitFractions{-0.1, 0.6, 0.5}),
                  std::invalid_argument);
}

TEST_CASE("generate_dataset writes a tree the loader round-trips") {
  const fs::path root = fresh_dir("tree");
  const GenerateConfig cfg = small_config(20, 20, 11);
  const std::string manifest = generate_dataset(cfg, root.string());
  CHECK(manifest == (root / "manifest.json").string());

  CHECK(fs::exists(root / "images" / "source_000.png"));
  CHECK(fs::exists(root / "images" / "source_019.png"));
  CHECK(fs::exists(root / "images" / "target_019.png"));
  CHECK(fs::exists(root / "annotations" / "target_000.json"));

  const Dataset ds = load_dataset(manifest);
  REQUIRE(ds.entries.size() == 40);
  // The documented split rule: 20 images at 70/15/15 give 14/3/3 per domain.
  CHECK(ds.select(Split::kTrain, Domain::kSource).size() == 14);
  CHECK(ds.select(Split::kVal, Domain::kSource).size() == 3);
  CHECK(ds.select(Split::kTest, Domain::kSource).size() == 3);
  CHECK(ds.select(Split::kTrain, Domain::kTarget).size() == 14);
  CHECK(ds.select(Split::kVal, Domain::kTarget).size() == 3);
  CHECK(ds.select(Split::kTest, Domain::kTarget).size() == 3);

  for (const DatasetEntry& e : ds.entries) {
    CHECK(e.width == 32);
    CHECK(e.height == 32);
  }

  // Sample i of the source-then-target order was generated with seed 11 + i,
  // and JSON round-trips every annotation double exactly.
  const DatasetEntry& src2 = ds.entries[2];  // train list starts with source
  CHECK(src2.domain == Domain::kSource);
  const SceneSample regen = generate_scene(cfg.source, 11 + 2);
  REQUIRE(src2.annotations.size() == regen.annotations.size());
  for (size_t i = 0; i < regen.annotations.size(); ++i) {
    CHECK(src2.annotations[i].obb.cx == regen.annotations[i].obb.cx);
    CHECK(src2.annotations[i].obb.theta == regen.annotations[i].obb.theta);
    CHECK(src2.annotations[i].stem.points[0].x ==
          regen.annotations[i].stem.points[0].x);
    CHECK(src2.annotations[i].vein.points[3].y ==
          regen.annotations[i].vein.points[3].y);
  }
  CHECK(src2.load_image().pixels == regen.image.pixels);

  const DatasetEntry& tgt1 = ds.entries[15];  // train: 14 source then target
  CHECK(tgt1.domain == Domain::kTarget);
  const SceneSample regen_t = generate_scene(cfg.target, 11 + 20 + 1);
  REQUIRE(tgt1.annotations.size() == regen_t.annotations.size());
  if (!regen_t.annotations.empty()) {
    CHECK(tgt1.annotations[0].obb.cy == regen_t.annotations[0].obb.cy);
  }

  const SceneSample loaded = tgt1.load_sample();
  CHECK(loaded.domain == Domain::kTarget);
  CHECK(loaded.image.width == 32);
  CHECK(loaded.annotations.size() == tgt1.annotations.size());

  CHECK_THROWS_AS(generate_dataset(GenerateConfig{small_config(0, 3, 0)}, "x"),
                  std::invalid_argument);
  GenerateConfig swapped = small_config(2, 2, 0);
  swapped.source.domain = Domain::kTarget;
  CHECK_THROWS_AS(generate_dataset(swapped, "x"), std::invalid_argument);
  GenerateConfig mismatched = small_config(2, 2, 0);
  mismatched.target.image_size = 64;
  CHECK_THROWS_AS(generate_dataset(mismatched, "x"), std::invalid_argument);

  fs::remove_all(root);
}

TEST_CASE("generate_dataset is byte-deterministic in the seed") {
  const fs::path a = fresh_dir("det_a");
  const fs::path b = fresh_dir("det_b");
  const GenerateConfig cfg = small_config(3, 2, 99);
  generate_dataset(cfg, a.string());
  generate_dataset(cfg, b.string());

  CHECK(read_bytes(a / "manifest.json") == read_bytes(b / "manifest.json"));
  for (const char* sub : {"images", "annotations"}) {
    std::vector<fs::path> names;
    for (const auto& item : fs::directory_iterator(a / sub)) {
      names.push_back(item.path().filename());
    }
    REQUIRE(names.size() == 5);
    for (const fs::path& name : names) {
      CHECK(read_bytes(a / sub / name) == read_bytes(b / sub / name));
    }
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("load_dataset names the file and field when schemas break") {
  const fs::path root = fresh_dir("loader");
  write_png((root / "img.png").string(), ImageRgb::filled(8, 8, 90, 120, 60));

  write_text(root / "good.json", annotation_text(4.0, "source", "img.png"));
  write_text(root / "manifest.json", manifest_text("\"good.json\""));
  const Dataset ds = load_dataset((root / "manifest.json").string());
  REQUIRE(ds.entries.size() == 1);
  CHECK(ds.entries[0].annotations.size() == 1);
  CHECK(ds.entries[0].annotations[0].obb.w == 4.0);
  CHECK(ds.entries[0].width == 8);

  std::string msg = thrown_message(
      [&] { load_dataset((root / "absent_manifest.json").string()); });
  CHECK(msg.find("manifest not found") != std::string::npos);

  write_text(root / "m_missing.json", manifest_text("\"missing.json\""));
  msg = thrown_message([&] { load_dataset((root / "m_missing.json").string()); });
  CHECK(msg.find("missing.json") != std::string::npos);
  CHECK(msg.find("not found") != std::string::npos);

  write_text(root / "noimg.json", annotation_text(4.0, "source", "gone.png"));
  write_text(root / "m_noimg.json", manifest_text("\"noimg.json\""));
  msg = thrown_message([&] { load_dataset((root / "m_noimg.json").string()); });
  CHECK(msg.find("noimg.json") != std::string::npos);
  CHECK(msg.find("gone.png") != std::string::npos);

  write_text(root / "badw.json", annotation_text(-1.0, "source", "img.png"));
  write_text(root / "m_badw.json", manifest_text("\"badw.json\""));
  msg = thrown_message([&] { load_dataset((root / "m_badw.json").string()); });
  CHECK(msg.find("badw.json") != std::string::npos);
  CHECK(msg.find("instance 0") != std::string::npos);

  write_text(root / "baddom.json", annotation_text(4.0, "both", "img.png"));
  write_text(root / "m_baddom.json", manifest_text("\"baddom.json\""));
  msg = thrown_message([&] { load_dataset((root / "m_baddom.json").string()); });
  CHECK(msg.find("domain") != std::string::npos);

  std::string extra = annotation_text(4.0, "source", "img.png");
  extra.insert(extra.size() - 3, ", \"color\": 3");  // inside the instance
  write_text(root / "extra.json", extra);
  write_text(root / "m_extra.json", manifest_text("\"extra.json\""));
  msg = thrown_message([&] { load_dataset((root / "m_extra.json").string()); });
  CHECK(msg.find("unknown key") != std::string::npos);
  CHECK(msg.find("color") != std::string::npos);

  write_text(root / "broken.json", "{\"image\": ");
  write_text(root / "m_broken.json", manifest_text("\"broken.json\""));
  msg = thrown_message([&] { load_dataset((root / "m_broken.json").string()); });
  CHECK(msg.find("malformed JSON") != std::string::npos);

  write_text(root / "m_nosplits.json", "{\"generator\": {}}");
  msg = thrown_message([&] { load_dataset((root / "m_nosplits.json").string()); });
  CHECK(msg.find("missing key") != std::string::npos);
  CHECK(msg.find("splits") != std::string::npos);

  // Center at x=9 in an 8-wide image.
  std::string outside = annotation_text(4.0, "source", "img.png");
  const size_t pos = outside.find("\"cx\": 4.0");
  REQUIRE(pos != std::string::npos);
  outside.replace(pos, 9, "\"cx\": 9.0");
  write_text(root / "oob.json", outside);
  write_text(root / "m_oob.json", manifest_text("\"oob.json\""));
  msg = thrown_message([&] { load_dataset((root / "m_oob.json").string()); });
  CHECK(msg.find("geometry outside image bounds") != std::string::npos);

  write_text(root / "m_dup.json", manifest_text("\"good.json\", \"good.json\""));
  msg = thrown_message([&] { load_dataset((root / "m_dup.json").string()); });
  CHECK(msg.find("listed twice") != std::string::npos);

  // A one-point polyline fails before geometry validation.
  write_text(root / "short.json",
             "{\"image\": \"img.png\", \"domain\": \"source\", \"instances\": "
             "[{\"obb\": {\"cx\": 4.0, \"cy\": 3.0, \"w\": 4.0, \"h\": 2.0, "
             "\"theta_rad\": 0.25}, \"stem\": [[3.0, 3.0]], "
             "\"vein\": [[3.0, 3.0], [5.5, 3.5]]}]}");
  write_text(root / "m_short.json", manifest_text("\"short.json\""));
  msg = thrown_message([&] { load_dataset((root / "m_short.json").string()); });
  CHECK(msg.find("at least two points") != std::string::npos);

  fs::remove_all(root);
}

TEST_CASE("norm stats come from source train pixels only") {
  const fs::path root = fresh_dir("norm");
  write_png((root / "flat.png").string(), ImageRgb::filled(6, 5, 200, 100, 50));
  write_text(root / "flat.json",
             "{\"image\": \"flat.png\", \"domain\": \"source\", \"instances\": []}");
  write_text(root / "manifest.json", manifest_text("\"flat.json\""));

  const Dataset ds = load_dataset((root / "manifest.json").string());
  REQUIRE(ds.entries.size() == 1);
  CHECK(ds.entries[0].annotations.empty());

  const NormStats stats = compute_norm_stats(ds);
  CHECK(stats.mean[0] == 200.0);
  CHECK(stats.mean[1] == 100.0);
  CHECK(stats.mean[2] == 50.0);
  CHECK(stats.stddev[0] == 1e-6);  // constant channel clamps to the floor
  CHECK(stats.stddev[2] == 1e-6);

  NormStats custom;
  custom.mean[0] = 10.0;
  custom.mean[1] = 20.0;
  custom.mean[2] = 30.0;
  custom.stddev[0] = 2.0;
  custom.stddev[1] = 4.0;
  custom.stddev[2] = 8.0;
  const ImageRgb img = ds.entries[0].load_image();
  const Tensor t = image_to_tensor(img, custom);
  REQUIRE(t.shape() == Shape{1, 3, 5, 6});
  CHECK(t.values()[0] == (200.0 - 10.0) / 2.0);
  CHECK(t.values()[30] == (100.0 - 20.0) / 4.0);   // channel 1 plane
  CHECK(t.values()[60] == (50.0 - 30.0) / 8.0);    // channel 2 plane

  const Tensor batch = images_to_tensor({img, img}, custom);
  REQUIRE(batch.shape() == Shape{2, 3, 5, 6});
  CHECK(batch.values()[0] == batch.values()[90]);

  CHECK_THROWS_AS(images_to_tensor({}, custom), std::invalid_argument);
  CHECK_THROWS_AS(images_to_tensor({img, ImageRgb::filled(4, 4, 0, 0, 0)}, custom),
                  std::invalid_argument);

  // No source-train entries means stats are undefined.
  write_text(root / "m_valonly.json",
             "{\"generator\": {}, \"splits\": {\"train\": [], \"val\": "
             "[\"flat.json\"], \"test\": []}}");
  const Dataset val_only = load_dataset((root / "m_valonly.json").string());
  CHECK_THROWS_AS(compute_norm_stats(val_only), std::invalid_argument);

  // Cross-check against a straightforward recomputation on generated data.
  const fs::path gen = fresh_dir("norm_gen");
  GenerateConfig cfg = small_config(4, 2, 5);
  cfg.source.image_size = 16;
  cfg.target.image_size = 16;
  cfg.source.leaf_scale = {0.15, 0.3};
  const Dataset gds = load_dataset(generate_dataset(cfg, gen.string()));
  const NormStats gstats = compute_norm_stats(gds);
  double sum[3] = {0, 0, 0}, sum_sq[3] = {0, 0, 0};
  int64_t count = 0;
  for (const DatasetEntry* e : gds.select(Split::kTrain, Domain::kSource)) {
    const ImageRgb im = e->load_image();
    for (size_t i = 0; i < im.pixels.size(); i += 3) {
      for (int c = 0; c < 3; ++c) {
        sum[c] += im.pixels[i + c];
        sum_sq[c] += static_cast<double>(im.pixels[i + c]) * im.pixels[i + c];
      }
    }
    count += im.width * im.height;
  }
  REQUIRE(count > 0);
  for (int c = 0; c < 3; ++c) {
    const double mean = sum[c] / count;
    const double var = sum_sq[c] / count - mean * mean;
    CHECK(gstats.mean[c] == doctest::Approx(mean).epsilon(1e-12));
    CHECK(gstats.stddev[c] ==
          doctest::Approx(std::sqrt(std::max(0.0, var))).epsilon(1e-9));
  }
  fs::remove_all(root);
  fs::remove_all(gen);
}

TEST_CASE("generate config JSON is strict about keys and values") {
  const std::string text = R"({
    "seed": 7,
    "source_count": 5,
    "target_count": 4,
    "split": {"train": 0.6, "val": 0.2, "test": 0.2},
    "source": {"image_size": 32, "leaves": [2, 5], "leaf_scale": [0.2, 0.4]},
    "target": {"image_size": 32, "background": "grass", "brightness": 0.5}
  })";
  const GenerateConfig cfg = parse_generate_config_text(text, "cfg");
  CHECK(cfg.seed == 7);
  CHECK(cfg.source_count == 5);
  CHECK(cfg.target_count == 4);
  CHECK(cfg.split.train == 0.6);
  CHECK(cfg.source.image_size == 32);
  CHECK(cfg.source.leaves.lo == 2);
  CHECK(cfg.source.leaves.hi == 5);
  CHECK(cfg.source.leaf_scale.lo == 0.2);
  CHECK(cfg.target.background == BackgroundKind::kGrass);
  CHECK(cfg.target.brightness == 0.5);
  CHECK(cfg.target.leaves.lo == 3);  // untouched default

  std::string msg = thrown_message(
      [&] { parse_generate_config_text("{\"bogus\": 1}", "cfg"); });
  CHECK(msg.find("unknown key") != std::string::npos);
  CHECK(msg.find("bogus") != std::string::npos);

  msg = thrown_message([&] {
    parse_generate_config_text("{\"split\": {\"train\": 1.0, \"val\": 0.0}}",
                               "cfg");
  });
  CHECK(msg.find("missing key") != std::string::npos);

  msg = thrown_message([&] {
    parse_generate_config_text("{\"source\": {\"background\": \"sky\"}}", "cfg");
  });
  CHECK(msg.find("background") != std::string::npos);

  CHECK_THROWS_AS(parse_generate_config_text("{\"source_count\": 0}", "cfg"),
                  std::invalid_argument);
  // Differing per-domain sizes cannot batch together.
  CHECK_THROWS_AS(parse_generate_config_text(
                      "{\"source\": {\"image_size\": 32}}", "cfg"),
                  std::invalid_argument);

  // The manifest's generator block echoes the config schema exactly.
  const fs::path root = fresh_dir("cfg_echo");
  const GenerateConfig want = small_config(3, 2, 21);
  const std::string manifest = generate_dataset(want, root.string());
  const nlohmann::json m = nlohmann::json::parse(read_bytes(manifest));
  const GenerateConfig echoed =
      parse_generate_config_text(m.at("generator").dump(), "generator");
  CHECK(echoed.seed == want.seed);
  CHECK(echoed.source_count == want.source_count);
  CHECK(echoed.target_count == want.target_count);
  CHECK(echoed.source.image_size == want.source.image_size);
  CHECK(echoed.source.leaves.lo == want.source.leaves.lo);
  CHECK(echoed.source.leaf_scale.hi == want.source.leaf_scale.hi);
  CHECK(echoed.target.brightness == want.target.brightness);
  CHECK(echoed.split.val == want.split.val);
  fs::remove_all(root);
}
