#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "maad/dataset.hpp"
#include "maad/gradcheck_suite.hpp"
#include "maad/stats.hpp"
#include "maad/train.hpp"

namespace {

using namespace maad;
namespace fs = std::filesystem;
using nlohmann::json;

// exit codes: 0 success, 1 bad input or config, 2 failure while running
constexpr int kOk = 0;
constexpr int kBadInput = 1;
constexpr int kRuntimeFailure = 2;

std::string manifest_path(const std::string& data) {
  fs::path p(data);
  if (fs::is_directory(p)) p /= "manifest.json";
  return p.string();
}

int fail_input(const std::exception& e) {
  std::cerr << "error: " << e.what() << '\n';
  return kBadInput;
}

int fail_runtime(const std::exception& e) {
  std::cerr << "error: " << e.what() << '\n';
  return kRuntimeFailure;
}

json metrics_json(const EvalMetrics& m) {
  return json{{"map50_obb", 100.0 * m.map50_obb},
              {"map5095_oks", 100.0 * m.map5095_oks},
              {"map5095_poks_all", 100.0 * m.map5095_poks_all},
              {"map5095_poks_stem", 100.0 * m.map5095_poks_stem},
              {"map5095_poks_vein", 100.0 * m.map5095_poks_vein}};
}

json aggregate_json(const Aggregate& a) {
  return json{{"mean", a.mean}, {"stddev", a.stddev}};
}

int cmd_generate(const std::string& config_path, const std::string& out_dir) {
  GenerateConfig cfg;
  try {
    if (!config_path.empty()) cfg = parse_generate_config_file(config_path);
    cfg.validate();
  } catch (const std::exception& e) {
    return fail_input(e);
  }
  try {
    const std::string manifest = generate_dataset(cfg, out_dir);
    std::cout << "wrote " << manifest << " (" << cfg.source_count
              << " source + " << cfg.target_count << " target images)\n";
    return kOk;
  } catch (const std::exception& e) {
    return fail_runtime(e);
  }
}

int cmd_train(const std::string& config_path, const std::string& data,
              const std::string& out_dir) {
  TrainConfig cfg;
  Dataset dataset;
  try {
    if (!config_path.empty()) cfg = parse_train_config_file(config_path);
    cfg.validate();
    dataset = load_dataset(manifest_path(data));
  } catch (const std::exception& e) {
    return fail_input(e);
  }
  try {
    Trainer trainer(cfg, dataset);
    const RunReport report = trainer.run(out_dir);
    json out;
    out["method"] = method_name(cfg.method);
    out["epochs"] = report.epochs.size();
    out["final_metrics"] = metrics_json(report.final_metrics);
    out["wall_clock_seconds"] = report.wall_clock_seconds;
    out["report"] = (fs::path(out_dir) / "report.json").string();
    out["checkpoint"] = (fs::path(out_dir) / "checkpoint.bin").string();
    std::cout << out.dump(2) << '\n';
    return kOk;
  } catch (const std::invalid_argument& e) {
    return fail_input(e);
  } catch (const std::exception& e) {
    return fail_runtime(e);
  }
}

int cmd_evaluate(const std::string& checkpoint, const std::string& data,
                 const std::string& split_name_arg) {
  Split split = Split::kVal;
  Dataset dataset;
  std::optional<LoadedRun> run;
  try {
    split = parse_split(split_name_arg);
    dataset = load_dataset(manifest_path(data));
    run.emplace(load_run(checkpoint));
  } catch (const std::exception& e) {
    return fail_input(e);
  }
  try {
    json out;
    out["split"] = split_name(split);
    bool any = false;
    for (Domain d : {Domain::kSource, Domain::kTarget}) {
      const auto entries = dataset.select(split, d);
      if (entries.empty()) continue;
      out[domain_name(d)] =
          metrics_json(evaluate_model(run->model, run->config, run->norm, entries));
      any = true;
    }
    if (!any) {
      std::cerr << "error: the " << split_name(split) << " split is empty\n";
      return kBadInput;
    }
    std::cout << out.dump(2) << '\n';
    return kOk;
  } catch (const std::exception& e) {
    return fail_runtime(e);
  }
}

int cmd_stats(const std::string& data) {
  Dataset dataset;
  try {
    dataset = load_dataset(manifest_path(data));
  } catch (const std::exception& e) {
    return fail_input(e);
  }
  try {
    json out;
    for (Domain d : {Domain::kSource, Domain::kTarget}) {
      std::vector<ImageStats> per_image;
      std::vector<std::vector<InstanceAnnotation>> annotations;
      int64_t w = 0, h = 0;
      for (const auto& e : dataset.entries) {
        if (e.domain != d) continue;
        if (per_image.empty()) {
          w = e.width;
          h = e.height;
        } else if (e.width != w || e.height != h) {
          throw std::runtime_error("stats: images in one domain differ in size");
        }
        per_image.push_back(image_stats(e.load_image()));
        annotations.push_back(e.annotations);
      }
      if (per_image.empty()) continue;
      const DomainAggregates agg = domain_aggregates(
          per_image, annotations, static_cast<double>(w), static_cast<double>(h));
      out[domain_name(d)] = {
          {"images", per_image.size()},
          {"leaves_per_image", aggregate_json(agg.leaves_per_image)},
          {"leaf_width_pct", aggregate_json(agg.leaf_width_pct)},
          {"leaf_height_pct", aggregate_json(agg.leaf_height_pct)},
          {"intensity", aggregate_json(agg.intensity)},
          {"brightness", aggregate_json(agg.brightness)},
          {"edge_magnitude", aggregate_json(agg.edge_magnitude)}};
    }
    std::cout << out.dump(2) << '\n';
    return kOk;
  } catch (const std::exception& e) {
    return fail_runtime(e);
  }
}

int cmd_gradcheck(uint64_t seed) {
  try {
    const auto results = run_gradcheck_suite(seed);
    for (const auto& r : results) {
      std::cout << (r.pass ? "pass  " : "FAIL  ") << r.fragment
                << "  max_rel_err=" << r.max_rel_err << "  tol=" << r.tolerance
                << "  (" << r.seconds << "s, " << r.seeds << " seeds)\n";
    }
    return gradcheck_suite_passed(results) ? kOk : kRuntimeFailure;
  } catch (const std::exception& e) {
    return fail_runtime(e);
  }
}

int cmd_ablate(const std::string& config_path, const std::string& data,
               const std::string& out_dir, const std::string& grid) {
  TrainConfig base;
  Dataset dataset;
  std::vector<AblationCell> cells;
  try {
    if (!config_path.empty()) base = parse_train_config_file(config_path);
    base.validate();
    dataset = load_dataset(manifest_path(data));
    for (auto& cell : ablation_grid(base)) {
      if (grid == "all" || cell.grid == grid) cells.push_back(std::move(cell));
    }
    if (cells.empty()) {
      throw std::invalid_argument("ablate: grid must be components, weights or all");
    }
  } catch (const std::exception& e) {
    return fail_input(e);
  }
  try {
    const auto reports = run_ablation(cells, dataset, out_dir);
    for (size_t i = 0; i < cells.size(); ++i) {
      std::cout << cells[i].grid << ' ' << cells[i].id << "  map50_obb="
                << 100.0 * reports[i].final_metrics.map50_obb
                << "  map5095_oks=" << 100.0 * reports[i].final_metrics.map5095_oks
                << '\n';
    }
    std::cout << "wrote " << (fs::path(out_dir) / "comparison.csv").string() << '\n';
    return kOk;
  } catch (const std::exception& e) {
    return fail_runtime(e);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "oriented-box and keypoint detector with adversarial domain adaptation"};
  app.require_subcommand(1);

  std::string config_path, data, out_dir, checkpoint;
  std::string split = "val";
  std::string grid = "all";
  uint64_t seed = 7;

  auto* generate = app.add_subcommand("generate-data",
                                      "render a two-domain synthetic dataset");
  generate->add_option("--config", config_path, "generator config JSON");
  generate->add_option("--out", out_dir, "output dataset directory")->required();

  auto* train = app.add_subcommand("train", "train a detector");
  train->add_option("--config", config_path, "train config JSON");
  train->add_option("--data", data, "dataset directory or manifest")->required();
  train->add_option("--out", out_dir, "run output directory")->required();

  auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint");
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  evaluate->add_option("--data", data, "dataset directory or manifest")->required();
  evaluate->add_option("--split", split, "train, val or test");

  auto* stats = app.add_subcommand("stats", "per-domain dataset statistics");
  stats->add_option("--data", data, "dataset directory or manifest")->required();

  auto* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference checks over every differentiable op");
  gradcheck->add_option("--seed", seed, "base seed");

  auto* ablate = app.add_subcommand("ablate", "component and weight ablations");
  ablate->add_option("--config", config_path, "base train config JSON");
  ablate->add_option("--data", data, "dataset directory or manifest")->required();
  ablate->add_option("--out", out_dir, "ablation output directory")->required();
  ablate->add_option("--grid", grid, "components, weights or all");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadInput;
  }

  if (generate->parsed()) return cmd_generate(config_path, out_dir);
  if (train->parsed()) return cmd_train(config_path, data, out_dir);
  if (evaluate->parsed()) return cmd_evaluate(checkpoint, data, split);
  if (stats->parsed()) return cmd_stats(data);
  if (gradcheck->parsed()) return cmd_gradcheck(seed);
  if (ablate->parsed()) return cmd_ablate(config_path, data, out_dir, grid);
  return kBadInput;
}
