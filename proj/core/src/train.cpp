#include "maad/train.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <utility>

#include <json.hpp>

#include "json_util.hpp"

namespace maad {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.flush();
  if (!out) {
    throw std::runtime_error("cannot write " + path);
  }
}

std::string grl_schedule_name(GrlConfig::Schedule s) {
  return s == GrlConfig::Schedule::kConstant ? "constant" : "dann_ramp";
}

GrlConfig::Schedule parse_grl_schedule(const std::string& name,
                                       const std::string& context) {
  if (name == "constant") return GrlConfig::Schedule::kConstant;
  if (name == "dann_ramp") return GrlConfig::Schedule::kDannRamp;
  throw std::runtime_error(context + ": unknown grl schedule \"" + name + "\"");
}

DomainClassifierConfig classifier_config(DomainClassifierConfig::Level level,
                                         const std::vector<int64_t>& filters,
                                         double alpha) {
  DomainClassifierConfig c;
  c.level = level;
  c.filters = filters;
  c.leaky_relu_alpha = alpha;
  return c;
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::kNone: return "none";
    case Method::kMaad: return "maad";
    case Method::kDann: return "dann";
    case Method::kMmd: return "mmd";
  }
  throw std::logic_error("method_name: bad enum");
}

Method parse_method(const std::string& name) {
  if (name == "none") return Method::kNone;
  if (name == "maad") return Method::kMaad;
  if (name == "dann") return Method::kDann;
  if (name == "mmd") return Method::kMmd;
  throw std::invalid_argument("unknown method \"" + name + "\"");
}

void TrainConfig::validate() const {
  if (epochs < 1) {
    throw std::invalid_argument("train config: epochs must be >= 1");
  }
  if (batch_size < 2 || batch_size % 2 != 0) {
    throw std::invalid_argument("train config: batch size must be even and >= 2");
  }
  if (!(lr_detector > 0.0) || !(lr_adversarial > 0.0)) {
    throw std::invalid_argument("train config: learning rates must be positive");
  }
  if (weight_decay < 0.0) {
    throw std::invalid_argument("train config: weight decay must be >= 0");
  }
  if (mmd_weight < 0.0) {
    throw std::invalid_argument("train config: mmd weight must be >= 0");
  }
  if (eval_every < 0) {
    throw std::invalid_argument("train config: eval_every must be >= 0");
  }
  schedule.validate();
  objective.validate();
  loss_weights.validate();
  augment.validate();
  if (detector.backbone.channels.size() != 3) {
    throw std::invalid_argument(
        "train config: the backbone needs exactly three blocks");
  }
  for (int64_t c : detector.backbone.channels) {
    if (c < 1) {
      throw std::invalid_argument("train config: backbone channels must be >= 1");
    }
  }
  if (detector.head_channels < 1) {
    throw std::invalid_argument("train config: head channels must be >= 1");
  }
  if (detector.keypoints.stem < 2 || detector.keypoints.vein < 2) {
    throw std::invalid_argument(
        "train config: each keypoint part needs at least two points");
  }
  classifier_config(DomainClassifierConfig::Level::kHigh,
                    discriminator.high_filters, discriminator.leaky_alpha)
      .validate();
  classifier_config(DomainClassifierConfig::Level::kLow,
                    discriminator.low_filters, discriminator.leaky_alpha)
      .validate();
  if (!(grl.lambda_p >= 0.0)) {
    throw std::invalid_argument("train config: grl lambda_p must be >= 0");
  }
  if (!(grl.gamma > 0.0)) {
    throw std::invalid_argument("train config: grl gamma must be positive");
  }
  if (!(decode.score_threshold >= 0.0 && decode.score_threshold <= 1.0)) {
    throw std::invalid_argument(
        "train config: decode score threshold must lie in [0, 1]");
  }
  if (decode.top_k < 1) {
    throw std::invalid_argument("train config: decode top_k must be >= 1");
  }
  if (!(oks.kappa > 0.0)) {
    throw std::invalid_argument("train config: oks kappa must be positive");
  }
  if (method != Method::kNone && labeled_domain != Domain::kSource) {
    throw std::invalid_argument(
        "train config: adaptation methods take labels from the source domain");
  }
}

namespace {

LrSchedule parse_schedule(const json& j, const std::string& ctx) {
  LrSchedule s;
  jsonutil::reject_unknown_keys(j, ctx, {"milestones", "factor"});
  if (j.contains("milestones")) {
    const auto& arr = j.at("milestones");
    if (!arr.is_array()) {
      throw std::runtime_error(ctx + ".milestones: expected an array");
    }
    s.milestones.clear();
    for (const auto& v : arr) {
      s.milestones.push_back(jsonutil::as_number(v, ctx + ".milestones"));
    }
  }
  if (j.contains("factor")) {
    s.factor = jsonutil::as_number(j.at("factor"), ctx + ".factor");
  }
  return s;
}

std::vector<int64_t> parse_int_array(const json& j, const std::string& ctx) {
  if (!j.is_array()) {
    throw std::runtime_error(ctx + ": expected an array");
  }
  std::vector<int64_t> out;
  for (const auto& v : j) out.push_back(jsonutil::as_integer(v, ctx));
  return out;
}

DetectorConfig parse_detector(const json& j, const std::string& ctx) {
  DetectorConfig d;
  jsonutil::reject_unknown_keys(
      j, ctx, {"channels", "head_channels", "stem_keypoints", "vein_keypoints"});
  if (j.contains("channels")) {
    d.backbone.channels = parse_int_array(j.at("channels"), ctx + ".channels");
  }
  if (j.contains("head_channels")) {
    d.head_channels = jsonutil::as_integer(j.at("head_channels"), ctx + ".head_channels");
  }
  if (j.contains("stem_keypoints")) {
    d.keypoints.stem = static_cast<int>(
        jsonutil::as_integer(j.at("stem_keypoints"), ctx + ".stem_keypoints"));
  }
  if (j.contains("vein_keypoints")) {
    d.keypoints.vein = static_cast<int>(
        jsonutil::as_integer(j.at("vein_keypoints"), ctx + ".vein_keypoints"));
  }
  return d;
}

DiscriminatorSpec parse_discriminator(const json& j, const std::string& ctx) {
  DiscriminatorSpec d;
  jsonutil::reject_unknown_keys(j, ctx,
                                {"high_filters", "low_filters", "leaky_alpha"});
  if (j.contains("high_filters")) {
    d.high_filters = parse_int_array(j.at("high_filters"), ctx + ".high_filters");
  }
  if (j.contains("low_filters")) {
    d.low_filters = parse_int_array(j.at("low_filters"), ctx + ".low_filters");
  }
  if (j.contains("leaky_alpha")) {
    d.leaky_alpha = jsonutil::as_number(j.at("leaky_alpha"), ctx + ".leaky_alpha");
  }
  return d;
}

MaadObjectiveConfig parse_objective(const json& j, const std::string& ctx) {
  MaadObjectiveConfig o;
  jsonutil::reject_unknown_keys(j, ctx,
                                {"lambda_had", "lambda_lad", "enable_had",
                                 "enable_lad", "enable_grl", "enable_attention"});
  if (j.contains("lambda_had")) {
    o.lambda_had = jsonutil::as_number(j.at("lambda_had"), ctx + ".lambda_had");
  }
  if (j.contains("lambda_lad")) {
    o.lambda_lad = jsonutil::as_number(j.at("lambda_lad"), ctx + ".lambda_lad");
  }
  if (j.contains("enable_had")) {
    o.enable_had = jsonutil::as_bool(j.at("enable_had"), ctx + ".enable_had");
  }
  if (j.contains("enable_lad")) {
    o.enable_lad = jsonutil::as_bool(j.at("enable_lad"), ctx + ".enable_lad");
  }
  if (j.contains("enable_grl")) {
    o.enable_grl = jsonutil::as_bool(j.at("enable_grl"), ctx + ".enable_grl");
  }
  if (j.contains("enable_attention")) {
    o.enable_attention =
        jsonutil::as_bool(j.at("enable_attention"), ctx + ".enable_attention");
  }
  return o;
}

GrlConfig parse_grl(const json& j, const std::string& ctx) {
  GrlConfig g;
  jsonutil::reject_unknown_keys(j, ctx, {"schedule", "lambda_p", "gamma"});
  if (j.contains("schedule")) {
    g.schedule = parse_grl_schedule(
        jsonutil::as_string(j.at("schedule"), ctx + ".schedule"), ctx + ".schedule");
  }
  if (j.contains("lambda_p")) {
    g.lambda_p = jsonutil::as_number(j.at("lambda_p"), ctx + ".lambda_p");
  }
  if (j.contains("gamma")) {
    g.gamma = jsonutil::as_number(j.at("gamma"), ctx + ".gamma");
  }
  return g;
}

DetectionLossWeights parse_loss_weights(const json& j, const std::string& ctx) {
  DetectionLossWeights w;
  jsonutil::reject_unknown_keys(j, ctx, {"cp", "off", "kp", "kphm", "obb"});
  if (j.contains("cp")) w.cp = jsonutil::as_number(j.at("cp"), ctx + ".cp");
  if (j.contains("off")) w.off = jsonutil::as_number(j.at("off"), ctx + ".off");
  if (j.contains("kp")) w.kp = jsonutil::as_number(j.at("kp"), ctx + ".kp");
  if (j.contains("kphm")) w.kphm = jsonutil::as_number(j.at("kphm"), ctx + ".kphm");
  if (j.contains("obb")) w.obb = jsonutil::as_number(j.at("obb"), ctx + ".obb");
  return w;
}

std::pair<bool, AugmentConfig> parse_augment(const json& j, const std::string& ctx) {
  bool enabled = true;
  AugmentConfig a;
  jsonutil::reject_unknown_keys(
      j, ctx,
      {"enabled", "p_hflip", "p_rot90", "p_zoom_out", "zoom_max",
       "p_color_jitter", "p_gauss_noise", "noise_std", "p_brightness_contrast"});
  if (j.contains("enabled")) {
    enabled = jsonutil::as_bool(j.at("enabled"), ctx + ".enabled");
  }
  auto num = [&](const char* key, double& slot) {
    if (j.contains(key)) {
      slot = jsonutil::as_number(j.at(key), ctx + "." + key);
    }
  };
  num("p_hflip", a.p_hflip);
  num("p_rot90", a.p_rot90);
  num("p_zoom_out", a.p_zoom_out);
  num("zoom_max", a.zoom_max);
  num("p_color_jitter", a.p_color_jitter);
  num("p_gauss_noise", a.p_gauss_noise);
  num("noise_std", a.noise_std);
  num("p_brightness_contrast", a.p_brightness_contrast);
  return {enabled, a};
}

DecodeConfig parse_decode(const json& j, const std::string& ctx) {
  DecodeConfig d;
  jsonutil::reject_unknown_keys(j, ctx,
                                {"score_threshold", "top_k", "snap_keypoints",
                                 "snap_radius_cells", "snap_min_score"});
  if (j.contains("score_threshold")) {
    d.score_threshold =
        jsonutil::as_number(j.at("score_threshold"), ctx + ".score_threshold");
  }
  if (j.contains("top_k")) {
    d.top_k = jsonutil::as_integer(j.at("top_k"), ctx + ".top_k");
  }
  if (j.contains("snap_keypoints")) {
    d.snap_keypoints =
        jsonutil::as_bool(j.at("snap_keypoints"), ctx + ".snap_keypoints");
  }
  if (j.contains("snap_radius_cells")) {
    d.snap_radius_cells = jsonutil::as_number(j.at("snap_radius_cells"),
                                              ctx + ".snap_radius_cells");
  }
  if (j.contains("snap_min_score")) {
    d.snap_min_score =
        jsonutil::as_number(j.at("snap_min_score"), ctx + ".snap_min_score");
  }
  return d;
}

}  // namespace

TrainConfig parse_train_config_text(const std::string& text,
                                    const std::string& context) {
  const json j = jsonutil::parse_text(text, context);
  jsonutil::reject_unknown_keys(
      j, context,
      {"method", "labeled_domain", "epochs", "batch_size", "seed",
       "lr_detector", "lr_adversarial", "weight_decay", "schedule", "detector",
       "discriminator", "objective", "grl", "loss_weights", "mmd_weight",
       "augment", "decode", "oks", "eval_split", "eval_every"});
  TrainConfig cfg;
  try {
    if (j.contains("method")) {
      cfg.method = parse_method(jsonutil::as_string(j.at("method"), context + ".method"));
    }
    if (j.contains("labeled_domain")) {
      cfg.labeled_domain = parse_domain(
          jsonutil::as_string(j.at("labeled_domain"), context + ".labeled_domain"));
    }
    if (j.contains("epochs")) {
      cfg.epochs = jsonutil::as_integer(j.at("epochs"), context + ".epochs");
    }
    if (j.contains("batch_size")) {
      cfg.batch_size = jsonutil::as_integer(j.at("batch_size"), context + ".batch_size");
    }
    if (j.contains("seed")) {
      const int64_t s = jsonutil::as_integer(j.at("seed"), context + ".seed");
      if (s < 0) throw std::runtime_error(context + ".seed: must be >= 0");
      cfg.seed = static_cast<uint64_t>(s);
    }
    if (j.contains("lr_detector")) {
      cfg.lr_detector = jsonutil::as_number(j.at("lr_detector"), context + ".lr_detector");
    }
    if (j.contains("lr_adversarial")) {
      cfg.lr_adversarial =
          jsonutil::as_number(j.at("lr_adversarial"), context + ".lr_adversarial");
    }
    if (j.contains("weight_decay")) {
      cfg.weight_decay =
          jsonutil::as_number(j.at("weight_decay"), context + ".weight_decay");
    }
    if (j.contains("schedule")) {
      cfg.schedule = parse_schedule(j.at("schedule"), context + ".schedule");
    }
    if (j.contains("detector")) {
      cfg.detector = parse_detector(j.at("detector"), context + ".detector");
    }
    if (j.contains("discriminator")) {
      cfg.discriminator =
          parse_discriminator(j.at("discriminator"), context + ".discriminator");
    }
    if (j.contains("objective")) {
      cfg.objective = parse_objective(j.at("objective"), context + ".objective");
    }
    if (j.contains("grl")) {
      cfg.grl = parse_grl(j.at("grl"), context + ".grl");
    }
    if (j.contains("loss_weights")) {
      cfg.loss_weights =
          parse_loss_weights(j.at("loss_weights"), context + ".loss_weights");
    }
    if (j.contains("mmd_weight")) {
      cfg.mmd_weight = jsonutil::as_number(j.at("mmd_weight"), context + ".mmd_weight");
    }
    if (j.contains("augment")) {
      const auto [enabled, aug] = parse_augment(j.at("augment"), context + ".augment");
      cfg.augment_enabled = enabled;
      cfg.augment = aug;
    }
    if (j.contains("decode")) {
      cfg.decode = parse_decode(j.at("decode"), context + ".decode");
    }
    if (j.contains("oks")) {
      jsonutil::reject_unknown_keys(j.at("oks"), context + ".oks", {"kappa"});
      if (j.at("oks").contains("kappa")) {
        cfg.oks.kappa = jsonutil::as_number(j.at("oks").at("kappa"), context + ".oks.kappa");
      }
    }
    if (j.contains("eval_split")) {
      cfg.eval_split =
          parse_split(jsonutil::as_string(j.at("eval_split"), context + ".eval_split"));
    }
    if (j.contains("eval_every")) {
      cfg.eval_every = jsonutil::as_integer(j.at("eval_every"), context + ".eval_every");
    }
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(context + ": " + e.what());
  }
  return cfg;
}

TrainConfig parse_train_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error(path + ": cannot open");
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_train_config_text(buf.str(), path);
}

std::string train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["method"] = method_name(cfg.method);
  j["labeled_domain"] = domain_name(cfg.labeled_domain);
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["seed"] = cfg.seed;
  j["lr_detector"] = cfg.lr_detector;
  j["lr_adversarial"] = cfg.lr_adversarial;
  j["weight_decay"] = cfg.weight_decay;
  j["schedule"] = {{"milestones", cfg.schedule.milestones},
                   {"factor", cfg.schedule.factor}};
  j["detector"] = {{"channels", cfg.detector.backbone.channels},
                   {"head_channels", cfg.detector.head_channels},
                   {"stem_keypoints", cfg.detector.keypoints.stem},
                   {"vein_keypoints", cfg.detector.keypoints.vein}};
  j["discriminator"] = {{"high_filters", cfg.discriminator.high_filters},
                        {"low_filters", cfg.discriminator.low_filters},
                        {"leaky_alpha", cfg.discriminator.leaky_alpha}};
  j["objective"] = {{"lambda_had", cfg.objective.lambda_had},
                    {"lambda_lad", cfg.objective.lambda_lad},
                    {"enable_had", cfg.objective.enable_had},
                    {"enable_lad", cfg.objective.enable_lad},
                    {"enable_grl", cfg.objective.enable_grl},
                    {"enable_attention", cfg.objective.enable_attention}};
  j["grl"] = {{"schedule", grl_schedule_name(cfg.grl.schedule)},
              {"lambda_p", cfg.grl.lambda_p},
              {"gamma", cfg.grl.gamma}};
  j["loss_weights"] = {{"cp", cfg.loss_weights.cp},
                       {"off", cfg.loss_weights.off},
                       {"kp", cfg.loss_weights.kp},
                       {"kphm", cfg.loss_weights.kphm},
                       {"obb", cfg.loss_weights.obb}};
  j["mmd_weight"] = cfg.mmd_weight;
  j["augment"] = {{"enabled", cfg.augment_enabled},
                  {"p_hflip", cfg.augment.p_hflip},
                  {"p_rot90", cfg.augment.p_rot90},
                  {"p_zoom_out", cfg.augment.p_zoom_out},
                  {"zoom_max", cfg.augment.zoom_max},
                  {"p_color_jitter", cfg.augment.p_color_jitter},
                  {"p_gauss_noise", cfg.augment.p_gauss_noise},
                  {"noise_std", cfg.augment.noise_std},
                  {"p_brightness_contrast", cfg.augment.p_brightness_contrast}};
  j["decode"] = {{"score_threshold", cfg.decode.score_threshold},
                 {"top_k", cfg.decode.top_k},
                 {"snap_keypoints", cfg.decode.snap_keypoints},
                 {"snap_radius_cells", cfg.decode.snap_radius_cells},
                 {"snap_min_score", cfg.decode.snap_min_score}};
  j["oks"] = {{"kappa", cfg.oks.kappa}};
  j["eval_split"] = split_name(cfg.eval_split);
  j["eval_every"] = cfg.eval_every;
  return j.dump(2) + "\n";
}

TrainerModel::TrainerModel(const TrainConfig& cfg)
    : detector(cfg.detector),
      d_high(cfg.detector.backbone.channels.back(),
             classifier_config(DomainClassifierConfig::Level::kHigh,
                               cfg.discriminator.high_filters,
                               cfg.discriminator.leaky_alpha)),
      d_low(cfg.detector.backbone.channels.front(),
            classifier_config(DomainClassifierConfig::Level::kLow,
                              cfg.discriminator.low_filters,
                              cfg.discriminator.leaky_alpha)),
      leaky_alpha(cfg.discriminator.leaky_alpha) {
  switch (cfg.method) {
    case Method::kMaad:
      use_high = cfg.objective.enable_had;
      use_low = cfg.objective.enable_lad;
      use_attention = cfg.objective.enable_attention && (use_high || use_low);
      break;
    case Method::kDann:
      use_high = true;
      break;
    case Method::kNone:
    case Method::kMmd:
      break;
  }
}

void TrainerModel::init(std::mt19937_64& rng) {
  detector.init(rng, 0.001);
  if (use_high) {
    if (use_attention) attention_high.init(rng, leaky_alpha);
    d_high.init(rng);
  }
  if (use_low) {
    if (use_attention) attention_low.init(rng, leaky_alpha);
    d_low.init(rng);
  }
}

std::vector<NamedParam> TrainerModel::detector_params() {
  std::vector<NamedParam> out;
  detector.collect(out);
  return out;
}

std::vector<NamedParam> TrainerModel::adversarial_params() {
  std::vector<NamedParam> out;
  if (use_high) {
    if (use_attention) attention_high.collect("adv.att_high", out);
    d_high.collect("adv.d_high", out);
  }
  if (use_low) {
    if (use_attention) attention_low.collect("adv.att_low", out);
    d_low.collect("adv.d_low", out);
  }
  return out;
}

std::vector<NamedParam> TrainerModel::params() {
  std::vector<NamedParam> out = detector_params();
  for (auto& p : adversarial_params()) out.push_back(std::move(p));
  return out;
}

std::vector<NamedBuffer> TrainerModel::buffers() {
  std::vector<NamedBuffer> out;
  detector.collect_buffers(out);
  if (use_high) d_high.collect_buffers("adv.d_high", out);
  if (use_low) d_low.collect_buffers("adv.d_low", out);
  return out;
}

namespace {

TrainConfig validated(TrainConfig cfg) {
  cfg.validate();
  return cfg;
}

AdamConfig adam_config(const TrainConfig& cfg) {
  AdamConfig a;
  a.weight_decay = cfg.weight_decay;
  return a;
}

std::vector<ParamGroup> param_groups(TrainerModel& model, const TrainConfig& cfg) {
  std::vector<ParamGroup> groups;
  groups.push_back({model.detector_params(), cfg.lr_detector});
  groups.push_back({model.adversarial_params(), cfg.lr_adversarial});
  return groups;
}

// Per-image vote: mean sigmoid over the logit map against 0.5.
double domain_accuracy(const Tensor& logits, const std::vector<double>& labels) {
  const int64_t n = logits.dim(0);
  const int64_t hw = logits.dim(2) * logits.dim(3);
  const auto& v = logits.values();
  int64_t correct = 0;
  for (int64_t i = 0; i < n; ++i) {
    double mean_p = 0.0;
    for (int64_t j = 0; j < hw; ++j) {
      mean_p += 1.0 / (1.0 + std::exp(-v[i * hw + j]));
    }
    mean_p /= static_cast<double>(hw);
    const int predicted = mean_p > 0.5 ? 1 : 0;
    const int actual = labels[static_cast<size_t>(i)] > 0.5 ? 1 : 0;
    if (predicted == actual) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

void append_term(std::string& msg, const char* name, double v) {
  msg += ' ';
  msg += name;
  msg += '=';
  msg += fmt_double(v);
}

void check_finite(const StepLosses& sl) {
  bool bad = !std::isfinite(sl.total) || !std::isfinite(sl.det) ||
             !std::isfinite(sl.cp) || !std::isfinite(sl.off) ||
             !std::isfinite(sl.kp) || !std::isfinite(sl.kphm) ||
             !std::isfinite(sl.obb);
  for (const auto& opt : {sl.haad, sl.lad, sl.mmd}) {
    if (opt && !std::isfinite(*opt)) bad = true;
  }
  if (!bad) return;
  std::string msg = "train_step: non-finite loss:";
  append_term(msg, "total", sl.total);
  append_term(msg, "det", sl.det);
  append_term(msg, "cp", sl.cp);
  append_term(msg, "off", sl.off);
  append_term(msg, "kp", sl.kp);
  append_term(msg, "kphm", sl.kphm);
  append_term(msg, "obb", sl.obb);
  if (sl.haad) append_term(msg, "haad", *sl.haad);
  if (sl.lad) append_term(msg, "lad", *sl.lad);
  if (sl.mmd) append_term(msg, "mmd", *sl.mmd);
  throw std::runtime_error(msg);
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, const Dataset& data)
    : cfg_(validated(std::move(cfg))),
      data_(&data),
      model_(cfg_),
      optim_(param_groups(model_, cfg_), adam_config(cfg_)),
      rng_(cfg_.seed) {
  model_.init(rng_);
  norm_ = compute_norm_stats(data);
  labeled_train_ = data.select(Split::kTrain, cfg_.labeled_domain);
  if (labeled_train_.empty()) {
    throw std::invalid_argument("trainer: no labeled train images");
  }
  if (cfg_.method != Method::kNone) {
    unlabeled_train_ = data.select(Split::kTrain, Domain::kTarget);
    if (unlabeled_train_.empty()) {
      throw std::invalid_argument("trainer: no target train images");
    }
  }
  const int64_t w0 = labeled_train_.front()->width;
  const int64_t h0 = labeled_train_.front()->height;
  auto check_dims = [&](const DatasetEntry* e) {
    if (e->width != w0 || e->height != h0) {
      throw std::invalid_argument("trainer: train images must share one size");
    }
  };
  for (const auto* e : labeled_train_) check_dims(e);
  for (const auto* e : unlabeled_train_) check_dims(e);
  if (w0 % kFeatureStride != 0 || h0 % kFeatureStride != 0) {
    throw std::invalid_argument(
        "trainer: train image sides must be multiples of the feature stride");
  }
  labeled_order_.resize(labeled_train_.size());
  std::iota(labeled_order_.begin(), labeled_order_.end(), size_t{0});
  labeled_pos_ = labeled_order_.size();  // forces a shuffle on first use
  unlabeled_order_.resize(unlabeled_train_.size());
  std::iota(unlabeled_order_.begin(), unlabeled_order_.end(), size_t{0});
  unlabeled_pos_ = unlabeled_order_.size();
  steps_per_epoch_ = std::max<int64_t>(
      1, static_cast<int64_t>(labeled_train_.size()) / (cfg_.batch_size / 2));
  cache_.resize(data.entries.size());
  cache_ready_.assign(data.entries.size(), 0);
}

const SceneSample& Trainer::cached_sample(const DatasetEntry* entry) {
  const auto idx = static_cast<size_t>(entry - data_->entries.data());
  if (!cache_ready_[idx]) {
    cache_[idx] = entry->load_sample();
    cache_ready_[idx] = 1;
  }
  return cache_[idx];
}

const DatasetEntry* Trainer::take_labeled() {
  if (labeled_pos_ >= labeled_order_.size()) {
    std::shuffle(labeled_order_.begin(), labeled_order_.end(), rng_);
    labeled_pos_ = 0;
  }
  return labeled_train_[labeled_order_[labeled_pos_++]];
}

const DatasetEntry* Trainer::take_unlabeled() {
  if (unlabeled_pos_ >= unlabeled_order_.size()) {
    std::shuffle(unlabeled_order_.begin(), unlabeled_order_.end(), rng_);
    unlabeled_pos_ = 0;
  }
  return unlabeled_train_[unlabeled_order_[unlabeled_pos_++]];
}

DomainBatch Trainer::sample_batch() {
  const int64_t half = cfg_.batch_size / 2;
  DomainBatch batch;
  std::vector<ImageRgb> images;
  std::vector<EncodedTargets> targets;
  images.reserve(static_cast<size_t>(half));
  targets.reserve(static_cast<size_t>(half));
  for (int64_t i = 0; i < half; ++i) {
    SceneSample s = cached_sample(take_labeled());
    if (cfg_.augment_enabled) s = augment(s, cfg_.augment, rng_);
    targets.push_back(encode_targets(s.annotations, s.image.width,
                                     s.image.height, cfg_.detector.keypoints));
    images.push_back(std::move(s.image));
  }
  batch.labeled_images = images_to_tensor(images, norm_);
  batch.labeled_targets = stack_targets(targets);
  batch.domain_labels.assign(static_cast<size_t>(half), 0.0);
  if (cfg_.method != Method::kNone) {
    std::vector<ImageRgb> unlabeled;
    unlabeled.reserve(static_cast<size_t>(half));
    for (int64_t i = 0; i < half; ++i) {
      SceneSample s = cached_sample(take_unlabeled());
      if (cfg_.augment_enabled) s = augment(s, cfg_.augment, rng_);
      unlabeled.push_back(std::move(s.image));
    }
    batch.unlabeled_images = images_to_tensor(unlabeled, norm_);
    batch.domain_labels.insert(batch.domain_labels.end(),
                               static_cast<size_t>(half), 1.0);
  }
  return batch;
}

StepLosses Trainer::train_step(const DomainBatch& batch, double progress) {
  if (!(progress >= 0.0 && progress <= 1.0)) {
    throw std::invalid_argument("train_step: progress must lie in [0, 1]");
  }
  auto fwd = model_.detector.forward(batch.labeled_images, true);
  const DetectionLossTerms det =
      detection_loss(fwd.heads, batch.labeled_targets, cfg_.loss_weights);

  StepLosses out;
  Tensor l_haad, l_lad, total;
  BackboneTaps target_taps;
  if (cfg_.method != Method::kNone) {
    if (!batch.unlabeled_images.defined()) {
      throw std::invalid_argument("train_step: the method needs unlabeled images");
    }
    target_taps = model_.detector.forward_taps(batch.unlabeled_images, true);
  }
  const double lambda_p = cfg_.grl.lambda_at(progress);
  const bool use_grl =
      cfg_.method == Method::kDann || cfg_.objective.enable_grl;

  if (model_.use_high) {
    Tensor f = concat0(fwd.taps.high, target_taps.high);
    if (model_.use_attention) f = model_.attention_high.forward(f).weighted;
    if (use_grl) f = grl(f, lambda_p);
    const Tensor logits = model_.d_high.forward(f, true);
    l_haad = bce_discriminator_loss(logits, batch.domain_labels);
    out.haad = l_haad.item();
    out.d_high_acc = domain_accuracy(logits, batch.domain_labels);
  }
  if (model_.use_low) {
    Tensor f = concat0(fwd.taps.low, target_taps.low);
    if (model_.use_attention) f = model_.attention_low.forward(f).weighted;
    if (use_grl) f = grl(f, lambda_p);
    const Tensor logits = model_.d_low.forward(f, true);
    l_lad = lsq_discriminator_loss(logits, batch.domain_labels);
    out.lad = l_lad.item();
    out.d_low_acc = domain_accuracy(logits, batch.domain_labels);
  }

  switch (cfg_.method) {
    case Method::kNone:
      total = det.total;
      break;
    case Method::kMaad:
      total = maad_objective(det.total, l_haad, l_lad, cfg_.objective);
      break;
    case Method::kDann: {
      MaadObjectiveConfig obj = cfg_.objective;
      obj.enable_had = true;
      obj.enable_lad = false;
      obj.enable_attention = false;
      obj.enable_grl = true;
      total = maad_objective(det.total, l_haad, Tensor{}, obj);
      break;
    }
    case Method::kMmd: {
      const Tensor xs = spatial_mean(fwd.taps.high);
      const Tensor xt = spatial_mean(target_taps.high);
      const Tensor l_mmd = mmd_rbf(xs, xt, mmd_median_bandwidth(xs, xt));
      out.mmd = l_mmd.item();
      total = add(det.total, scale(l_mmd, cfg_.mmd_weight));
      break;
    }
  }

  out.total = total.item();
  out.det = det.total.item();
  out.cp = det.cp.item();
  out.off = det.off.item();
  out.kp = det.kp.item();
  out.kphm = det.kphm.item();
  out.obb = det.obb.item();
  check_finite(out);

  optim_.zero_grad();
  total.backward();
  optim_.step();
  return out;
}

namespace {

struct Accumulator {
  int64_t n = 0;
  double total = 0, det = 0, cp = 0, off = 0, kp = 0, kphm = 0, obb = 0;
  double haad = 0, lad = 0, mmd = 0, d_high_acc = 0, d_low_acc = 0;
  int64_t n_haad = 0, n_lad = 0, n_mmd = 0, n_high_acc = 0, n_low_acc = 0;

  void add(const StepLosses& s) {
    ++n;
    total += s.total;
    det += s.det;
    cp += s.cp;
    off += s.off;
    kp += s.kp;
    kphm += s.kphm;
    obb += s.obb;
    if (s.haad) { haad += *s.haad; ++n_haad; }
    if (s.lad) { lad += *s.lad; ++n_lad; }
    if (s.mmd) { mmd += *s.mmd; ++n_mmd; }
    if (s.d_high_acc) { d_high_acc += *s.d_high_acc; ++n_high_acc; }
    if (s.d_low_acc) { d_low_acc += *s.d_low_acc; ++n_low_acc; }
  }

  EpochLog finish(int64_t epoch, double lr_det, double lr_adv) const {
    EpochLog log;
    log.epoch = epoch;
    log.lr_detector = lr_det;
    log.lr_adversarial = lr_adv;
    const double dn = static_cast<double>(n);
    log.total = total / dn;
    log.det = det / dn;
    log.cp = cp / dn;
    log.off = off / dn;
    log.kp = kp / dn;
    log.kphm = kphm / dn;
    log.obb = obb / dn;
    if (n_haad) log.haad = haad / static_cast<double>(n_haad);
    if (n_lad) log.lad = lad / static_cast<double>(n_lad);
    if (n_mmd) log.mmd = mmd / static_cast<double>(n_mmd);
    if (n_high_acc) log.d_high_acc = d_high_acc / static_cast<double>(n_high_acc);
    if (n_low_acc) log.d_low_acc = d_low_acc / static_cast<double>(n_low_acc);
    return log;
  }
};

}  // namespace

RunReport Trainer::run(const std::string& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  RunReport report;
  report.config = cfg_;
  const int64_t total_steps = cfg_.epochs * steps_per_epoch_;
  int64_t step_index = 0;
  for (int64_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
    const double mult = cfg_.schedule.multiplier(epoch, cfg_.epochs);
    optim_.groups()[0].lr = cfg_.lr_detector * mult;
    optim_.groups()[1].lr = cfg_.lr_adversarial * mult;
    Accumulator acc;
    for (int64_t s = 0; s < steps_per_epoch_; ++s) {
      const double progress =
          total_steps > 1
              ? static_cast<double>(step_index) / static_cast<double>(total_steps - 1)
              : 1.0;
      const DomainBatch batch = sample_batch();
      acc.add(train_step(batch, progress));
      ++step_index;
    }
    report.epochs.push_back(
        acc.finish(epoch, optim_.groups()[0].lr, optim_.groups()[1].lr));
    if (cfg_.eval_every > 0 && (epoch + 1) % cfg_.eval_every == 0 &&
        epoch + 1 < cfg_.epochs) {
      report.interim.push_back({epoch, evaluate(cfg_.eval_split)});
    }
  }
  report.final_metrics = evaluate(cfg_.eval_split);
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    save((fs::path(out_dir) / "checkpoint.bin").string());
    report.checkpoint_path = "checkpoint.bin";  // relative to the report
    write_text_file((fs::path(out_dir) / "report.json").string(),
                    run_report_to_json(report));
    write_text_file((fs::path(out_dir) / "report.csv").string(),
                    run_report_to_csv(report));
  }
  return report;
}

EvalMetrics Trainer::evaluate(Split split) {
  return evaluate(split, Domain::kTarget);
}

EvalMetrics Trainer::evaluate(Split split, Domain domain) {
  const auto entries = data_->select(split, domain);
  if (entries.empty()) {
    throw std::invalid_argument("evaluate: no " + domain_name(domain) +
                                " images in the " + split_name(split) + " split");
  }
  return evaluate_model(model_, cfg_, norm_, entries);
}

void Trainer::save(const std::string& path) {
  Checkpoint c;
  c.strings["config"] = train_config_to_json(cfg_);
  std::ostringstream rng_state;
  rng_state << rng_;
  c.strings["rng"] = rng_state.str();
  for (const auto& p : model_.params()) {
    c.arrays["param." + p.name] = p.tensor.values();
  }
  for (const auto& b : model_.buffers()) {
    c.arrays["buffer." + b.name] = *b.data;
  }
  const auto& slots = optim_.slots();
  size_t slot = 0;
  for (const auto& g : optim_.groups()) {
    for (const auto& p : g.params) {
      c.arrays["adam.m." + p.name] = slots[slot].m;
      c.arrays["adam.v." + p.name] = slots[slot].v;
      ++slot;
    }
  }
  c.arrays["adam.t"] = {static_cast<double>(optim_.steps_taken())};
  c.arrays["norm.mean"] = {norm_.mean[0], norm_.mean[1], norm_.mean[2]};
  c.arrays["norm.stddev"] = {norm_.stddev[0], norm_.stddev[1], norm_.stddev[2]};
  save_checkpoint(path, c);
}

LoadedRun load_run(const std::string& checkpoint_path) {
  const Checkpoint c = load_checkpoint(checkpoint_path);
  const auto cs = c.strings.find("config");
  if (cs == c.strings.end()) {
    throw std::runtime_error("checkpoint: " + checkpoint_path + ": missing config");
  }
  TrainConfig cfg = parse_train_config_text(cs->second, checkpoint_path + ": config");
  LoadedRun run{cfg, NormStats{}, TrainerModel(cfg)};
  const auto need = [&](const std::string& key) -> const std::vector<double>& {
    const auto it = c.arrays.find(key);
    if (it == c.arrays.end()) {
      throw std::runtime_error("checkpoint: " + checkpoint_path +
                               ": missing array \"" + key + "\"");
    }
    return it->second;
  };
  for (auto& p : run.model.params()) {
    const auto& src = need("param." + p.name);
    if (src.size() != p.tensor.values().size()) {
      throw std::runtime_error("checkpoint: " + checkpoint_path +
                               ": size mismatch for \"" + p.name + "\"");
    }
    p.tensor.values() = src;
  }
  for (auto& b : run.model.buffers()) {
    const auto& src = need("buffer." + b.name);
    if (src.size() != b.data->size()) {
      throw std::runtime_error("checkpoint: " + checkpoint_path +
                               ": size mismatch for buffer \"" + b.name + "\"");
    }
    *b.data = src;
  }
  const auto& mean = need("norm.mean");
  const auto& stddev = need("norm.stddev");
  if (mean.size() != 3 || stddev.size() != 3) {
    throw std::runtime_error("checkpoint: " + checkpoint_path +
                             ": normalization stats must have three channels");
  }
  for (int i = 0; i < 3; ++i) {
    run.norm.mean[i] = mean[static_cast<size_t>(i)];
    run.norm.stddev[i] = stddev[static_cast<size_t>(i)];
  }
  return run;
}

EvalMetrics evaluate_model(TrainerModel& model, const TrainConfig& cfg,
                           const NormStats& norm,
                           const std::vector<const DatasetEntry*>& entries) {
  if (entries.empty()) {
    throw std::invalid_argument("evaluate: empty entry list");
  }
  NoGradGuard guard;
  std::vector<EvalInput> inputs;
  inputs.reserve(entries.size());
  for (const auto* e : entries) {
    const Tensor x = image_to_tensor(e->load_image(), norm);
    auto fwd = model.detector.forward(x, false);
    EvalInput in;
    in.detections = decode_detections(fwd.heads, 0, cfg.decode);
    in.ground_truth = e->annotations;
    inputs.push_back(std::move(in));
  }
  return evaluate_detections(inputs, cfg.detector.keypoints, cfg.oks);
}

namespace {

json metrics_json(const EvalMetrics& m) {
  return json{{"map50_obb", 100.0 * m.map50_obb},
              {"map5095_oks", 100.0 * m.map5095_oks},
              {"map5095_poks_all", 100.0 * m.map5095_poks_all},
              {"map5095_poks_stem", 100.0 * m.map5095_poks_stem},
              {"map5095_poks_vein", 100.0 * m.map5095_poks_vein}};
}

json epoch_json(const EpochLog& e) {
  json j{{"epoch", e.epoch},
         {"lr_detector", e.lr_detector},
         {"lr_adversarial", e.lr_adversarial},
         {"total", e.total},
         {"det", e.det},
         {"cp", e.cp},
         {"off", e.off},
         {"kp", e.kp},
         {"kphm", e.kphm},
         {"obb", e.obb}};
  if (e.haad) j["haad"] = *e.haad;
  if (e.lad) j["lad"] = *e.lad;
  if (e.mmd) j["mmd"] = *e.mmd;
  if (e.d_high_acc) j["d_high_acc"] = *e.d_high_acc;
  if (e.d_low_acc) j["d_low_acc"] = *e.d_low_acc;
  return j;
}

std::string csv_cell(const std::optional<double>& v) {
  return v ? fmt_double(*v) : std::string();
}

}  // namespace

std::string run_report_to_json(const RunReport& r) {
  json j;
  j["config"] = json::parse(train_config_to_json(r.config));
  j["seed"] = r.config.seed;
  json epochs = json::array();
  for (const auto& e : r.epochs) epochs.push_back(epoch_json(e));
  j["epochs"] = epochs;
  json interim = json::array();
  for (const auto& ev : r.interim) {
    interim.push_back(json{{"epoch", ev.epoch}, {"metrics", metrics_json(ev.metrics)}});
  }
  j["interim_evals"] = interim;
  j["final_metrics"] = metrics_json(r.final_metrics);
  j["wall_clock_seconds"] = r.wall_clock_seconds;
  j["checkpoint"] = r.checkpoint_path;
  return j.dump(2) + "\n";
}

std::string run_report_to_csv(const RunReport& r) {
  std::string out =
      "epoch,lr_detector,lr_adversarial,total,det,cp,off,kp,kphm,obb,haad,lad,"
      "mmd,d_high_acc,d_low_acc,map50_obb,map5095_oks,map5095_poks_all,"
      "map5095_poks_stem,map5095_poks_vein\n";
  for (const auto& e : r.epochs) {
    out += std::to_string(e.epoch);
    out += ',' + fmt_double(e.lr_detector);
    out += ',' + fmt_double(e.lr_adversarial);
    out += ',' + fmt_double(e.total);
    out += ',' + fmt_double(e.det);
    out += ',' + fmt_double(e.cp);
    out += ',' + fmt_double(e.off);
    out += ',' + fmt_double(e.kp);
    out += ',' + fmt_double(e.kphm);
    out += ',' + fmt_double(e.obb);
    out += ',' + csv_cell(e.haad);
    out += ',' + csv_cell(e.lad);
    out += ',' + csv_cell(e.mmd);
    out += ',' + csv_cell(e.d_high_acc);
    out += ',' + csv_cell(e.d_low_acc);
    out += ",,,,,\n";
  }
  out += "final,,,,,,,,,,,,,,";
  out += ',' + fmt_double(100.0 * r.final_metrics.map50_obb);
  out += ',' + fmt_double(100.0 * r.final_metrics.map5095_oks);
  out += ',' + fmt_double(100.0 * r.final_metrics.map5095_poks_all);
  out += ',' + fmt_double(100.0 * r.final_metrics.map5095_poks_stem);
  out += ',' + fmt_double(100.0 * r.final_metrics.map5095_poks_vein);
  out += '\n';
  return out;
}

std::vector<AblationCell> ablation_grid(const TrainConfig& base) {
  const auto with = [&](bool had, bool lad, bool grl_on, bool att) {
    TrainConfig c = base;
    c.method = Method::kMaad;
    c.objective.enable_had = had;
    c.objective.enable_lad = lad;
    c.objective.enable_grl = grl_on;
    c.objective.enable_attention = att;
    return c;
  };
  std::vector<AblationCell> cells;
  cells.push_back({"components", "A", with(true, false, false, false)});
  cells.push_back({"components", "B", with(true, false, true, false)});
  cells.push_back({"components", "C", with(false, true, false, false)});
  cells.push_back({"components", "D", with(false, true, true, false)});
  cells.push_back({"components", "E", with(true, true, true, false)});
  cells.push_back({"components", "F", with(true, true, true, true)});
  const std::pair<double, const char*> had_sweep[] = {
      {1.0, "had_1"}, {0.1, "had_0.1"}, {0.01, "had_0.01"}, {0.001, "had_0.001"}};
  for (const auto& [w, id] : had_sweep) {
    TrainConfig c = with(true, false, true, false);
    c.objective.lambda_had = w;
    cells.push_back({"weights", id, c});
  }
  const std::pair<double, const char*> lad_sweep[] = {
      {0.01, "lad_0.01"}, {0.001, "lad_0.001"}, {0.0001, "lad_0.0001"}};
  for (const auto& [w, id] : lad_sweep) {
    TrainConfig c = with(false, true, true, false);
    c.objective.lambda_lad = w;
    cells.push_back({"weights", id, c});
  }
  return cells;
}

std::string ablation_csv(const std::vector<AblationCell>& cells,
                         const std::vector<RunReport>& reports) {
  if (cells.size() != reports.size()) {
    throw std::invalid_argument("ablation_csv: one report per cell required");
  }
  std::string out =
      "grid,id,had,lad,grl,attention,lambda_had,lambda_lad,map50_obb,"
      "map5095_oks,map5095_poks_all,map5095_poks_stem,map5095_poks_vein\n";
  for (size_t i = 0; i < cells.size(); ++i) {
    const auto& o = cells[i].config.objective;
    const auto& m = reports[i].final_metrics;
    out += cells[i].grid;
    out += ',' + cells[i].id;
    out += o.enable_had ? ",1" : ",0";
    out += o.enable_lad ? ",1" : ",0";
    out += o.enable_grl ? ",1" : ",0";
    out += o.enable_attention ? ",1" : ",0";
    out += ',' + fmt_double(o.lambda_had);
    out += ',' + fmt_double(o.lambda_lad);
    out += ',' + fmt_double(100.0 * m.map50_obb);
    out += ',' + fmt_double(100.0 * m.map5095_oks);
    out += ',' + fmt_double(100.0 * m.map5095_poks_all);
    out += ',' + fmt_double(100.0 * m.map5095_poks_stem);
    out += ',' + fmt_double(100.0 * m.map5095_poks_vein);
    out += '\n';
  }
  return out;
}

std::vector<RunReport> run_ablation(const std::vector<AblationCell>& cells,
                                    const Dataset& data,
                                    const std::string& out_dir) {
  std::vector<RunReport> reports;
  reports.reserve(cells.size());
  for (const auto& cell : cells) {
    Trainer trainer(cell.config, data);
    const std::string cell_dir =
        out_dir.empty()
            ? std::string()
            : (fs::path(out_dir) / (cell.grid + "_" + cell.id)).string();
    reports.push_back(trainer.run(cell_dir));
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text_file((fs::path(out_dir) / "comparison.csv").string(),
                    ablation_csv(cells, reports));
  }
  return reports;
}

}  // namespace maad
