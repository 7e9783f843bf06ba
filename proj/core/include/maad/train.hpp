#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "maad/adversarial.hpp"
#include "maad/checkpoint.hpp"
#include "maad/dataset.hpp"
#include "maad/detector.hpp"
#include "maad/optim.hpp"

namespace maad {

// none: detection loss only on the labeled domain.
// maad: none + attention-weighted domain discriminators on both taps.
// dann: none + plain gradient-reversed discriminator on the high tap.
// mmd:  none + RBF moment matching between pooled high-tap features.
enum class Method { kNone, kMaad, kDann, kMmd };

std::string method_name(Method m);
Method parse_method(const std::string& name);

struct DiscriminatorSpec {
  std::vector<int64_t> high_filters = {32, 64, 64, 1};
  std::vector<int64_t> low_filters = {16, 32, 32, 1};
  double leaky_alpha = 0.2;
};

struct TrainConfig {
  Method method = Method::kMaad;
  // Which domain supplies detection labels. Training the target split
  // directly gives the fully supervised reference run.
  Domain labeled_domain = Domain::kSource;
  int64_t epochs = 300;
  int64_t batch_size = 8;  // even: half labeled, half unlabeled
  uint64_t seed = 0;
  double lr_detector = 5e-4;
  double lr_adversarial = 1e-4;  // discriminators and attention
  double weight_decay = 1e-5;
  LrSchedule schedule;
  DetectorConfig detector;
  DiscriminatorSpec discriminator;
  MaadObjectiveConfig objective;
  GrlConfig grl;
  DetectionLossWeights loss_weights;
  double mmd_weight = 1e-3;
  bool augment_enabled = true;
  AugmentConfig augment;
  DecodeConfig decode;
  OksConfig oks;
  Split eval_split = Split::kVal;
  int64_t eval_every = 0;  // extra target-domain evals every N epochs

  void validate() const;
};

// Config JSON: every key optional with the defaults above, unknown keys
// rejected at every level. to_json emits the full echo, which parses back
// to an identical config.
TrainConfig parse_train_config_text(const std::string& text,
                                    const std::string& context);
TrainConfig parse_train_config_file(const std::string& path);
std::string train_config_to_json(const TrainConfig& cfg);

// The detector plus whichever adversarial modules the method and objective
// toggles call for. Disabled modules exist but stay uninitialized,
// unregistered and unsaved.
struct TrainerModel {
  explicit TrainerModel(const TrainConfig& cfg);

  Detector detector;
  SpatialAttention attention_high;
  SpatialAttention attention_low;
  DomainClassifier d_high;
  DomainClassifier d_low;
  bool use_high = false;
  bool use_low = false;
  bool use_attention = false;
  double leaky_alpha = 0.2;

  // Detector weights from N(0, 0.001); discriminator and attention convs
  // Kaiming-normal for the leaky slope; draws happen in registration order.
  void init(std::mt19937_64& rng);
  std::vector<NamedParam> detector_params();
  std::vector<NamedParam> adversarial_params();
  std::vector<NamedParam> params();
  std::vector<NamedBuffer> buffers();
};

// One optimization step's inputs: normalized image tensors plus encoded
// labels for the labeled half. domain_labels holds 0 per labeled image then
// 1 per unlabeled image, matching the concatenated discriminator input.
struct DomainBatch {
  Tensor labeled_images;
  StackedTargets labeled_targets;
  Tensor unlabeled_images;  // undefined when the method uses none
  std::vector<double> domain_labels;
};

struct StepLosses {
  double total = 0.0;
  double det = 0.0;
  double cp = 0.0, off = 0.0, kp = 0.0, kphm = 0.0, obb = 0.0;
  std::optional<double> haad;
  std::optional<double> lad;
  std::optional<double> mmd;
  std::optional<double> d_high_acc;  // pixel-mean sigmoid vs 0.5 per image
  std::optional<double> d_low_acc;
};

struct EpochLog {
  int64_t epoch = 0;
  double lr_detector = 0.0;
  double lr_adversarial = 0.0;
  double total = 0.0;  // all loss fields are means over the epoch's steps
  double det = 0.0;
  double cp = 0.0, off = 0.0, kp = 0.0, kphm = 0.0, obb = 0.0;
  std::optional<double> haad;
  std::optional<double> lad;
  std::optional<double> mmd;
  std::optional<double> d_high_acc;
  std::optional<double> d_low_acc;
};

struct EvalRecord {
  int64_t epoch = 0;
  EvalMetrics metrics;
};

struct RunReport {
  TrainConfig config;
  std::vector<EpochLog> epochs;
  std::vector<EvalRecord> interim;  // populated when eval_every > 0
  EvalMetrics final_metrics;        // target domain, config.eval_split
  double wall_clock_seconds = 0.0;
  std::string checkpoint_path;
};

// JSON carries the config echo and everything above; metric values are
// scaled by 100 on emission. The CSV has one row per epoch plus a final
// metrics row and omits the wall clock, so identical runs give identical
// bytes; in the JSON only wall_clock_seconds differs.
std::string run_report_to_json(const RunReport& r);
std::string run_report_to_csv(const RunReport& r);

class Trainer {
 public:
  // Keeps pointers into `data`, which must outlive the trainer.
  // Normalization always comes from the source train split.
  Trainer(TrainConfig cfg, const Dataset& data);

  // Draws the next batch halves from per-epoch shuffles of the labeled and
  // unlabeled train splits, applying augmentation when enabled.
  DomainBatch sample_batch();

  // Detection loss on the labeled half plus the method's alignment term,
  // one backward pass, one optimizer step. progress in [0, 1] drives the
  // gradient-reversal schedule. Throws on non-finite losses, dumping every
  // term.
  StepLosses train_step(const DomainBatch& batch, double progress);

  // Full loop: epochs x steps_per_epoch steps with the stepped learning
  // rate, then a final evaluation. A non-empty out_dir receives
  // checkpoint.bin, report.json and report.csv.
  RunReport run(const std::string& out_dir);

  EvalMetrics evaluate(Split split);  // target domain
  EvalMetrics evaluate(Split split, Domain domain);

  void save(const std::string& path);

  TrainerModel& model() { return model_; }
  Adam& optimizer() { return optim_; }
  const NormStats& norm_stats() const { return norm_; }
  const TrainConfig& config() const { return cfg_; }
  int64_t steps_per_epoch() const { return steps_per_epoch_; }

 private:
  const SceneSample& cached_sample(const DatasetEntry* entry);
  const DatasetEntry* take_labeled();
  const DatasetEntry* take_unlabeled();

  TrainConfig cfg_;
  const Dataset* data_;
  TrainerModel model_;
  Adam optim_;
  std::mt19937_64 rng_;
  NormStats norm_;
  std::vector<const DatasetEntry*> labeled_train_;
  std::vector<const DatasetEntry*> unlabeled_train_;
  std::vector<size_t> labeled_order_, unlabeled_order_;
  size_t labeled_pos_ = 0, unlabeled_pos_ = 0;
  int64_t steps_per_epoch_ = 0;
  std::vector<SceneSample> cache_;
  std::vector<int> cache_ready_;
};

// Rebuilds the model and normalization stats a checkpoint was saved with.
struct LoadedRun {
  TrainConfig config;
  NormStats norm;
  TrainerModel model;
};
LoadedRun load_run(const std::string& checkpoint_path);

// Decode + match + score on explicit entries, eval-mode, no gradients.
EvalMetrics evaluate_model(TrainerModel& model, const TrainConfig& cfg,
                           const NormStats& norm,
                           const std::vector<const DatasetEntry*>& entries);

// Ablation study cells: the component grid toggles the two discriminators,
// gradient reversal and attention (rows A-F); the weight grid sweeps
// lambda_had over {1, 0.1, 0.01, 0.001} and lambda_lad over
// {0.01, 0.001, 0.0001}, each with gradient reversal on and the other
// branch off.
struct AblationCell {
  std::string grid;  // "components" or "weights"
  std::string id;
  TrainConfig config;
};

std::vector<AblationCell> ablation_grid(const TrainConfig& base);

std::string ablation_csv(const std::vector<AblationCell>& cells,
                         const std::vector<RunReport>& reports);

// Trains every cell, writing <out_dir>/<grid>_<id>/{checkpoint.bin,
// report.json, report.csv} and <out_dir>/comparison.csv.
std::vector<RunReport> run_ablation(const std::vector<AblationCell>& cells,
                                    const Dataset& data,
                                    const std::string& out_dir);

}  // namespace maad
