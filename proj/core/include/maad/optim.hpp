#pragma once

#include <cstdint>
#include <vector>

#include "maad/nn.hpp"

namespace maad {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;  // classic L2, added to the gradient
  void validate() const;
};

struct ParamGroup {
  std::vector<NamedParam> params;
  double lr = 1e-3;
};

// First/second moment estimates for one parameter.
struct AdamSlot {
  std::vector<double> m;
  std::vector<double> v;
};

// Adam over named parameter groups, each with its own learning rate. A
// parameter without an accumulated gradient counts as zero-gradient, so with
// zero weight decay it stays untouched.
class Adam {
 public:
  Adam(std::vector<ParamGroup> groups, AdamConfig cfg = {});

  void step();
  void zero_grad();

  std::vector<ParamGroup>& groups() { return groups_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }
  int64_t steps_taken() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  // Moment slots flattened over groups then parameters, for checkpoints.
  const std::vector<AdamSlot>& slots() const { return slots_; }
  void restore(std::vector<AdamSlot> slots, int64_t steps_taken);

 private:
  std::vector<ParamGroup> groups_;
  std::vector<AdamSlot> slots_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

// Step decay: the learning-rate multiplier starts at 1 and shrinks by
// `factor` after each milestone epoch floor(fraction * total_epochs); the
// milestone epoch itself still runs at the previous rate.
struct LrSchedule {
  std::vector<double> milestones = {2000.0 / 5500.0, 3500.0 / 5500.0,
                                    4500.0 / 5500.0};
  double factor = 0.5;
  void validate() const;
  double multiplier(int64_t epoch, int64_t total_epochs) const;
};

}  // namespace maad
