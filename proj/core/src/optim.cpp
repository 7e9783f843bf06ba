#include "maad/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace maad {

void AdamConfig::validate() const {
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("adam: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) {
    throw std::invalid_argument("adam: eps must be positive");
  }
  if (weight_decay < 0.0) {
    throw std::invalid_argument("adam: weight decay must be >= 0");
  }
}

Adam::Adam(std::vector<ParamGroup> groups, AdamConfig cfg)
    : groups_(std::move(groups)), cfg_(cfg) {
  cfg_.validate();
  for (const auto& g : groups_) {
    if (!(g.lr >= 0.0)) {
      throw std::invalid_argument("adam: learning rate must be >= 0");
    }
    for (const auto& p : g.params) {
      if (!p.tensor.defined()) {
        throw std::invalid_argument("adam: undefined parameter " + p.name);
      }
      const auto n = static_cast<size_t>(p.tensor.numel());
      slots_.push_back({std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
    }
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  size_t slot = 0;
  for (auto& g : groups_) {
    for (auto& p : g.params) {
      auto& value = p.tensor.values();
      const std::vector<double>* grad =
          p.tensor.has_grad() ? &p.tensor.grad() : nullptr;
      AdamSlot& s = slots_[slot++];
      for (size_t i = 0; i < value.size(); ++i) {
        const double gi =
            (grad ? (*grad)[i] : 0.0) + cfg_.weight_decay * value[i];
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double m_hat = s.m[i] / bc1;
        const double v_hat = s.v[i] / bc2;
        value[i] -= g.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
      }
    }
  }
}

void Adam::zero_grad() {
  for (auto& g : groups_) {
    for (auto& p : g.params) p.tensor.zero_grad();
  }
}

void Adam::restore(std::vector<AdamSlot> slots, int64_t steps_taken) {
  if (slots.size() != slots_.size()) {
    throw std::invalid_argument("adam: restore slot count mismatch");
  }
  for (size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].m.size() != slots_[i].m.size() ||
        slots[i].v.size() != slots_[i].v.size()) {
      throw std::invalid_argument("adam: restore slot size mismatch");
    }
  }
  if (steps_taken < 0) {
    throw std::invalid_argument("adam: restore step count must be >= 0");
  }
  slots_ = std::move(slots);
  t_ = steps_taken;
}

void LrSchedule::validate() const {
  if (!(factor > 0.0 && factor <= 1.0)) {
    throw std::invalid_argument("lr schedule: factor must lie in (0, 1]");
  }
  double prev = 0.0;
  for (double f : milestones) {
    if (!(f > prev && f < 1.0)) {
      throw std::invalid_argument(
          "lr schedule: milestones must be strictly increasing in (0, 1)");
    }
    prev = f;
  }
}

double LrSchedule::multiplier(int64_t epoch, int64_t total_epochs) const {
  if (total_epochs <= 0) {
    throw std::invalid_argument("lr schedule: total epochs must be positive");
  }
  if (epoch < 0 || epoch >= total_epochs) {
    throw std::invalid_argument("lr schedule: epoch out of range");
  }
  double mult = 1.0;
  for (double f : milestones) {
    const auto boundary =
        static_cast<int64_t>(std::floor(f * static_cast<double>(total_epochs)));
    if (boundary < epoch) mult *= factor;
  }
  return mult;
}

}  // namespace maad
