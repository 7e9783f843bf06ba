#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maad/gradcheck.hpp"

namespace maad {

struct GradCheckSuiteResult {
  std::string fragment;
  double tolerance = 0.0;
  double max_rel_err = 0.0;
  int seeds = 0;
  bool pass = false;
  double seconds = 0.0;
};

// Finite-difference coverage of every differentiable op plus the composed
// adversarial branch (attention -> gradient reversal -> domain classifier
// with eval-mode batch norm). Per-op tolerance 1e-4, composed 1e-3.
std::vector<GradCheckSuiteResult> run_gradcheck_suite(uint64_t seed = 7,
                                                      int seeds_per_op = 20);

bool gradcheck_suite_passed(const std::vector<GradCheckSuiteResult>& results);

}  // namespace maad
