#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "maad/tensor.hpp"

namespace maad {

struct GradCheckParam {
  std::string name;
  Tensor tensor;
  // Analytic gradients are compared against fd_sign * finite difference.
  // Branches behind a gradient reversal layer check out with fd_sign = -1.
  double fd_sign = 1.0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  double max_rel_err = 0.0;
  bool pass = true;
  double seconds = 0.0;
};

// Central finite differences against one backward pass. forward() must
// rebuild the graph from the current parameter values and return a scalar;
// it has to be deterministic, so batch-norm fragments run in eval mode.
inline GradCheckReport grad_check(const std::function<Tensor()>& forward,
                                  const std::vector<GradCheckParam>& params,
                                  double tolerance, double h = 1e-5) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckReport report;
  report.tolerance = tolerance;

  for (const auto& p : params) Tensor(p.tensor).zero_grad();
  Tensor loss = forward();
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    analytic.push_back(p.tensor.has_grad()
                           ? p.tensor.grad()
                           : std::vector<double>(p.tensor.numel(), 0.0));
  }

  for (size_t pi = 0; pi < params.size(); ++pi) {
    const auto& p = params[pi];
    GradCheckEntry entry;
    entry.name = p.name;
    Tensor handle = p.tensor;  // shares storage; needed for mutable access
    auto& vals = handle.values();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      double fplus = 0.0;
      double fminus = 0.0;
      {
        NoGradGuard ng;
        vals[i] = saved + h;
        fplus = forward().item();
        vals[i] = saved - h;
        fminus = forward().item();
      }
      vals[i] = saved;
      const double fd = p.fd_sign * (fplus - fminus) / (2.0 * h);
      const double a = analytic[pi][i];
      const double denom =
          std::max({std::fabs(a), std::fabs(fd), 1e-3});
      const double err = std::fabs(a - fd) / denom;
      if (err > entry.max_rel_err) entry.max_rel_err = err;
    }
    entry.pass = entry.max_rel_err < tolerance;
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.pass = report.pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }

  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return report;
}

}  // namespace maad
