#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "muse/params.hpp"
#include "muse/tensor.hpp"

namespace muse {

struct GradCheckOptions {
  double eps = 1e-4;
  double tol = 1e-3;
  // Denominator floor for the relative error, so gradients that are
  // numerically zero are compared absolutely.
  double abs_floor = 1e-6;
  // 0 checks every scalar; otherwise a seeded random subset of this size.
  std::size_t max_samples = 200;
  std::uint64_t seed = 0;
  // One-sided slopes disagreeing by more than this (relative) mark a kink.
  double kink_rel = 1e-2;
  // A report with more kinks than this share of the probes fails.
  double max_kink_fraction = 0.2;
};

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_err = 0;
  bool kink = false;
};

struct GradCheckReport {
  double max_rel_err = 0;
  std::size_t checked = 0;
  std::size_t kinks = 0;
  bool passed = false;
  GradCheckEntry worst;
  std::vector<GradCheckEntry> entries;
};

// Compares reverse-mode gradients of `loss_fn` w.r.t. `params` against
// central differences. `loss_fn` must rebuild the graph from the current
// parameter values on every call and return a scalar.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& loss_fn, const ParamList<T>& params,
                           const GradCheckOptions& opt = {});

}  // namespace muse
