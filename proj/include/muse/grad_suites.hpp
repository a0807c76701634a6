#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "muse/grad_check.hpp"

namespace muse {

struct GradSuiteResult {
  std::string module;
  std::string name;
  GradCheckReport report;
};

// ops, spectral, attention, met-block, deform-embed, codec-unet, train-eval
const std::vector<std::string>& grad_suite_modules();

// Finite-difference checks for every layer type of `module` ("all" runs
// every module). Throws std::invalid_argument for an unknown module name.
template <typename T>
std::vector<GradSuiteResult> run_grad_suites(const std::string& module, std::uint64_t seed,
                                             const GradCheckOptions& opt = {});

// Single precision compares float gradients against float64 central
// differences; tolerance 5e-2 with a 1e-2 absolute floor.
GradCheckOptions float_grad_options();

}  // namespace muse
