#pragma once

#include "pfn/gradcheck.hpp"

#include <functional>
#include <string>
#include <vector>

namespace pfn {

struct GradSuiteEntry {
  std::string name;
  double tolerance = 1e-4;
  GradCheckResult result;
  double seconds = 0;

  bool passed() const { return result.max_rel_error < tolerance; }
};

/// 64-bit finite-difference checks of every differentiable op, the loss terms,
/// the pose network and a full S=3 (sc=2, pc=4) network on 16x16 inputs.
/// `on_entry` sees each result as it completes.
std::vector<GradSuiteEntry> run_gradient_suite(const std::function<void(const GradSuiteEntry&)>& on_entry = {});

}  // namespace pfn
