#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfca/gradcheck.hpp"

namespace dfca {

/// Finite-difference checks over every layer, FC-Conv, FC-Block, a transition,
/// CAM, the mini backbone and a tiny end-to-end DFCANet, all in f64.
struct GradSuiteOptions {
  std::uint64_t seed = 1;
  GradCheckOptions check;
  /// Test hook: the named case gets a backward pass that is off by 1%.
  std::string inject_fault;
};

struct GradSuiteCase {
  std::string name;
  std::vector<GradCheckResult> results;
  bool passed() const;
  double max_rel_error() const;
};

std::vector<GradSuiteCase> run_gradient_suite(const GradSuiteOptions& opt = {});

/// Case names in execution order.
const std::vector<std::string>& gradient_suite_cases();

}  // namespace dfca
