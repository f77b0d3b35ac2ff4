#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dfca/tensor.hpp"

namespace dfca {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;  // max |analytic - numeric| over max(|analytic|, |numeric|, scale_floor) of the tensor
  double max_abs_error = 0;
  std::int64_t checked = 0;
  std::int64_t kink_retries = 0;  // elements re-measured with a shorter step
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Lower bound on the error denominator. Gradients that are exactly zero
  /// (a bias feeding batch norm) only show finite-difference noise, which
  /// grows with the loss magnitude and reaches about 1e-10.
  double scale_floor = 1e-5;
  /// Upper bound on perturbed elements per tensor; 0 checks every element.
  std::int64_t max_elements = 0;
  std::uint64_t seed = 0;
  /// Elements off by more than tolerance/10 are re-measured at step/10,
  /// step/100, ... this many times and keep the closest estimate.
  int kink_retries = 3;
};

/// Compares reverse-mode gradients of loss_fn() with central differences.
/// Each tensor in wrt must be an f64 leaf that loss_fn reads on every call.
std::vector<GradCheckResult> gradient_check(const std::string& name, const std::function<Tensor()>& loss_fn,
                                            const std::vector<std::pair<std::string, Tensor>>& wrt,
                                            const GradCheckOptions& opt = {});

/// Fixed random weights to turn an arbitrary output into a scalar with a
/// non-degenerate gradient.
Tensor random_like(const Tensor& t, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);

}  // namespace dfca
