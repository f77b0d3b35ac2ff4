#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <random>
#include <vector>

#include "dfca/gradcheck.hpp"
#include "dfca/ops.hpp"
#include "doctest.h"

namespace dfca::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, DType dt = DType::f64, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape), dt);
  std::uniform_real_distribution<double> dist(lo, hi);
  auto& b = t.mutable_buffer();
  for (std::size_t i = 0; i < b.size(); ++i) b.set(i, dist(rng));
  return t;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  return max_abs_diff(a.to_vector(), b.to_vector());
}

inline Tensor project(const Tensor& out, const Tensor& w) { return sum(mul(out, w)); }

inline void expect_grads_ok(const std::vector<GradCheckResult>& results) {
  for (const auto& r : results) {
    INFO(r.name << " rel=" << r.max_rel_error << " abs=" << r.max_abs_error);
    CHECK(r.passed);
  }
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name)
      : path(std::filesystem::temp_directory_path() / ("dfca_" + name)) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

}  // namespace dfca::testing
