#include "dfca/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dfca/autograd.hpp"

namespace dfca {

Tensor random_like(const Tensor& t, std::mt19937_64& rng, double lo, double hi) {
  Tensor out = Tensor::zeros(t.shape(), t.dtype());
  std::uniform_real_distribution<double> dist(lo, hi);
  auto& b = out.mutable_buffer();
  for (std::size_t i = 0; i < b.size(); ++i) b.set(i, dist(rng));
  return out;
}

std::vector<GradCheckResult> gradient_check(const std::string& name, const std::function<Tensor()>& loss_fn,
                                            const std::vector<std::pair<std::string, Tensor>>& wrt,
                                            const GradCheckOptions& opt) {
  for (const auto& [label, t] : wrt) {
    if (t.dtype() != DType::f64) throw std::invalid_argument("gradient_check: '" + label + "' must be f64");
    if (!t.is_leaf()) throw std::invalid_argument("gradient_check: '" + label + "' must be a leaf");
  }
  std::vector<Tensor> leaves;
  std::vector<bool> had_grad_flag;
  for (const auto& [label, t] : wrt) {
    Tensor leaf = t;
    had_grad_flag.push_back(leaf.requires_grad());
    leaf.set_requires_grad(true);
    leaf.zero_grad();
    leaves.push_back(leaf);
  }
  Tensor loss = loss_fn();
  backward(loss);

  std::vector<GradCheckResult> results;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    Tensor& leaf = leaves[k];
    const std::vector<double> analytic = leaf.grad().to_vector();
    std::vector<std::size_t> idx(analytic.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (opt.max_elements > 0 && static_cast<std::int64_t>(idx.size()) > opt.max_elements) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(opt.max_elements));
    }
    GradCheckResult r;
    r.name = name + "/" + wrt[k].first;
    double scale = 0;
    std::vector<std::pair<double, double>> pairs;
    auto values = leaf.mutable_data<double>();
    auto central = [&](std::size_t i, double h) {
      NoGradGuard ng;
      const double orig = values[i];
      values[i] = orig + h;
      const double plus = loss_fn().item();
      values[i] = orig - h;
      const double minus = loss_fn().item();
      values[i] = orig;
      return (plus - minus) / (2 * h);
    };
    for (std::size_t i : idx) {
      const double numeric = central(i, opt.step);
      pairs.emplace_back(analytic[i], numeric);
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric)});
    }
    const double denom = std::max(scale, opt.scale_floor);
    for (std::size_t j = 0; j < pairs.size(); ++j) {
      auto& [a, n] = pairs[j];
      // A step that straddles a ReLU or max-pool kink measures a blend of the
      // two one-sided slopes; shorter steps stay on one side. A wrong backward
      // disagrees at every step.
      double h = opt.step;
      if (opt.kink_retries > 0 && !(std::abs(a - n) / denom < opt.tolerance / 10)) {
        for (int t = 0; t < opt.kink_retries; ++t) {
          h /= 10;
          const double m = central(idx[j], h);
          if (std::abs(a - m) < std::abs(a - n)) n = m;
        }
        ++r.kink_retries;
      }
      r.max_abs_error = std::max(r.max_abs_error, std::abs(a - n));
    }
    r.max_rel_error = r.max_abs_error / denom;
    r.checked = static_cast<std::int64_t>(idx.size());
    r.passed = std::isfinite(r.max_rel_error) && r.max_rel_error < opt.tolerance;
    results.push_back(r);
  }
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    leaves[k].zero_grad();
    leaves[k].set_requires_grad(had_grad_flag[k]);
  }
  return results;
}

}  // namespace dfca
