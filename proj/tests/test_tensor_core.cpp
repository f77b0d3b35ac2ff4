#include <cmath>
#include <random>

#include "dfca/autograd.hpp"
#include "dfca/gradcheck.hpp"
#include "dfca/ops.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace dfca;
using dfca::testing::max_abs_diff;
using dfca::testing::random_tensor;

namespace {

// Projects an arbitrary output onto fixed random weights so every element contributes.
Tensor project(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

void expect_grads_ok(const std::vector<GradCheckResult>& results) {
  for (const auto& r : results) {
    INFO(r.name << " rel=" << r.max_rel_error << " abs=" << r.max_abs_error);
    CHECK(r.passed);
  }
}

std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t p = 0; p < k; ++p) out[i * n + j] += a.at(i * k + p) * b.at(p * n + j);
  return out;
}

}  // namespace

TEST_CASE("elementwise examples") {
  auto a = Tensor::from({2}, {1, 2});
  auto b = Tensor::from({2}, {3, 4});
  CHECK(elementwise(ElementwiseOp::add, a, b).to_vector() == std::vector<double>{4, 6});
  CHECK(elementwise(ElementwiseOp::sigmoid, Tensor::from({1}, {0})).item() == doctest::Approx(0.5));
  CHECK(elementwise(ElementwiseOp::relu, Tensor::from({2}, {-1, 2})).to_vector() == std::vector<double>{0, 2});
  CHECK(mul(a, b).to_vector() == std::vector<double>{3, 8});
}

TEST_CASE("elementwise shape mismatch names both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({3, 2});
  try {
    add(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[3x2]") != std::string::npos);
  }
  CHECK_THROWS(elementwise(ElementwiseOp::add, a));
}

TEST_CASE("scalar broadcast is the only broadcast") {
  auto a = Tensor::from({3}, {1, 2, 3});
  auto s = Tensor::scalar(2.0);
  CHECK(mul(a, s).to_vector() == std::vector<double>{2, 4, 6});
  CHECK(add(s, a).to_vector() == std::vector<double>{3, 4, 5});
  CHECK_THROWS(add(a, Tensor::zeros({1, 3})) .numel());  // same numel, different shape but not scalar
}

TEST_CASE("matmul examples and naive-loop oracle") {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto a = Tensor::from({2, 2}, {5, 6, 7, 8});
  CHECK(matmul(eye, a).to_vector() == a.to_vector());
  CHECK(matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {1, 1})).to_vector() ==
        std::vector<double>{3, 7});

  std::mt19937_64 rng(11);
  auto x = random_tensor({5, 4}, rng);
  auto y = random_tensor({4, 3}, rng);
  CHECK(max_abs_diff(matmul(x, y).to_vector(), naive_matmul(x, y)) < 1e-6);
  CHECK_THROWS(matmul(x, x));
}

TEST_CASE("softmax_rows closed forms and properties") {
  auto s = softmax_rows(Tensor::from({3, 2}, {0, 0, 1000, 1000, 0, std::log(3.0)}, DType::f64));
  auto v = s.to_vector();
  CHECK(v[0] == doctest::Approx(0.5));
  CHECK(v[1] == doctest::Approx(0.5));
  CHECK(v[2] == doctest::Approx(0.5));
  CHECK(v[3] == doctest::Approx(0.5));
  CHECK(v[4] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(v[5] == doctest::Approx(0.75).epsilon(1e-12));

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = random_tensor({4, 7}, rng, DType::f64, -20, 20);
    auto p = softmax_rows(m).to_vector();
    for (int r = 0; r < 4; ++r) {
      double total = 0;
      for (int c = 0; c < 7; ++c) total += p[r * 7 + c];
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
    auto shifted = add(m, Tensor::scalar(123.0, DType::f64));
    CHECK(max_abs_diff(softmax_rows(shifted).to_vector(), p) < 1e-6);
  }
}

TEST_CASE("split/concat and transpose are inverse pairs") {
  std::mt19937_64 rng(3);
  auto t = random_tensor({4, 4, 8}, rng);
  auto [lo, hi] = channel_split(t);
  CHECK(lo.shape() == Shape{4, 4, 4});
  CHECK(channel_concat(lo, hi).to_vector() == t.to_vector());
  auto six = random_tensor({2, 6}, rng);
  CHECK(channel_split(six).first.shape() == Shape{2, 3});
  CHECK_THROWS_AS(channel_split(random_tensor({2, 5}, rng)), std::invalid_argument);

  auto m = random_tensor({3, 5}, rng);
  CHECK(transpose(transpose(m)).to_vector() == m.to_vector());
  auto b = random_tensor({2, 3, 5}, rng);
  CHECK(transpose(transpose(b)).to_vector() == b.to_vector());
}

TEST_CASE("backward semantics") {
  std::mt19937_64 rng(1);
  auto x = random_tensor({3, 2}, rng).set_requires_grad(true);
  backward(sum(x));
  for (double g : x.grad().to_vector()) CHECK(g == 1.0);

  x.zero_grad();
  backward(sum(mul(x, x)));
  auto g = x.grad().to_vector();
  auto xv = x.to_vector();
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(2 * xv[i]));

  auto y = mul(x, x);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);  // non-scalar

  auto loss = sum(y);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), std::logic_error);  // graph consumed
}

TEST_CASE("backward visits each node once on a diamond") {
  auto x = Tensor::from({2}, {1.0, 2.0}, DType::f64).set_requires_grad(true);
  auto a = relu(x);
  auto b = sigmoid(x);
  auto c = add(a, b);
  auto d = add(c, a);  // a reused
  auto stats = backward(sum(d));
  CHECK(stats.nodes_visited == 5);  // relu, sigmoid, add, add, sum
  // d/dx = 2*relu' + sigma'
  const double s1 = 1.0 / (1.0 + std::exp(-1.0));
  CHECK(x.grad().at(0) == doctest::Approx(2.0 + s1 * (1 - s1)));
}

TEST_CASE("no-grad guard records nothing") {
  auto x = Tensor::from({2}, {1, 2}).set_requires_grad(true);
  NoGradGuard guard;
  auto y = sum(mul(x, x));
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite-difference checks for every differentiable op") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    std::mt19937_64 rng(seed);
    CAPTURE(seed);
    {
      auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), w = random_tensor({3, 4}, rng);
      expect_grads_ok(gradient_check("add", [&] { return project(add(a, b), w); }, {{"a", a}, {"b", b}}));
      expect_grads_ok(gradient_check("sub", [&] { return project(sub(a, b), w); }, {{"a", a}, {"b", b}}));
      expect_grads_ok(gradient_check("mul", [&] { return project(mul(a, b), w); }, {{"a", a}, {"b", b}}));
      expect_grads_ok(gradient_check("sigmoid", [&] { return project(sigmoid(a), w); }, {{"a", a}}));
      expect_grads_ok(gradient_check("relu", [&] { return project(relu(a), w); }, {{"a", a}}));
      expect_grads_ok(gradient_check("scale", [&] { return project(scale(a, -1.7), w); }, {{"a", a}}));
      auto s = random_tensor({1}, rng);
      expect_grads_ok(gradient_check("scalar-mul", [&] { return project(mul(a, s), w); }, {{"a", a}, {"s", s}}));
      expect_grads_ok(gradient_check("mean", [&] { return mean(mul(a, w)); }, {{"a", a}}));
      expect_grads_ok(gradient_check("softmax", [&] { return project(softmax_rows(a), w); }, {{"a", a}}));
      expect_grads_ok(gradient_check("log_softmax", [&] { return project(log_softmax_rows(a), w); }, {{"a", a}}));
      auto bias = random_tensor({4}, rng);
      expect_grads_ok(
          gradient_check("add_bias", [&] { return project(add_bias(a, bias), w); }, {{"x", a}, {"bias", bias}}));
    }
    {
      auto a = random_tensor({5, 4}, rng), b = random_tensor({4, 3}, rng), w = random_tensor({5, 3}, rng);
      expect_grads_ok(gradient_check("matmul", [&] { return project(matmul(a, b), w); }, {{"a", a}, {"b", b}}));
      auto ba = random_tensor({2, 3, 4}, rng), bb = random_tensor({2, 4, 2}, rng), bw = random_tensor({2, 3, 2}, rng);
      expect_grads_ok(
          gradient_check("bmm", [&] { return project(matmul(ba, bb), bw); }, {{"a", ba}, {"b", bb}}));
      auto tw = random_tensor({4, 5}, rng);
      expect_grads_ok(gradient_check("transpose", [&] { return project(transpose(a), tw); }, {{"a", a}}));
      auto rw = random_tensor({2, 10}, rng);
      expect_grads_ok(gradient_check("reshape", [&] { return project(reshape(a, {2, 10}), rw); }, {{"a", a}}));
    }
    {
      auto t = random_tensor({2, 3, 3, 6}, rng), w1 = random_tensor({2, 3, 3, 3}, rng), w2 = random_tensor({2, 3, 3, 3}, rng);
      expect_grads_ok(gradient_check(
          "split", [&] {
            auto [lo, hi] = channel_split(t);
            return add(project(lo, w1), project(hi, w2));
          },
          {{"t", t}}));
      auto u = random_tensor({2, 3, 3, 2}, rng), wc = random_tensor({2, 3, 3, 8}, rng);
      expect_grads_ok(
          gradient_check("concat", [&] { return project(channel_concat(t, u), wc); }, {{"a", t}, {"b", u}}));
    }
  }
}

TEST_CASE("gradient of concat w.r.t. first half equals the upstream slice") {
  std::mt19937_64 rng(9);
  auto a = random_tensor({2, 2, 3}, rng).set_requires_grad(true);
  auto b = random_tensor({2, 2, 5}, rng).set_requires_grad(true);
  auto up = random_tensor({2, 2, 8}, rng);
  backward(sum(mul(channel_concat(a, b), up)));
  auto ga = a.grad().to_vector();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 3; ++c) CHECK(ga[r * 3 + c] == up.at(r * 8 + c));
}

TEST_CASE("determinism: identical inputs give bit-identical outputs") {
  auto run = [] {
    std::mt19937_64 rng(77);
    auto a = random_tensor({6, 5}, rng, DType::f32), b = random_tensor({5, 4}, rng, DType::f32);
    return softmax_rows(matmul(a, b)).to_vector();
  };
  CHECK(run() == run());
}

TEST_CASE("dtype mismatch is rejected") {
  CHECK_THROWS_AS(add(Tensor::zeros({2}, DType::f32), Tensor::zeros({2}, DType::f64)), std::invalid_argument);
}
