#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dfca/ops.hpp"

namespace dfca {

enum class Mode { train, infer };
enum class Activation { linear, relu, sigmoid, softmax };

Tensor activate(const Tensor& x, Activation act);

/// A tensor owned by a layer, addressed by its dotted path in the model.
struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};
using TensorList = std::vector<NamedTensor>;

std::int64_t count_trainable(const TensorList& list);

enum class Init { he_uniform, glorot_uniform };

/// Uniform fill in [-limit, limit] with limit from fan sizes.
void init_uniform(Tensor& t, Init scheme, std::int64_t fan_in, std::int64_t fan_out, std::mt19937_64& rng);

class Conv2D {
 public:
  Conv2D() = default;
  Conv2D(int kernel_h, int kernel_w, std::int64_t cin, std::int64_t cout, Activation act, std::mt19937_64& rng,
         DType dt = DType::f32, Conv2DOptions opt = {});

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, TensorList& out) const;
  std::int64_t param_count() const { return kernel_.numel() + bias_.numel(); }

  Tensor& kernel() { return kernel_; }
  Tensor& bias() { return bias_; }
  const Conv2DOptions& options() const { return opt_; }
  Activation activation() const { return act_; }

 private:
  Tensor kernel_;  // [kh, kw, cin, cout]
  Tensor bias_;    // [cout]
  Conv2DOptions opt_;
  Activation act_ = Activation::linear;
};

class BatchNorm2D {
 public:
  static constexpr double kEpsilon = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm2D() = default;
  explicit BatchNorm2D(std::int64_t channels, DType dt = DType::f32);

  /// Train mode normalizes with batch statistics and folds them into the
  /// running estimates; infer mode uses the running estimates only.
  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, TensorList& out) const;
  std::int64_t param_count() const { return gamma_.numel() + beta_.numel(); }

  Tensor& gamma() { return gamma_; }
  Tensor& beta() { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }

 private:
  Tensor gamma_, beta_, running_mean_, running_var_;
};

class Dense {
 public:
  Dense() = default;
  Dense(std::int64_t in, std::int64_t out, Activation act, std::mt19937_64& rng, DType dt = DType::f32);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, TensorList& out) const;
  std::int64_t param_count() const { return weight_.numel() + bias_.numel(); }

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  Activation activation() const { return act_; }

 private:
  Tensor weight_;  // [in, out]
  Tensor bias_;    // [out]
  Activation act_ = Activation::linear;
};

/// Inverted dropout: survivors are scaled by 1/(1-rate). Identity in infer mode.
Tensor dropout(const Tensor& x, double rate, Mode mode, std::mt19937_64& rng);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-7;
};

struct AdamState {
  std::vector<Buffer> m;
  std::vector<Buffer> v;
  std::int64_t t = 0;
};

/// One bias-corrected Adam update of params in place. State is lazily sized on first use.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamConfig& cfg);

}  // namespace dfca
