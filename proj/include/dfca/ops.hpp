#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <utility>

#include "dfca/autograd.hpp"
#include "dfca/tensor.hpp"

namespace dfca {

// Elementwise. Binary ops require equal shapes; a scalar (numel 1) operand broadcasts.
enum class ElementwiseOp { add, mul, sigmoid, relu };
Tensor elementwise(ElementwiseOp op, const Tensor& a, const std::optional<Tensor>& b = std::nullopt);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// x[..., C] + bias[C]
Tensor add_bias(const Tensor& x, const Tensor& bias);

/// Rank 2: [M,K]·[K,N]. Rank 3: batched [B,M,K]·[B,K,N].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes of a rank-2 or rank-3 tensor.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
/// Softmax over the last axis, row-max stabilized.
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);

/// Channels [begin, end) of the last axis.
Tensor channel_slice(const Tensor& t, std::int64_t begin, std::int64_t end);
std::pair<Tensor, Tensor> channel_split(const Tensor& t);
Tensor channel_concat(const Tensor& a, const Tensor& b);

enum class Padding { same, valid };

struct Conv2DOptions {
  int stride_h = 1;
  int stride_w = 1;
  Padding padding = Padding::same;
};

/// x [N,H,W,Cin], kernel [kh,kw,Cin,Cout], bias [Cout] (optional). Cross-correlation.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const std::optional<Tensor>& bias,
              const Conv2DOptions& opt = {});

struct Pool2DOptions {
  int pool_h = 2;
  int pool_w = 2;
  int stride_h = 2;
  int stride_w = 2;
  bool ceil_mode = false;
};

/// Partial windows (ceil mode) average over their in-bounds members only.
Tensor avg_pool2d(const Tensor& x, const Pool2DOptions& opt);
/// Max pooling with TF-style "same" padding; padded cells never win.
Tensor max_pool2d_same(const Tensor& x, int pool, int stride);

/// Half-pixel-center bilinear upsampling of [N,h,w,C] to [N,H,W,C].
Tensor bilinear_upsample(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

/// [N,H,W,C] -> [N,C]
Tensor global_avg_pool(const Tensor& x);

/// Multiplies by a fixed (non-differentiable) tensor of the same shape.
Tensor mul_mask(const Tensor& x, const Tensor& mask);

struct BatchNormResult {
  Tensor y;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // biased
};

/// Normalizes over all axes but the last using batch statistics.
BatchNormResult batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
/// Normalizes with fixed statistics.
Tensor batch_norm_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                        const Tensor& running_var, double eps);

inline constexpr double kBceEps = 1e-7;

/// p, y: [N,1] (or any equal shapes). Mean of -[y ln p + (1-y) ln(1-p)] with p clamped to [eps, 1-eps].
Tensor bce_loss(const Tensor& p, const Tensor& y);
/// logits [N,K], labels class indices. Mean negative log-likelihood.
Tensor cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels);

}  // namespace dfca
