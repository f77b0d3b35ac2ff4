#include "dfca/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace dfca {

Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::linear: return x;
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::softmax: return softmax_rows(x);
  }
  return x;
}

std::int64_t count_trainable(const TensorList& list) {
  std::int64_t n = 0;
  for (const auto& e : list)
    if (e.trainable) n += e.tensor.numel();
  return n;
}

void init_uniform(Tensor& t, Init scheme, std::int64_t fan_in, std::int64_t fan_out, std::mt19937_64& rng) {
  const double limit = scheme == Init::he_uniform ? std::sqrt(6.0 / static_cast<double>(fan_in))
                                                  : std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  auto& buf = t.mutable_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf.set(i, dist(rng));
}

namespace {
Init init_for(Activation act) { return act == Activation::relu ? Init::he_uniform : Init::glorot_uniform; }
}  // namespace

Conv2D::Conv2D(int kernel_h, int kernel_w, std::int64_t cin, std::int64_t cout, Activation act, std::mt19937_64& rng,
               DType dt, Conv2DOptions opt)
    : opt_(opt), act_(act) {
  if (opt.padding == Padding::same && (kernel_h % 2 == 0 || kernel_w % 2 == 0))
    throw std::invalid_argument("Conv2D: same padding needs odd kernel sizes");
  kernel_ = Tensor::zeros({kernel_h, kernel_w, cin, cout}, dt);
  init_uniform(kernel_, init_for(act), kernel_h * kernel_w * cin, kernel_h * kernel_w * cout, rng);
  kernel_.set_requires_grad(true);
  bias_ = Tensor::zeros({cout}, dt);
  bias_.set_requires_grad(true);
}

Tensor Conv2D::forward(const Tensor& x) const { return activate(conv2d(x, kernel_, bias_, opt_), act_); }

void Conv2D::collect(const std::string& prefix, TensorList& out) const {
  out.push_back({prefix + ".kernel", kernel_, true});
  out.push_back({prefix + ".bias", bias_, true});
}

BatchNorm2D::BatchNorm2D(std::int64_t channels, DType dt) {
  gamma_ = Tensor::full({channels}, 1.0, dt);
  gamma_.set_requires_grad(true);
  beta_ = Tensor::zeros({channels}, dt);
  beta_.set_requires_grad(true);
  running_mean_ = Tensor::zeros({channels}, dt);
  running_var_ = Tensor::full({channels}, 1.0, dt);
}

Tensor BatchNorm2D::forward(const Tensor& x, Mode mode) {
  if (mode == Mode::infer) return batch_norm_infer(x, gamma_, beta_, running_mean_, running_var_, kEpsilon);
  auto res = batch_norm_train(x, gamma_, beta_, kEpsilon);
  const double m = static_cast<double>(x.numel() / x.dim(-1));
  const double unbias = m > 1 ? m / (m - 1) : 1.0;
  auto& rm = running_mean_.mutable_buffer();
  auto& rv = running_var_.mutable_buffer();
  for (std::size_t c = 0; c < rm.size(); ++c) {
    rm.set(c, (1 - kMomentum) * rm.get(c) + kMomentum * res.batch_mean[c]);
    rv.set(c, (1 - kMomentum) * rv.get(c) + kMomentum * res.batch_var[c] * unbias);
  }
  return res.y;
}

void BatchNorm2D::collect(const std::string& prefix, TensorList& out) const {
  out.push_back({prefix + ".gamma", gamma_, true});
  out.push_back({prefix + ".beta", beta_, true});
  out.push_back({prefix + ".running_mean", running_mean_, false});
  out.push_back({prefix + ".running_var", running_var_, false});
}

Dense::Dense(std::int64_t in, std::int64_t out, Activation act, std::mt19937_64& rng, DType dt) : act_(act) {
  weight_ = Tensor::zeros({in, out}, dt);
  init_uniform(weight_, init_for(act), in, out, rng);
  weight_.set_requires_grad(true);
  bias_ = Tensor::zeros({out}, dt);
  bias_.set_requires_grad(true);
}

Tensor Dense::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != weight_.dim(0))
    throw std::invalid_argument("Dense: input " + shape_str(x.shape()) + " does not match weight " +
                                shape_str(weight_.shape()));
  return activate(add_bias(matmul(x, weight_), bias_), act_);
}

void Dense::collect(const std::string& prefix, TensorList& out) const {
  out.push_back({prefix + ".weight", weight_, true});
  out.push_back({prefix + ".bias", bias_, true});
}

Tensor dropout(const Tensor& x, double rate, Mode mode, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
  if (mode == Mode::infer || rate == 0.0) return x;
  Tensor mask = Tensor::zeros(x.shape(), x.dtype());
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale_up = 1.0 / (1.0 - rate);
  auto& m = mask.mutable_buffer();
  for (std::size_t i = 0; i < m.size(); ++i) m.set(i, keep(rng) ? scale_up : 0.0);
  return mul_mask(x, mask);
}

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamConfig& cfg) {
  if (!(cfg.lr > 0)) throw std::invalid_argument("adam_step: learning rate must be positive");
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: params/grads count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.dtype(), static_cast<std::size_t>(p.numel()));
      state.v.emplace_back(p.dtype(), static_cast<std::size_t>(p.numel()));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match params");
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].shape() != params[k].shape() || state.m[k].size() != static_cast<std::size_t>(params[k].numel()))
      throw std::invalid_argument("adam_step: shape mismatch for parameter " + std::to_string(k));
    dispatch(params[k].dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto p = params[k].mutable_data<T>();
      auto g = grads[k].data<T>();
      auto m = state.m[k].as<T>();
      auto v = state.v[k].as<T>();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        const double mi = cfg.beta1 * m[i] + (1 - cfg.beta1) * gi;
        const double vi = cfg.beta2 * v[i] + (1 - cfg.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        p[i] = static_cast<T>(p[i] - cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
      }
    });
  }
}

}  // namespace dfca
