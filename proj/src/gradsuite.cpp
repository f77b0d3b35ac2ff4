#include "dfca/gradsuite.hpp"

#include <algorithm>
#include <functional>

#include "dfca/autograd.hpp"
#include "dfca/model.hpp"
#include "dfca/ops.hpp"

namespace dfca {

bool GradSuiteCase::passed() const {
  return std::all_of(results.begin(), results.end(), [](const GradCheckResult& r) { return r.passed; });
}

double GradSuiteCase::max_rel_error() const {
  double m = 0;
  for (const auto& r : results) m = std::max(m, r.max_rel_error);
  return m;
}

const std::vector<std::string>& gradient_suite_cases() {
  static const std::vector<std::string> names{
      "conv3x3", "conv_strided", "conv1x1",  "batchnorm_train", "batchnorm_infer", "avgpool_ceil",
      "maxpool", "upsample",     "gap",      "dense",           "dense_softmax",   "dropout",
      "bce",     "cross_entropy", "fcconv",  "fcblock",         "transition",      "cam",
      "backbone", "dfcanet_tiny"};
  return names;
}

namespace {

using Wrt = std::vector<std::pair<std::string, Tensor>>;

// Identity forward with a gradient that is 1% too large.
Tensor skewed(const Tensor& x) {
  return record(x.shape(), x.buffer(), "skewed", {x}, [](const Buffer& g, GradSink& sink) {
    if (!sink.wants(0)) return;
    Buffer& out = sink.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) out.set(i, out.get(i) + 1.01 * g.get(i));
  });
}

void fill(Tensor t, std::mt19937_64& rng, double lo, double hi) {
  t.mutable_buffer() = random_like(t, rng, lo, hi).buffer();
}

Tensor leaf(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor t = random_like(Tensor::zeros(std::move(s), DType::f64), rng, lo, hi);
  t.set_requires_grad(true);
  return t;
}

Tensor project(const Tensor& out, const Tensor& w) { return sum(mul(out, w)); }

// Keeps ReLU inputs off their kinks and BN scales away from 1.
void jitter(const TensorList& list, std::mt19937_64& rng) {
  for (const auto& e : list) {
    if (e.name.ends_with(".bias") || e.name.ends_with(".beta")) fill(e.tensor, rng, -0.1, 0.1);
    if (e.name.ends_with(".gamma") || e.name.ends_with(".running_var")) fill(e.tensor, rng, 0.5, 1.5);
    if (e.name.ends_with(".running_mean")) fill(e.tensor, rng, -0.2, 0.2);
  }
}

Wrt trainable(const TensorList& list, Wrt wrt) {
  for (const auto& e : list)
    if (e.trainable) wrt.emplace_back(e.name, e.tensor);
  return wrt;
}

}  // namespace

std::vector<GradSuiteCase> run_gradient_suite(const GradSuiteOptions& opt) {
  std::mt19937_64 rng(opt.seed);
  std::vector<GradSuiteCase> out;
  auto check = [&](const std::string& name, const std::function<Tensor()>& fn, const Wrt& wrt) {
    const bool fault = opt.inject_fault == name;
    auto loss = [&] { return fault ? skewed(fn()) : fn(); };
    out.push_back({name, gradient_check(name, loss, wrt, opt.check)});
  };
  const auto f64 = DType::f64;

  {
    Conv2D conv(3, 3, 2, 3, Activation::relu, rng, f64);
    fill(conv.bias(), rng, -0.1, 0.1);
    auto x = leaf({2, 5, 4, 2}, rng);
    auto w = leaf({2, 5, 4, 3}, rng);
    check("conv3x3", [&] { return project(conv.forward(x), w); },
          {{"x", x}, {"kernel", conv.kernel()}, {"bias", conv.bias()}});
    Conv2D strided(3, 5, 2, 2, Activation::linear, rng, f64, {2, 2, Padding::same});
    auto ws = leaf({2, 3, 2, 2}, rng);
    check("conv_strided", [&] { return project(strided.forward(x), ws); },
          {{"x", x}, {"kernel", strided.kernel()}, {"bias", strided.bias()}});
    Conv2D pw(1, 1, 2, 4, Activation::linear, rng, f64);
    auto wp = leaf({2, 5, 4, 4}, rng);
    check("conv1x1", [&] { return project(pw.forward(x), wp); },
          {{"x", x}, {"kernel", pw.kernel()}, {"bias", pw.bias()}});
  }
  {
    BatchNorm2D bn(3, f64);
    fill(bn.gamma(), rng, 0.5, 1.5);
    auto x = leaf({2, 3, 3, 3}, rng);
    auto w = leaf({2, 3, 3, 3}, rng);
    check("batchnorm_train", [&] { return project(bn.forward(x, Mode::train), w); },
          {{"x", x}, {"gamma", bn.gamma()}, {"beta", bn.beta()}});
    check("batchnorm_infer", [&] { return project(bn.forward(x, Mode::infer), w); },
          {{"x", x}, {"gamma", bn.gamma()}, {"beta", bn.beta()}});
  }
  {
    auto x = leaf({2, 7, 6, 2}, rng);
    auto w = leaf({2, 3, 2, 2}, rng);
    check("avgpool_ceil", [&] { return project(avg_pool2d(x, {3, 3, 3, 3, true}), w); }, {{"x", x}});
    // distinct values 0.01 apart so no window holds a near-tie
    auto xm = leaf({2, 7, 6, 2}, rng);
    std::vector<double> grid(static_cast<std::size_t>(xm.numel()));
    for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = 0.01 * static_cast<double>(i) - 0.8;
    std::shuffle(grid.begin(), grid.end(), rng);
    for (std::size_t i = 0; i < grid.size(); ++i) xm.mutable_buffer().set(i, grid[i]);
    auto wm = leaf({2, 4, 3, 2}, rng);
    check("maxpool", [&] { return project(max_pool2d_same(xm, 3, 2), wm); }, {{"x", xm}});
    auto wu = leaf({2, 11, 9, 2}, rng);
    check("upsample", [&] { return project(bilinear_upsample(x, 11, 9), wu); }, {{"x", x}});
    auto wg = leaf({2, 2}, rng);
    check("gap", [&] { return project(global_avg_pool(x), wg); }, {{"x", x}});
  }
  {
    Dense d(4, 3, Activation::sigmoid, rng, f64);
    auto x = leaf({5, 4}, rng);
    auto w = leaf({5, 3}, rng);
    check("dense", [&] { return project(d.forward(x), w); }, {{"x", x}, {"weight", d.weight()}, {"bias", d.bias()}});
    Dense s(4, 3, Activation::softmax, rng, f64);
    check("dense_softmax", [&] { return project(s.forward(x), w); }, {{"x", x}, {"weight", s.weight()}});
    auto wd = leaf({5, 4}, rng);
    check("dropout",
          [&] {
            std::mt19937_64 mask_rng(opt.seed);  // same mask on every call
            return project(dropout(x, 0.3, Mode::train, mask_rng), wd);
          },
          {{"x", x}});
    auto p = leaf({6, 1}, rng, 0.05, 0.95);
    auto y = Tensor::from({6, 1}, {1, 0, 0, 1, 1, 0}, f64);
    check("bce", [&] { return bce_loss(p, y); }, {{"p", p}});
    auto logits = leaf({4, 3}, rng);
    check("cross_entropy", [&] { return cross_entropy_loss(logits, {0, 2, 1, 1}); }, {{"logits", logits}});
  }
  {
    FCConv conv({4, 3, 3, 2}, rng, f64);
    TensorList list;
    conv.collect("fcconv", list);
    jitter(list, rng);
    auto x = leaf({2, 5, 5, 4}, rng);
    auto w = leaf({2, 5, 5, 4}, rng);
    check("fcconv", [&] { return project(conv.forward(x, Mode::train), w); }, trainable(list, {{"x", x}}));
  }
  {
    FCBlock block({4, 3, 3, 2}, rng, f64);
    TensorList list;
    block.collect("fcblock", list);
    jitter(list, rng);
    auto x = leaf({2, 4, 4, 4}, rng);
    auto w = leaf({2, 4, 4, 4}, rng);
    check("fcblock", [&] { return project(block.forward(x, Mode::infer), w); }, trainable(list, {{"x", x}}));
  }
  {
    IFCNetConfig cfg;
    cfg.input_channels = 2;
    cfg.stages = {{IFCStage::Kind::block, {2, 3, 3, 2}, 0}, {IFCStage::Kind::transition, {}, 4}};
    IFCNet net(cfg, rng, f64);
    TensorList list;
    net.collect("ifcnet", list);
    jitter(list, rng);
    auto x = leaf({2, 4, 4, 2}, rng);
    auto w = leaf({2, 2, 2, 4}, rng);
    check("transition", [&] { return project(net.forward(x, Mode::infer), w); }, trainable(list, {{"x", x}}));
  }
  {
    auto x = leaf({2, 3, 3, 5}, rng);
    auto w = leaf({2, 3, 3, 5}, rng);
    check("cam", [&] { return project(cam_forward({0.5}, x), w); }, {{"x", x}});
  }
  {
    BackboneConfig bc;
    bc.stem_channels = 4;
    bc.dense_layers = 2;
    bc.growth = 2;
    bc.out_channels = 4;
    MiniDenseBackbone bb(bc, rng, f64);
    TensorList list;
    bb.collect("backbone", list);
    jitter(list, rng);
    auto x = leaf({2, 8, 8, 3}, rng, 0, 1);
    auto w = leaf({2, 2, 2, 4}, rng);
    check("backbone", [&] { return project(bb.forward(x, Mode::train), w); }, trainable(list, {{"image", x}}));
  }
  {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.dtype = f64;
    cfg.seed = opt.seed;
    cfg.input_size = 16;  // 4x4 maps keep batch statistics away from degenerate
    DFCANet net(cfg);
    net.set_mode(Mode::train);
    TensorList list = net.tensors();
    jitter(list, rng);
    auto img = leaf({2, 16, 16, 3}, rng, 0, 1);
    auto y = Tensor::from({2, 1}, {1, 0}, f64);
    check("dfcanet_tiny", [&] { return bce_loss(net.forward(img).scores, y); }, trainable(list, {{"image", img}}));
  }
  return out;
}

}  // namespace dfca
