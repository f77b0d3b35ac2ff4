#include "dfca/model.hpp"

#include <algorithm>
#include <stdexcept>

#include "dfca/checkpoint.hpp"

namespace dfca {

namespace {
void require_nhwc(const Tensor& x, std::int64_t channels, const char* who) {
  if (x.rank() != 4 || x.dim(3) != channels)
    throw std::invalid_argument(std::string(who) + ": expected [N,H,W," + std::to_string(channels) + "] input, got " +
                                shape_str(x.shape()));
}
}  // namespace

void validate(const FCConvConfig& cfg) {
  if (cfg.channels < 2 || cfg.channels % 2 != 0)
    throw std::invalid_argument("FC-Conv channel count must be even, got " + std::to_string(cfg.channels));
  if (cfg.k1 < 1 || cfg.k1 % 2 == 0 || cfg.k2 < 1 || cfg.k2 % 2 == 0)
    throw std::invalid_argument("FC-Conv kernel sizes must be odd");
  if (cfg.pool < 1) throw std::invalid_argument("FC-Conv pool window must be >= 1");
}

FCConv::FCConv(const FCConvConfig& cfg, std::mt19937_64& rng, DType dt) : cfg_(cfg) {
  validate(cfg);
  const std::int64_t half = cfg.channels / 2;
  f1_ = Conv2D(cfg.k1, cfg.k1, half, half, Activation::linear, rng, dt);
  f2_ = Conv2D(cfg.k2, cfg.k2, half, half, Activation::relu, rng, dt);
  f3_ = Conv2D(cfg.k1, cfg.k1, half, half, Activation::relu, rng, dt);
  f4_ = Conv2D(cfg.k1, cfg.k1, half, half, Activation::linear, rng, dt);
  bn1_ = BatchNorm2D(half, dt);
  bn4_ = BatchNorm2D(half, dt);
}

Tensor FCConv::forward(const Tensor& x, Mode mode) {
  require_nhwc(x, cfg_.channels, "FC-Conv");
  const std::int64_t h = x.dim(1), w = x.dim(2);
  if (cfg_.pool > h || cfg_.pool > w)
    throw std::invalid_argument("FC-Conv: pool window " + std::to_string(cfg_.pool) + " exceeds spatial extent " +
                                shape_str(x.shape()));
  auto [i1, i2] = channel_split(x);
  Tensor first = relu(bn1_.forward(f1_.forward(i1), mode));

  Tensor local = f3_.forward(i2);
  Tensor pooled = avg_pool2d(i2, {cfg_.pool, cfg_.pool, cfg_.pool, cfg_.pool, true});
  Tensor global = bilinear_upsample(f2_.forward(pooled), h, w);
  Tensor gate = sigmoid(add(global, i2));
  Tensor second = relu(bn4_.forward(f4_.forward(mul(local, gate)), mode));
  return channel_concat(first, second);
}

void FCConv::collect(const std::string& prefix, TensorList& out) const {
  f1_.collect(prefix + ".f1", out);
  bn1_.collect(prefix + ".bn1", out);
  f2_.collect(prefix + ".f2", out);
  f3_.collect(prefix + ".f3", out);
  f4_.collect(prefix + ".f4", out);
  bn4_.collect(prefix + ".bn4", out);
}

std::int64_t FCConv::param_count() const {
  return f1_.param_count() + f2_.param_count() + f3_.param_count() + f4_.param_count() + bn1_.param_count() +
         bn4_.param_count();
}

FCBlock::FCBlock(const FCConvConfig& cfg, std::mt19937_64& rng, DType dt) {
  for (int i = 0; i < 3; ++i) convs_.emplace_back(cfg, rng, dt);
}

Tensor FCBlock::forward(const Tensor& x, Mode mode) {
  Tensor first = convs_[0].forward(x, mode);
  Tensor y = convs_[2].forward(convs_[1].forward(first, mode), mode);
  if (y.shape() != first.shape() || first.shape() != x.shape())
    throw std::logic_error("FC-Block: shape drift " + shape_str(x.shape()) + " -> " + shape_str(y.shape()));
  return add(y, first);
}

void FCBlock::collect(const std::string& prefix, TensorList& out) const {
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(prefix + ".conv" + std::to_string(i + 1), out);
}

std::int64_t FCBlock::param_count() const {
  std::int64_t n = 0;
  for (const auto& c : convs_) n += c.param_count();
  return n;
}

IFCNetConfig IFCNetConfig::full() {
  IFCNetConfig cfg;
  cfg.input_channels = 128;
  auto block = [](std::int64_t c, int k1, int k2, int pool) {
    return IFCStage{IFCStage::Kind::block, FCConvConfig{c, k1, k2, pool}, 0};
  };
  auto transition = [](std::int64_t out) { return IFCStage{IFCStage::Kind::transition, {}, out}; };
  cfg.stages = {block(128, 3, 7, 11), block(128, 3, 7, 11), transition(256), block(256, 3, 5, 9),
                block(256, 3, 5, 9),  transition(512),      block(512, 3, 3, 7)};
  return cfg;
}

int IFCNetConfig::block_count() const {
  int n = 0;
  for (const auto& s : stages) n += s.kind == IFCStage::Kind::block;
  return n;
}

std::int64_t IFCNetConfig::output_channels() const {
  std::int64_t c = input_channels;
  for (const auto& s : stages) c = s.kind == IFCStage::Kind::block ? s.block.channels : s.out_channels;
  return c;
}

IFCNet::IFCNet(const IFCNetConfig& cfg, std::mt19937_64& rng, DType dt) : cfg_(cfg) {
  std::int64_t c = cfg.input_channels;
  for (const auto& s : cfg.stages) {
    if (s.kind == IFCStage::Kind::block) {
      if (s.block.channels != c)
        throw std::invalid_argument("IFCNet: block expects " + std::to_string(s.block.channels) +
                                    " channels but receives " + std::to_string(c));
      blocks_.emplace_back(s.block, rng, dt);
    } else {
      transitions_.push_back({Conv2D(1, 1, c, s.out_channels, Activation::linear, rng, dt)});
      c = s.out_channels;
    }
  }
}

Tensor IFCNet::forward(const Tensor& x, Mode mode, std::vector<Tensor>* stage_outputs) {
  require_nhwc(x, cfg_.input_channels, "IFCNet");
  Tensor y = x;
  std::size_t b = 0, t = 0;
  for (const auto& s : cfg_.stages) {
    if (s.kind == IFCStage::Kind::block) {
      y = blocks_[b++].forward(y, mode);
    } else {
      y = transitions_[t++].conv.forward(avg_pool2d(y, {2, 2, 2, 2, false}));
    }
    if (stage_outputs) stage_outputs->push_back(y);
  }
  return y;
}

void IFCNet::collect(const std::string& prefix, TensorList& out) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".block" + std::to_string(i + 1), out);
  for (std::size_t i = 0; i < transitions_.size(); ++i)
    transitions_[i].conv.collect(prefix + ".transition" + std::to_string(i + 1), out);
}

std::int64_t IFCNet::param_count() const {
  std::int64_t n = 0;
  for (const auto& b : blocks_) n += b.param_count();
  for (const auto& t : transitions_) n += t.conv.param_count();
  return n;
}

Tensor cam_forward(const CAMConfig& cfg, const Tensor& x, Tensor* attention) {
  if (!(cfg.beta >= 0.0 && cfg.beta <= 1.0))
    throw std::invalid_argument("CAM: beta must lie in [0,1], got " + std::to_string(cfg.beta));
  if (x.rank() != 4) throw std::invalid_argument("CAM: expected [N,H,W,C], got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  Tensor pixels = reshape(x, {n, hw, c});       // per sample: (H*W) x C
  Tensor q = transpose(pixels);                 // C x (H*W)
  Tensor u = softmax_rows(matmul(q, pixels));   // C x C, row i = weights over source channels j
  if (attention) *attention = u.detach();
  Tensor refined = reshape(transpose(matmul(u, q)), x.shape());
  return add(scale(refined, cfg.beta), x);
}

MiniDenseBackbone::MiniDenseBackbone(const BackboneConfig& cfg, std::mt19937_64& rng, DType dt) : cfg_(cfg) {
  if (cfg.dense_layers < 0 || cfg.growth < 1 || cfg.stem_channels < 1 || cfg.out_channels < 1)
    throw std::invalid_argument("backbone: invalid dense-block configuration");
  stem_ = Conv2D(7, 7, 3, cfg.stem_channels, Activation::linear, rng, dt, {2, 2, Padding::same});
  stem_bn_ = BatchNorm2D(cfg.stem_channels, dt);
  for (int j = 1; j <= cfg.dense_layers; ++j) {
    const std::int64_t cin = layer_input_channels(j);
    layers_.push_back({BatchNorm2D(cin, dt), Conv2D(3, 3, cin, cfg.growth, Activation::linear, rng, dt)});
  }
  const std::int64_t concat = layer_input_channels(cfg.dense_layers + 1);
  transition_bn_ = BatchNorm2D(concat, dt);
  transition_ = Conv2D(1, 1, concat, cfg.out_channels, Activation::linear, rng, dt);
}

std::int64_t MiniDenseBackbone::layer_input_channels(int j) const { return cfg_.stem_channels + (j - 1) * cfg_.growth; }

Tensor MiniDenseBackbone::forward(const Tensor& img, Mode mode) {
  require_nhwc(img, 3, "backbone");
  if (img.dim(1) % 4 != 0 || img.dim(2) % 4 != 0)
    throw std::invalid_argument("backbone: input extent must be divisible by 4, got " + shape_str(img.shape()));
  Tensor x = relu(stem_bn_.forward(stem_.forward(img), mode));
  x = max_pool2d_same(x, 3, 2);
  for (auto& layer : layers_) {
    Tensor fresh = layer.conv.forward(relu(layer.bn.forward(x, mode)));
    x = channel_concat(x, fresh);
  }
  return transition_.forward(relu(transition_bn_.forward(x, mode)));
}

void MiniDenseBackbone::collect(const std::string& prefix, TensorList& out) const {
  stem_.collect(prefix + ".stem", out);
  stem_bn_.collect(prefix + ".stem_bn", out);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = prefix + ".dense" + std::to_string(i + 1);
    layers_[i].bn.collect(p + ".bn", out);
    layers_[i].conv.collect(p + ".conv", out);
  }
  transition_bn_.collect(prefix + ".transition_bn", out);
  transition_.collect(prefix + ".transition", out);
}

ModelConfig ModelConfig::full() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig cfg;
  cfg.input_size = 64;
  cfg.backbone.stem_channels = 16;
  cfg.backbone.dense_layers = 4;
  cfg.backbone.growth = 8;
  cfg.backbone.out_channels = 32;
  cfg.ifcnet.input_channels = 32;
  cfg.ifcnet.stages = {{IFCStage::Kind::block, {32, 3, 5, 5}, 0}, {IFCStage::Kind::block, {32, 3, 5, 5}, 0}};
  cfg.head_units = 64;
  return cfg;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig cfg;
  cfg.input_size = 8;
  cfg.backbone.stem_channels = 4;
  cfg.backbone.dense_layers = 2;
  cfg.backbone.growth = 2;
  cfg.backbone.out_channels = 4;
  cfg.ifcnet.input_channels = 4;
  cfg.ifcnet.stages = {{IFCStage::Kind::block, {4, 3, 3, 2}, 0}};
  cfg.head_units = 4;
  cfg.dropout = 0.0;
  return cfg;
}

const std::vector<std::string>& tap_names() {
  static const std::vector<std::string> names{"backbone", "fcblock1", "fcblock2", "fcblock3", "fcblock4",
                                              "fcblock5", "cam",      "embedding"};
  return names;
}

DFCANet::DFCANet(ModelConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed) {
  if (cfg_.input_size % 4 != 0)
    throw std::invalid_argument("model: input size must be divisible by 4, got " + std::to_string(cfg_.input_size));
  if (cfg_.task == Task::lens && cfg_.num_classes < 2)
    throw std::invalid_argument("model: lens task needs at least 2 classes");
  std::mt19937_64 init_rng(cfg_.seed);
  backbone_ = std::make_unique<MiniDenseBackbone>(cfg_.backbone, init_rng, cfg_.dtype);
  std::int64_t c = backbone_->output_channels();
  if (cfg_.use_ifcnet) {
    if (cfg_.ifcnet.input_channels != c)
      throw std::invalid_argument("model: IFCNet expects " + std::to_string(cfg_.ifcnet.input_channels) +
                                  " channels, backbone produces " + std::to_string(c));
    ifcnet_ = IFCNet(cfg_.ifcnet, init_rng, cfg_.dtype);
    c = cfg_.ifcnet.output_channels();
  }
  const std::int64_t outputs = cfg_.task == Task::pad ? 1 : cfg_.num_classes;
  fc1_ = Dense(c, cfg_.head_units, Activation::relu, init_rng, cfg_.dtype);
  fc2_ = Dense(cfg_.head_units, cfg_.head_units, Activation::relu, init_rng, cfg_.dtype);
  out_ = Dense(cfg_.head_units, outputs, Activation::linear, init_rng, cfg_.dtype);

  if (cfg_.backbone.variant == BackboneConfig::Variant::external_checkpoint) {
    if (cfg_.backbone.checkpoint_path.empty())
      throw std::invalid_argument("model: external_checkpoint backbone needs a checkpoint path");
    auto report = load_into(*this, read_checkpoint(cfg_.backbone.checkpoint_path), LoadMode::transfer, "backbone.");
    for (const auto& name : report.skipped)
      if (name.rfind("backbone.", 0) == 0)
        throw std::runtime_error("model: backbone checkpoint lacks a compatible '" + name + "'");
  }
}

DFCANet::Output DFCANet::forward(const Tensor& img, const std::set<std::string>& taps) {
  if (!mode_) throw std::logic_error("model: forward called before set_mode(train|infer)");
  for (const auto& t : taps)
    if (std::find(tap_names().begin(), tap_names().end(), t) == tap_names().end())
      throw std::invalid_argument("model: unknown tap '" + t + "'");
  const Mode mode = *mode_;
  Output out;
  auto keep = [&](const std::string& name, const Tensor& t) {
    if (taps.count(name)) out.taps[name] = t;
  };

  Tensor x = backbone_->forward(img, mode);
  keep("backbone", x);
  if (cfg_.use_ifcnet) {
    std::vector<Tensor> stages;
    x = ifcnet_.forward(x, mode, &stages);
    int block = 0;
    for (std::size_t i = 0; i < stages.size(); ++i)
      if (cfg_.ifcnet.stages[i].kind == IFCStage::Kind::block) keep("fcblock" + std::to_string(++block), stages[i]);
  }
  if (cfg_.use_cam) {
    x = cam_forward(cfg_.cam, x);
    keep("cam", x);
  }
  Tensor h = fc1_.forward(global_avg_pool(x));
  h = dropout(h, cfg_.dropout, mode, rng_);
  h = fc2_.forward(h);
  keep("embedding", h);
  out.logits = out_.forward(h);
  out.scores = cfg_.task == Task::pad ? sigmoid(out.logits) : softmax_rows(out.logits);
  return out;
}

TensorList DFCANet::tensors() const {
  TensorList out;
  backbone_->collect("backbone", out);
  if (cfg_.use_ifcnet) ifcnet_.collect("ifcnet", out);
  fc1_.collect("head.fc1", out);
  fc2_.collect("head.fc2", out);
  out_.collect("head.out", out);
  return out;
}

std::vector<Tensor> DFCANet::parameters() const {
  std::vector<Tensor> params;
  for (auto& e : tensors())
    if (e.trainable) params.push_back(e.tensor);
  return params;
}

}  // namespace dfca
