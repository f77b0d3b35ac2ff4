#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dfca/nn.hpp"

namespace dfca {

// ---------------------------------------------------------------------------
// Feature-calibration convolution

struct FCConvConfig {
  std::int64_t channels = 128;  // must be even; each branch carries channels/2
  int k1 = 3;                   // F1, F3, F4
  int k2 = 7;                   // F2, inside the pooled global head
  int pool = 11;                // average-pool window (and stride) of the global head
};

void validate(const FCConvConfig& cfg);

/// Splits channels into halves. The first half goes through a plain conv
/// (F1 + BN + ReLU). The second half is gated: a local conv F3 is modulated by
/// sigmoid(upsampled global context + input), where the global context is
/// F2 applied to an average-pooled copy, and the product goes through
/// F4 + BN + ReLU. Halves are re-concatenated.
class FCConv {
 public:
  FCConv() = default;
  FCConv(const FCConvConfig& cfg, std::mt19937_64& rng, DType dt = DType::f32);

  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, TensorList& out) const;
  std::int64_t param_count() const;
  const FCConvConfig& config() const { return cfg_; }

  Conv2D& f1() { return f1_; }
  Conv2D& f2() { return f2_; }
  Conv2D& f3() { return f3_; }
  Conv2D& f4() { return f4_; }
  BatchNorm2D& bn1() { return bn1_; }
  BatchNorm2D& bn4() { return bn4_; }

 private:
  FCConvConfig cfg_;
  Conv2D f1_, f2_, f3_, f4_;
  BatchNorm2D bn1_, bn4_;
};

/// Three FC-Convs; the first one's output is added to the third one's output.
class FCBlock {
 public:
  FCBlock() = default;
  FCBlock(const FCConvConfig& cfg, std::mt19937_64& rng, DType dt = DType::f32);

  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, TensorList& out) const;
  std::int64_t param_count() const;
  FCConv& conv(int i) { return convs_.at(static_cast<std::size_t>(i)); }
  const FCConvConfig& config() const { return convs_[0].config(); }

 private:
  std::vector<FCConv> convs_;
};

// ---------------------------------------------------------------------------
// IFCNet: a pyramid of FC-Blocks separated by pool + 1x1 channel-doubling transitions.

struct IFCStage {
  enum class Kind { block, transition };
  Kind kind = Kind::block;
  FCConvConfig block;            // when kind == block
  std::int64_t out_channels = 0; // when kind == transition
};

struct IFCNetConfig {
  std::int64_t input_channels = 128;
  std::vector<IFCStage> stages;

  /// Five blocks (128,3,7,11)x2, ->256, (256,3,5,9)x2, ->512, (512,3,3,7).
  static IFCNetConfig full();
  int block_count() const;
  std::int64_t output_channels() const;
};

class IFCNet {
 public:
  IFCNet() = default;
  IFCNet(const IFCNetConfig& cfg, std::mt19937_64& rng, DType dt = DType::f32);

  /// stage_outputs, when given, receives one tensor per stage (blocks and transitions).
  Tensor forward(const Tensor& x, Mode mode, std::vector<Tensor>* stage_outputs = nullptr);
  void collect(const std::string& prefix, TensorList& out) const;
  std::int64_t param_count() const;
  const IFCNetConfig& config() const { return cfg_; }
  FCBlock& block(int i) { return blocks_.at(static_cast<std::size_t>(i)); }

 private:
  struct Transition {
    Conv2D conv;
  };
  IFCNetConfig cfg_;
  std::vector<FCBlock> blocks_;
  std::vector<Transition> transitions_;
};

// ---------------------------------------------------------------------------
// Channel attention

struct CAMConfig {
  double beta = 1.0;
};

/// Parameter-free channel attention: U = softmax_rows(Q Q^T) over the C x (H*W)
/// reshape Q of x; returns beta * reshape(U Q) + x. attention, when given,
/// receives U as [N, C, C].
Tensor cam_forward(const CAMConfig& cfg, const Tensor& x, Tensor* attention = nullptr);

// ---------------------------------------------------------------------------
// Backbone

struct BackboneConfig {
  enum class Variant { mini_dense, external_checkpoint };
  Variant variant = Variant::mini_dense;
  std::int64_t stem_channels = 16;
  int dense_layers = 6;
  std::int64_t growth = 12;
  std::int64_t out_channels = 128;
  /// For external_checkpoint: weights under "backbone." are taken from this file at build time.
  std::string checkpoint_path;
};

/// A feature extractor that maps [N,S,S,3] to [N,S/4,S/4,out_channels].
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual Tensor forward(const Tensor& img, Mode mode) = 0;
  virtual void collect(const std::string& prefix, TensorList& out) const = 0;
  virtual std::int64_t output_channels() const = 0;
};

/// Stem (7x7/2 conv + BN + ReLU, 3x3/2 max pool), one dense block of
/// BN-ReLU-3x3 conv layers each fed the concat of all earlier outputs, and a
/// BN-ReLU-1x1 transition to out_channels.
class MiniDenseBackbone final : public Backbone {
 public:
  MiniDenseBackbone(const BackboneConfig& cfg, std::mt19937_64& rng, DType dt = DType::f32);

  Tensor forward(const Tensor& img, Mode mode) override;
  void collect(const std::string& prefix, TensorList& out) const override;
  std::int64_t output_channels() const override { return cfg_.out_channels; }
  /// Input channel count of dense layer j (1-based).
  std::int64_t layer_input_channels(int j) const;

 private:
  struct DenseLayer {
    BatchNorm2D bn;
    Conv2D conv;
  };
  BackboneConfig cfg_;
  Conv2D stem_;
  BatchNorm2D stem_bn_;
  std::vector<DenseLayer> layers_;
  BatchNorm2D transition_bn_;
  Conv2D transition_;
};

// ---------------------------------------------------------------------------
// Full model

enum class Task { pad, lens };

struct ModelConfig {
  BackboneConfig backbone;
  IFCNetConfig ifcnet = IFCNetConfig::full();
  CAMConfig cam;
  bool use_ifcnet = true;
  bool use_cam = true;
  std::int64_t head_units = 256;
  double dropout = 0.2;
  Task task = Task::pad;
  int num_classes = 3;  // lens task only
  std::int64_t input_size = 224;
  DType dtype = DType::f32;
  std::uint64_t seed = 0;
  /// Class that the PAD sigmoid unit scores as 1.
  std::string positive_class = "attack";

  /// Backbone, IFCNet and CAM as described for 224x224 inputs.
  static ModelConfig full();
  /// Narrow model for CPU runs: 64x64 inputs, 32-channel backbone, two FC-Blocks.
  static ModelConfig desk();
  /// Smallest wiring that exercises every component; used for gradient checks.
  static ModelConfig tiny();
};

/// Names accepted by the feature-map hooks.
const std::vector<std::string>& tap_names();

class DFCANet {
 public:
  explicit DFCANet(ModelConfig cfg);

  void set_mode(Mode m) { mode_ = m; }
  std::optional<Mode> mode() const { return mode_; }

  struct Output {
    Tensor logits;  // [N,1] for PAD, [N,K] for lens detection
    Tensor scores;  // sigmoid / softmax of logits
    std::map<std::string, Tensor> taps;
  };

  /// img [N,S,S,3]. Taps requested by name are captured along the way.
  Output forward(const Tensor& img, const std::set<std::string>& taps = {});

  /// All named tensors: trainable parameters and BN running statistics, in a fixed order.
  TensorList tensors() const;
  std::vector<Tensor> parameters() const;
  std::int64_t param_count() const { return count_trainable(tensors()); }
  const ModelConfig& config() const { return cfg_; }

  Backbone& backbone() { return *backbone_; }
  IFCNet& ifcnet() { return ifcnet_; }

 private:
  ModelConfig cfg_;
  std::optional<Mode> mode_;
  std::mt19937_64 rng_;
  std::unique_ptr<Backbone> backbone_;
  IFCNet ifcnet_;
  Dense fc1_, fc2_, out_;
};

}  // namespace dfca
