#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfca/checkpoint.hpp"
#include "dfca/data.hpp"
#include "dfca/metrics.hpp"
#include "dfca/model.hpp"

namespace dfca {

/// Raised when a training loss stops being finite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 200;
  int batch_size = 32;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  bool augment = true;
  AugmentConfig augmentation;
};

void validate(const TrainConfig& cfg);

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double val_acc = 0;  // %
};

struct TrainResult {
  std::vector<EpochStats> history;
  int best_epoch = 0;  // 0 when no epoch ran
  TensorEntries best;  // weights and running statistics of best_epoch
};

/// Higher validation accuracy wins; equal accuracy goes to the lower validation loss.
bool better_epoch(const EpochStats& a, const EpochStats& b);

/// Best epoch under better_epoch, earliest on a full tie; 0 for an empty history.
int select_best_epoch(const std::vector<EpochStats>& history);

using EpochCallback = std::function<void(const EpochStats&)>;

/// Adam on shuffled minibatches (BCE for PAD, cross-entropy for lens). The
/// model ends holding the weights of the best validation epoch.
TrainResult train(DFCANet& model, const LabeledSet& train_set, const LabeledSet& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// Transfer-loads ckpt, requiring every tensor outside "head." to come across, then trains.
TrainResult finetune(DFCANet& model, const TensorEntries& ckpt, const LabeledSet& train_set,
                     const LabeledSet& val_set, const TrainConfig& cfg, LoadReport* report = nullptr,
                     const EpochCallback& on_epoch = {});

/// Infer-mode scores: [N,1] for PAD, [N,K] for lens detection.
Tensor predict(DFCANet& model, const Tensor& images, int batch_size = 32);

/// Mean loss and accuracy (%) over a set in infer mode.
std::pair<double, double> loss_and_accuracy(DFCANet& model, const LabeledSet& set, int batch_size = 32);

MetricsReport evaluate(DFCANet& model, const LabeledSet& test_set, double threshold = 0.5);

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history);

// ---------------------------------------------------------------------------
// Protocol runner

struct ProtocolRun {
  ProtocolSpec spec;
  std::vector<SampleRecord> records;
  ModelConfig model;
  TrainConfig train;
  double threshold = 0.5;
  std::string out_dir;  // report.txt, best.ckpt, history.csv
  std::function<void(const std::string&)> log;
};

struct ProtocolOutcome {
  MetricsReport metrics;
  TrainResult training;
  SplitResult splits;
  std::size_t train_rows = 0, val_rows = 0;
  std::int64_t param_count = 0;
  LoadReport transfer;
  std::vector<std::pair<std::string, std::string>> report;  // key=value lines in file order
};

/// Lens detection swaps the PAD unit for a three-way softmax head.
ModelConfig model_for_protocol(ModelConfig model, ProtocolKind kind);
TaskLabels labels_for_protocol(ProtocolKind kind);

ProtocolOutcome run_protocol(const ProtocolRun& run);

/// key=value lines followed by a "[det]" block of threshold,apcer,npcer rows.
void write_report(const std::string& path, const std::vector<std::pair<std::string, std::string>>& entries,
                  const std::vector<DetPoint>& det);

struct ParsedReport {
  std::map<std::string, std::string> values;
  std::vector<DetPoint> det;
};
ParsedReport read_report(const std::string& path);

/// Report lines describing an evaluation.
std::vector<std::pair<std::string, std::string>> metric_entries(const MetricsReport& m);

}  // namespace dfca
