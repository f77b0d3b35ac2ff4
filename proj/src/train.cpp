#include "dfca/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>

#include "dfca/autograd.hpp"

namespace dfca {

namespace fs = std::filesystem;

void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (cfg.batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (!(cfg.lr >= 0)) throw std::invalid_argument("learning rate must be >= 0");
  if (!(cfg.val_fraction > 0 && cfg.val_fraction < 1)) throw std::invalid_argument("validation fraction must be in (0,1)");
}

bool better_epoch(const EpochStats& a, const EpochStats& b) {
  if (a.val_acc != b.val_acc) return a.val_acc > b.val_acc;
  return a.val_loss < b.val_loss;  // small val sets tie on accuracy often
}

int select_best_epoch(const std::vector<EpochStats>& history) {
  const EpochStats* best = nullptr;
  for (const auto& e : history)
    if (!best || better_epoch(e, *best)) best = &e;
  return best ? best->epoch : 0;
}

namespace {

bool is_pad(const DFCANet& m) { return m.config().task == Task::pad; }

Tensor batch_loss(const DFCANet& model, const DFCANet::Output& out, const std::vector<int>& labels) {
  if (is_pad(model)) {
    std::vector<double> y(labels.begin(), labels.end());
    return bce_loss(out.scores, Tensor::from({static_cast<std::int64_t>(y.size()), 1}, y, out.scores.dtype()));
  }
  return cross_entropy_loss(out.logits, labels);
}

int count_correct(const DFCANet& model, const Tensor& scores, const std::vector<int>& labels) {
  const auto v = scores.to_vector();
  int correct = 0;
  if (is_pad(model)) {
    for (std::size_t i = 0; i < labels.size(); ++i) correct += (v[i] >= 0.5 ? 1 : 0) == labels[i];
  } else {
    const auto k = static_cast<std::size_t>(scores.dim(1));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      auto row = v.begin() + static_cast<std::ptrdiff_t>(i * k);
      correct += static_cast<int>(std::max_element(row, row + static_cast<std::ptrdiff_t>(k)) - row) == labels[i];
    }
  }
  return correct;
}

TensorEntries snapshot(const DFCANet& model) {
  TensorEntries out;
  for (const auto& e : model.tensors()) out.emplace_back(e.name, e.tensor.detach());
  return out;
}

void check_set(const LabeledSet& s, const char* what) {
  if (s.size() == 0) throw std::invalid_argument(std::string(what) + " set is empty");
}

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return idx;
}

}  // namespace

Tensor predict(DFCANet& model, const Tensor& images, int batch_size) {
  NoGradGuard ng;
  model.set_mode(Mode::infer);
  const auto n = static_cast<std::size_t>(images.dim(0));
  LabeledSet view{images, std::vector<int>(n, 0), {}};
  std::vector<double> all;
  std::int64_t k = 1;
  for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(batch_size)) {
    Tensor x = gather_images(view, range(b, std::min(n, b + static_cast<std::size_t>(batch_size))));
    auto s = model.forward(x.to(model.config().dtype)).scores;
    k = s.dim(1);
    auto v = s.to_vector();
    all.insert(all.end(), v.begin(), v.end());
  }
  return Tensor::from({static_cast<std::int64_t>(n), k}, all, DType::f64);
}

std::pair<double, double> loss_and_accuracy(DFCANet& model, const LabeledSet& set, int batch_size) {
  NoGradGuard ng;
  model.set_mode(Mode::infer);
  double loss = 0;
  int correct = 0;
  for (std::size_t b = 0; b < set.size(); b += static_cast<std::size_t>(batch_size)) {
    auto idx = range(b, std::min(set.size(), b + static_cast<std::size_t>(batch_size)));
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(set.labels[i]);
    auto out = model.forward(gather_images(set, idx).to(model.config().dtype));
    loss += batch_loss(model, out, labels).item() * static_cast<double>(idx.size());
    correct += count_correct(model, out.scores, labels);
  }
  const auto n = static_cast<double>(set.size());
  return {loss / n, 100.0 * correct / n};
}

TrainResult train(DFCANet& model, const LabeledSet& train_set, const LabeledSet& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  validate(cfg);
  check_set(train_set, "training");
  check_set(val_set, "validation");
  std::vector<Tensor> params = model.parameters();
  AdamState adam;
  const AdamConfig adam_cfg{cfg.lr, cfg.beta1, cfg.beta2, 1e-7};
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  TrainResult result;
  std::optional<EpochStats> best_stats;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    model.set_mode(Mode::train);
    const auto order = epoch_order(train_set.size(), cfg.seed, epoch);
    double loss_sum = 0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + bs)));
      Tensor x = gather_images(train_set, idx);
      if (cfg.augment) {
        const auto per = static_cast<std::size_t>(x.dim(1) * x.dim(2) * x.dim(3));
        auto dst = x.mutable_data<float>();
        for (std::size_t i = 0; i < idx.size(); ++i) {
          Tensor one = Tensor::from_buffer({x.dim(1), x.dim(2), x.dim(3)}, Buffer(DType::f32, per));
          auto src = x.data<float>().subspan(i * per, per);
          std::copy(src.begin(), src.end(), one.mutable_data<float>().begin());
          const auto seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch) * 1000003u + idx[i]);
          const Tensor warped = augment(one, cfg.augmentation, seed);
          std::copy(warped.data<float>().begin(), warped.data<float>().end(), dst.begin() + static_cast<std::ptrdiff_t>(i * per));
        }
      }
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train_set.labels[i]);
      auto out = model.forward(x.to(model.config().dtype));
      Tensor loss = batch_loss(model, out, labels);
      const double lv = loss.item();
      if (!std::isfinite(lv))
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b / bs + 1));
      backward(loss);
      if (cfg.lr > 0) {
        std::vector<Tensor> grads;
        for (auto& p : params) grads.push_back(p.grad());
        adam_step(params, grads, adam, adam_cfg);
      }
      for (auto& p : params) p.zero_grad();
      loss_sum += lv * static_cast<double>(idx.size());
    }
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_sum / static_cast<double>(train_set.size());
    std::tie(st.val_loss, st.val_acc) = loss_and_accuracy(model, val_set, cfg.batch_size);
    if (!std::isfinite(st.val_loss)) throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    result.history.push_back(st);
    if (!best_stats || better_epoch(st, *best_stats)) {
      best_stats = st;
      result.best_epoch = epoch;
      result.best = snapshot(model);
    }
    if (on_epoch) on_epoch(st);
  }
  if (result.best_epoch == 0) {
    result.best = snapshot(model);
  } else {
    load_into(model, result.best, LoadMode::strict);
  }
  return result;
}

TrainResult finetune(DFCANet& model, const TensorEntries& ckpt, const LabeledSet& train_set,
                     const LabeledSet& val_set, const TrainConfig& cfg, LoadReport* report,
                     const EpochCallback& on_epoch) {
  LoadReport r = load_into(model, ckpt, LoadMode::transfer);
  for (const auto& name : r.skipped)
    if (name.rfind("head.", 0) != 0)
      throw std::runtime_error("checkpoint is incompatible with the model: '" + name + "' could not be transferred");
  if (report) *report = r;
  return train(model, train_set, val_set, cfg, on_epoch);
}

MetricsReport evaluate(DFCANet& model, const LabeledSet& test_set, double threshold) {
  check_set(test_set, "test");
  Tensor scores = predict(model, test_set.images);
  if (is_pad(model)) return pad_metrics(scores.to_vector(), test_set.labels, threshold);
  auto m = multiclass_metrics(scores.to_vector(), test_set.labels, static_cast<int>(scores.dim(1)));
  m.threshold = threshold;
  return m;
}

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "epoch,train_loss,val_loss,val_acc\n";
  char line[160];
  for (const auto& e : history) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.4f\n", e.epoch, e.train_loss, e.val_loss, e.val_acc);
    out << line;
  }
}

// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, std::string>> metric_entries(const MetricsReport& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", m.threshold);
  std::vector<std::pair<std::string, std::string>> e{{"threshold", buf},
                                                     {"test_total", std::to_string(m.n_total)},
                                                     {"test_attack", std::to_string(m.n_attack)},
                                                     {"test_bonafide", std::to_string(m.n_bonafide)},
                                                     {"aa", format_metric(m.aa)},
                                                     {"apcer", format_metric(m.apcer)},
                                                     {"npcer", format_metric(m.npcer)},
                                                     {"acer", format_metric(m.acer)},
                                                     {"eer", format_metric(m.eer)}};
  std::string conf;
  for (std::size_t r = 0; r < m.confusion.size(); ++r) {
    if (r) conf += ';';
    for (std::size_t c = 0; c < m.confusion[r].size(); ++c) conf += (c ? " " : "") + std::to_string(m.confusion[r][c]);
  }
  e.emplace_back("confusion", conf);
  return e;
}

void write_report(const std::string& path, const std::vector<std::pair<std::string, std::string>>& entries,
                  const std::vector<DetPoint>& det) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  for (const auto& [k, v] : entries) out << k << '=' << v << '\n';
  out << "[det]\nthreshold,apcer,npcer\n";
  char line[128];
  for (const auto& p : det) {
    std::snprintf(line, sizeof line, "%.17g,%.6f,%.6f\n", p.threshold, p.apcer, p.npcer);
    out << line;
  }
}

ParsedReport read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open report '" + path + "'");
  ParsedReport r;
  std::string line;
  bool det = false;
  while (std::getline(in, line)) {
    if (line == "[det]") {
      det = true;
      std::getline(in, line);  // column header
      continue;
    }
    if (det) {
      DetPoint p{};
      if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &p.threshold, &p.apcer, &p.npcer) == 3) r.det.push_back(p);
    } else if (auto eq = line.find('='); eq != std::string::npos) {
      r.values[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  return r;
}

namespace {

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& e : v) s += (s.empty() ? "" : ",") + e;
  return s.empty() ? "all" : s;
}

std::string count_by(const std::vector<SampleRecord>& rows, bool by_sensor) {
  std::map<std::string, int> counts;
  for (const auto& r : rows) ++counts[by_sensor ? r.sensor : label_name(r.label)];
  std::string s;
  for (const auto& [k, n] : counts) s += (s.empty() ? "" : ",") + k + ":" + std::to_string(n);
  return s;
}

}  // namespace

ModelConfig model_for_protocol(ModelConfig model, ProtocolKind kind) {
  if (kind == ProtocolKind::lens_detection) {
    model.task = Task::lens;
    model.num_classes = static_cast<int>(lens_task_classes().size());
  } else {
    model.task = Task::pad;
  }
  return model;
}

TaskLabels labels_for_protocol(ProtocolKind kind) {
  return kind == ProtocolKind::lens_detection ? TaskLabels::lens : TaskLabels::pad;
}

ProtocolOutcome run_protocol(const ProtocolRun& run) {
  auto log = [&](const std::string& m) {
    if (run.log) run.log(m);
  };
  ProtocolOutcome out;
  out.splits = make_protocol_splits(run.records, run.spec);

  const ModelConfig mcfg = model_for_protocol(run.model, run.spec.kind);
  const bool lens = mcfg.task == Task::lens;
  const TaskLabels labels = labels_for_protocol(run.spec.kind);

  auto holdout = stratified_holdout(out.splits.train, 1.0 - run.train.val_fraction, mix_seed(run.spec.seed, 0x7a1));
  out.train_rows = holdout.train.size();
  out.val_rows = holdout.test.size();
  log("splits: train " + std::to_string(out.train_rows) + ", val " + std::to_string(out.val_rows) + ", test " +
      std::to_string(out.splits.test.size()));
  log("labels: train " + count_by(out.splits.train, false) + ", test " + count_by(out.splits.test, false));
  const int size = static_cast<int>(mcfg.input_size);
  LabeledSet train_set = load_set(holdout.train, labels, size);
  LabeledSet val_set = load_set(holdout.test, labels, size);
  LabeledSet test_set = load_set(out.splits.test, labels, size);

  DFCANet model(mcfg);
  out.param_count = model.param_count();
  log("model: ifcnet=" + std::string(mcfg.use_ifcnet ? "on" : "off") + " cam=" + (mcfg.use_cam ? "on" : "off") +
      " params=" + std::to_string(out.param_count));
  auto on_epoch = [&](const EpochStats& e) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %d train_loss %.5f val_loss %.5f val_acc %.2f", e.epoch, e.train_loss,
                  e.val_loss, e.val_acc);
    log(buf);
  };
  if (run.spec.kind == ProtocolKind::incremental) {
    out.training = finetune(model, read_checkpoint(run.spec.checkpoint), train_set, val_set, run.train,
                            &out.transfer, on_epoch);
  } else {
    out.training = train(model, train_set, val_set, run.train, on_epoch);
  }
  out.metrics = evaluate(model, test_set, run.threshold);

  auto& rep = out.report;
  rep = {{"protocol", protocol_name(run.spec.kind)},
         {"train_sensors", join(run.spec.train_sensors)},
         {"test_sensors", join(run.spec.test_sensors)},
         {"datasets", join(run.spec.datasets)},
         {"soft_lens_as", label_name(run.spec.policy.soft_lens_as)},
         {"positive_class", lens ? "none" : mcfg.positive_class},
         {"task", lens ? "lens" : "pad"},
         {"ifcnet", mcfg.use_ifcnet ? "on" : "off"},
         {"cam", mcfg.use_cam ? "on" : "off"},
         {"param_count", std::to_string(out.param_count)},
         {"train_rows", std::to_string(out.train_rows)},
         {"val_rows", std::to_string(out.val_rows)},
         {"test_rows", std::to_string(out.splits.test.size())},
         {"train_rows_by_sensor", count_by(out.splits.train, true)},
         {"test_rows_by_sensor", count_by(out.splits.test, true)},
         {"train_rows_by_label", count_by(out.splits.train, false)},
         {"test_rows_by_label", count_by(out.splits.test, false)},
         {"epochs", std::to_string(run.train.epochs)},
         {"best_epoch", std::to_string(out.training.best_epoch)}};
  if (run.spec.kind == ProtocolKind::incremental) {
    rep.emplace_back("transfer_loaded", std::to_string(out.transfer.loaded.size()));
    rep.emplace_back("transfer_skipped", std::to_string(out.transfer.skipped.size()));
    std::string names;
    for (const auto& s : out.transfer.skipped) names += (names.empty() ? "" : ",") + s;
    rep.emplace_back("transfer_reinitialized", names.empty() ? "none" : names);
  }
  for (auto& e : metric_entries(out.metrics)) rep.push_back(std::move(e));

  if (!run.out_dir.empty()) {
    fs::create_directories(run.out_dir);
    save_model(model, (fs::path(run.out_dir) / "best.ckpt").string());
    write_history_csv((fs::path(run.out_dir) / "history.csv").string(), out.training.history);
    write_report((fs::path(run.out_dir) / "report.txt").string(), rep, out.metrics.det);
  }
  return out;
}

}  // namespace dfca
