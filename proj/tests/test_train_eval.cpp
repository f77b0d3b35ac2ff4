#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <set>

#include "dfca/train.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dfca;
using namespace dfca::oracle;
using dfca::testing::TempDir;
namespace fs = std::filesystem;

namespace {

LabeledSet constant_images(const std::vector<double>& levels, const std::vector<int>& labels, int size) {
  LabeledSet s;
  const auto n = static_cast<std::int64_t>(levels.size());
  std::vector<double> px;
  for (double l : levels) px.insert(px.end(), static_cast<std::size_t>(size * size * 3), l);
  s.images = Tensor::from({n, size, size, 3}, px);
  s.labels = labels;
  s.sensors.assign(levels.size(), "toy");
  return s;
}

LabeledSet noisy_set(std::size_t n, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> levels;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    labels.push_back(static_cast<int>(i % 2));
    levels.push_back(labels.back() ? 0.7 : 0.3);
  }
  LabeledSet s = constant_images(levels, labels, size);
  std::normal_distribution<double> noise(0, 0.05);
  auto& b = s.images.mutable_buffer();
  for (std::size_t i = 0; i < b.size(); ++i) b.set(i, b.get(i) + noise(rng));
  return s;
}

std::vector<std::vector<double>> trainable_values(const DFCANet& m) {
  std::vector<std::vector<double>> v;
  for (const auto& e : m.tensors())
    if (e.trainable) v.push_back(e.tensor.to_vector());
  return v;
}

std::vector<std::vector<double>> all_values(const DFCANet& m) {
  std::vector<std::vector<double>> v;
  for (const auto& e : m.tensors()) v.push_back(e.tensor.to_vector());
  return v;
}

std::string bytes_of(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TrainConfig quick(int epochs, double lr = 1e-2) {
  TrainConfig c;
  c.epochs = epochs;
  c.lr = lr;
  c.batch_size = 4;
  c.augment = false;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("ACER reporter rounds the mean of the rounded pair") {
  CHECK(acer_from(2.03, 0.31) == 1.17);
  CHECK(acer_from(13.98, 0.87) == 7.42);
  // exact halves go down
  CHECK(acer_from(1.52, 0.87) == 1.19);
  CHECK(acer_from(0.31, 1.04) == 0.67);
  CHECK(acer_from(0.41, 0.72) == 0.56);
  CHECK(acer_from(0.0, 0.01) == 0.0);
  CHECK(acer_from(100.0, 100.0) == 100.0);
  CHECK(round2(7.425) == 7.42);
  CHECK(round2(1.005) == 1.0);  // 1.005 is stored below the half
  CHECK(format_metric(std::nullopt) == "undefined");
  CHECK(format_metric(3.14159) == "3.14");
}

TEST_CASE("perfect classifier and single-class sets") {
  const std::vector<double> s{0.1, 0.2, 0.9, 0.8};
  const std::vector<int> y{0, 0, 1, 1};
  auto m = pad_metrics(s, y);
  CHECK(m.aa == 100.0);
  CHECK(*m.apcer == 0.0);
  CHECK(*m.npcer == 0.0);
  CHECK(*m.acer == 0.0);
  CHECK(*m.eer == 0.0);
  CHECK(m.confusion == Confusion{{2, 0}, {0, 2}});

  auto only_attack = pad_metrics({0.9, 0.3, 0.7}, {1, 1, 1});
  CHECK_FALSE(only_attack.npcer.has_value());
  CHECK_FALSE(only_attack.acer.has_value());
  CHECK_FALSE(only_attack.eer.has_value());
  CHECK(*only_attack.apcer == 33.33);
  CHECK(only_attack.aa == 66.67);

  auto only_bona = pad_metrics({0.9, 0.3}, {0, 0});
  CHECK_FALSE(only_bona.apcer.has_value());
  CHECK(*only_bona.npcer == 50.0);
  CHECK(only_bona.aa == 50.0);

  CHECK_THROWS_AS(pad_metrics({0.1}, {2}), std::invalid_argument);
  CHECK_THROWS_AS(pad_metrics({0.1, 0.2}, {1}), std::invalid_argument);
}

TEST_CASE("rates match a counting oracle on random score sets") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 200);
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng() % 2);
      // coarse grid so ties and exact-threshold hits occur
      s[i] = trial % 3 == 0 ? std::floor(u(rng) * 8) / 8 : u(rng);
    }
    y[0] = 0;
    y[1] = 1;
    const double thr = trial % 2 ? 0.5 : u(rng);
    const auto m = pad_metrics(s, y, thr);
    const auto o = count_oracle(s, y, thr);
    INFO("trial " << trial);
    CHECK(m.aa == round2(o.aa));
    CHECK(*m.apcer == round2(o.apcer));
    CHECK(*m.npcer == round2(o.npcer));
    CHECK(std::abs(*m.acer - (*m.apcer + *m.npcer) / 2) <= 0.005 + 1e-9);
    CHECK(m.n_total == n);
    CHECK(std::abs(*m.eer - round2(eer_oracle(s, y))) < 1e-9);
  }
}

TEST_CASE("DET curve is monotone in threshold") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < 60; ++i) {
      y.push_back(i % 3 == 0);
      s.push_back(std::round(u(rng) * 20) / 20 + 0.2 * y.back());
    }
    const auto d = det_curve(s, y);
    REQUIRE(d.points.size() >= 2);
    CHECK(d.points.front().apcer == 0.0);
    CHECK(d.points.front().npcer == 100.0);
    CHECK(d.points.back().apcer == 100.0);
    CHECK(d.points.back().npcer == 0.0);
    for (std::size_t k = 1; k < d.points.size(); ++k) {
      CHECK(d.points[k].threshold > d.points[k - 1].threshold);
      CHECK(d.points[k].apcer >= d.points[k - 1].apcer);
      CHECK(d.points[k].npcer <= d.points[k - 1].npcer);
    }
    CHECK(d.eer >= 0.0);
    CHECK(d.eer <= 100.0);
  }
}

TEST_CASE("EER hand cases") {
  CHECK(det_curve({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}).eer == 0.0);

  const auto same = det_curve({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1});
  CHECK(same.eer == 50.0);
  for (const auto& p : same.points) CHECK(p.apcer + p.npcer == 100.0);

  // attacks at .4 .8 .9, bonafide at .1 .2 .6
  const std::vector<double> s{.1, .2, .4, .6, .8, .9};
  const std::vector<int> y{0, 0, 1, 0, 1, 1};
  const auto d = det_curve(s, y);
  CHECK(d.eer == doctest::Approx(eer_oracle(s, y)).epsilon(1e-12));
  CHECK(d.eer == doctest::Approx(100.0 / 3).epsilon(1e-12));
  CHECK(d.points.size() == 7);

  // crossing strictly between thresholds
  const std::vector<double> s2{.1, .3, .5, .7};
  const std::vector<int> y2{1, 0, 0, 1};
  CHECK(det_curve(s2, y2).eer == doctest::Approx(eer_oracle(s2, y2)).epsilon(1e-12));

  CHECK_THROWS_AS(det_curve({0.1, 0.2}, {1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(det_curve({}, {}), std::invalid_argument);
}

TEST_CASE("confusion matrix") {
  CHECK(confusion_matrix({0, 1, 2, 2}, {0, 1, 2, 2}, 3) == Confusion{{1, 0, 0}, {0, 1, 0}, {0, 0, 2}});
  // hand tally: true 0 -> {0,0,2}, true 1 -> {1,1}, true 2 -> {0,2,2}
  const auto m = confusion_matrix({0, 0, 2, 1, 1, 0, 2, 2}, {0, 0, 0, 1, 1, 2, 2, 2}, 3);
  CHECK(m == Confusion{{2, 0, 1}, {0, 2, 0}, {1, 0, 2}});
  CHECK(confusion_matrix({}, {}, 2) == Confusion{{0, 0}, {0, 0}});
  CHECK_THROWS_AS(confusion_matrix({3}, {0}, 3), std::out_of_range);
  CHECK_THROWS_AS(confusion_matrix({0}, {-1}, 3), std::out_of_range);
  CHECK_THROWS_AS(confusion_matrix({0, 1}, {0}, 3), std::invalid_argument);

  const std::vector<double> probs{.7, .2, .1, .1, .8, .1, .5, .1, .4};
  const auto r = multiclass_metrics(probs, {0, 1, 2}, 3);
  CHECK(r.aa == 66.67);
  CHECK(r.confusion[2][0] == 1);
  CHECK_FALSE(r.apcer.has_value());
}

TEST_CASE("best-epoch rule") {
  std::vector<EpochStats> h;
  const double acc[] = {50, 60, 90, 80, 90};
  for (int e = 0; e < 5; ++e) h.push_back({e + 1, 1.0, 1.0, acc[e]});
  CHECK(select_best_epoch(h) == 3);
  CHECK(select_best_epoch({}) == 0);
  // accuracy ties go to the lower validation loss, then the earlier epoch
  std::vector<EpochStats> tie{{1, 1.0, 0.4, 100}, {2, 1.0, 0.9, 60}, {3, 1.0, 0.1, 100}, {4, 1.0, 0.1, 100}};
  CHECK(select_best_epoch(tie) == 3);
}

TEST_CASE("training keeps the weights of the best validation epoch") {
  auto tr = noisy_set(16, 8, 1);
  auto va = noisy_set(8, 8, 2);
  DFCANet model(ModelConfig::tiny());
  std::vector<std::vector<std::vector<double>>> per_epoch;
  auto res = train(model, tr, va, quick(6, 3e-2), [&](const EpochStats&) { per_epoch.push_back(all_values(model)); });
  REQUIRE(res.history.size() == 6);
  CHECK(res.best_epoch == select_best_epoch(res.history));
  CHECK(all_values(model) == per_epoch[static_cast<std::size_t>(res.best_epoch - 1)]);
  for (int e = 0; e < 6; ++e) CHECK(res.history[static_cast<std::size_t>(e)].epoch == e + 1);
}

TEST_CASE("lr = 0 leaves parameters unchanged") {
  auto tr = noisy_set(8, 8, 3);
  DFCANet model(ModelConfig::tiny());
  const auto before = trainable_values(model);
  auto cfg = quick(3, 0.0);
  cfg.augment = true;
  train(model, tr, tr, cfg);
  CHECK(trainable_values(model) == before);
}

TEST_CASE("two-sample separable toy task converges") {
  auto set = constant_images({0.1, 0.9}, {0, 1}, 8);
  DFCANet model(ModelConfig::tiny());
  auto cfg = quick(200, 1e-2);
  cfg.batch_size = 2;
  int first_perfect = 0;
  auto res = train(model, set, set, cfg, [&](const EpochStats& e) {
    if (!first_perfect && e.val_acc == 100.0) first_perfect = e.epoch;
  });
  INFO("final val acc " << res.history.back().val_acc);
  CHECK(first_perfect > 0);
  CHECK(first_perfect <= 200);
  CHECK(evaluate(model, set).aa == 100.0);
}

TEST_CASE("training input validation") {
  DFCANet model(ModelConfig::tiny());
  auto tr = noisy_set(4, 8, 1);
  LabeledSet empty;
  CHECK_THROWS_AS(train(model, empty, tr, quick(1)), std::invalid_argument);
  CHECK_THROWS_AS(train(model, tr, empty, quick(1)), std::invalid_argument);
  auto bad = quick(1);
  bad.batch_size = 0;
  CHECK_THROWS_AS(train(model, tr, tr, bad), std::invalid_argument);
  bad = quick(1);
  bad.lr = -1;
  CHECK_THROWS_AS(train(model, tr, tr, bad), std::invalid_argument);
  CHECK_THROWS_AS(evaluate(model, empty), std::invalid_argument);

  auto zero = train(model, tr, tr, quick(0));
  CHECK(zero.best_epoch == 0);
  CHECK(zero.history.empty());
}

TEST_CASE("non-finite loss raises NumericError") {
  DFCANet model(ModelConfig::tiny());
  for (auto& e : model.tensors())
    if (e.name == "head.out.weight") {
      auto t = e.tensor;
      t.mutable_buffer().set(0, std::numeric_limits<double>::quiet_NaN());
    }
  auto tr = noisy_set(4, 8, 1);
  CHECK_THROWS_AS(train(model, tr, tr, quick(1)), NumericError);
}

TEST_CASE("fine-tuning transfers weights") {
  DFCANet source(ModelConfig::tiny());
  TensorEntries ckpt;
  for (const auto& e : source.tensors()) ckpt.emplace_back(e.name, e.tensor.detach());

  auto cfg = ModelConfig::tiny();
  cfg.seed = 99;
  DFCANet target(cfg);
  REQUIRE(all_values(target) != all_values(source));
  auto tr = noisy_set(4, 8, 1);
  LoadReport rep;
  auto res = finetune(target, ckpt, tr, tr, quick(0), &rep);
  CHECK(res.best_epoch == 0);
  CHECK(rep.skipped.empty());
  CHECK(rep.unused.empty());
  CHECK(all_values(target) == all_values(source));

  // PAD checkpoint into a lens model: only the output layer is re-initialized
  auto lens_cfg = ModelConfig::tiny();
  lens_cfg.task = Task::lens;
  DFCANet lens(lens_cfg);
  auto lens_set = noisy_set(6, 8, 4);
  for (std::size_t i = 0; i < lens_set.size(); ++i) lens_set.labels[i] = static_cast<int>(i % 3);
  finetune(lens, ckpt, lens_set, lens_set, quick(1), &rep);
  CHECK(rep.skipped == std::vector<std::string>{"head.out.weight", "head.out.bias"});

  // different backbone width cannot be transferred
  auto wide = ModelConfig::tiny();
  wide.backbone.growth = 3;
  DFCANet other(wide);
  CHECK_THROWS_AS(finetune(other, ckpt, tr, tr, quick(1)), std::runtime_error);
}

TEST_CASE("training loss falls on the synthetic task") {
  TempDir dir("trend");
  SynthConfig sc;
  auto rows = synth_generate(sc, {10, 10, 10, 10, 0}, dir.path.string());
  auto set = load_set(rows, TaskLabels::pad, 64);
  DFCANet model(ModelConfig::desk());
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.lr = 1e-3;
  cfg.batch_size = 16;
  cfg.seed = 4;
  auto res = train(model, set, set, cfg);
  for (std::size_t e = 4; e < res.history.size(); ++e) {
    INFO("epoch " << e + 1);
    CHECK(res.history[e].train_loss < res.history[0].train_loss);
  }
}

TEST_CASE("evaluation is deterministic and reports round-trip") {
  TempDir dir("evaldet");
  DFCANet model(ModelConfig::tiny());
  auto te = noisy_set(10, 8, 9);
  auto a = evaluate(model, te);
  auto b = evaluate(model, te);
  write_report(dir / "a.txt", metric_entries(a), a.det);
  write_report(dir / "b.txt", metric_entries(b), b.det);
  CHECK(bytes_of(dir / "a.txt") == bytes_of(dir / "b.txt"));

  auto parsed = read_report(dir / "a.txt");
  CHECK(parsed.values.at("aa") == format_metric(a.aa));
  CHECK(parsed.values.at("acer") == format_metric(a.acer));
  REQUIRE(parsed.det.size() == a.det.size());
  for (std::size_t i = 0; i < a.det.size(); ++i) CHECK(parsed.det[i].threshold == a.det[i].threshold);

  write_history_csv(dir / "h.csv", {{1, 0.5, 0.25, 50.0}, {2, 0.125, 0.5, 75.0}});
  CHECK(bytes_of(dir / "h.csv") == "epoch,train_loss,val_loss,val_acc\n1,0.5,0.25,50.0000\n2,0.125,0.5,75.0000\n");
}

TEST_CASE("protocol runner reports splits and parameter audit") {
  TempDir dir("protocol");
  SynthConfig sc;
  synth_generate(sc, {6, 6, 6, 6, 0}, dir.path.string());
  const auto rows = load_manifest(dir / "manifest.csv", RelabelPolicy{});

  ProtocolRun run;
  run.records = rows;
  run.model = ModelConfig::desk();
  run.train.epochs = 1;
  run.train.batch_size = 8;
  run.train.lr = 1e-3;

  SUBCASE("intra names one sensor") {
    run.spec.kind = ProtocolKind::intra;
    run.spec.train_sensors = {"synB"};
    run.out_dir = dir / "intra";
    auto out = run_protocol(run);
    auto rep = read_report(dir / "intra/report.txt");
    CHECK(rep.values.at("train_rows_by_sensor") == "synB:12");
    CHECK(rep.values.at("test_rows_by_sensor") == "synB:12");
    CHECK(rep.values.at("protocol") == "intra");
    CHECK(fs::exists(dir / "intra/best.ckpt"));
    CHECK(bytes_of(dir / "intra/history.csv").rfind("epoch,train_loss,val_loss,val_acc\n", 0) == 0);
    CHECK(out.train_rows + out.val_rows == 12);
    CHECK(rep.det.size() == out.metrics.det.size());
  }
  SUBCASE("cross-database excludes the held-out sensor from training") {
    run.spec.kind = ProtocolKind::cross_database;
    run.spec.train_sensors = {"synA"};
    run.spec.test_sensors = {"synB"};
    auto out = run_protocol(run);
    for (const auto& r : out.splits.train) CHECK(r.sensor == "synA");
    for (const auto& [k, v] : out.report)
      if (k == "train_rows_by_sensor") CHECK(v == "synA:24");
  }
  SUBCASE("ablation records the reduced parameter count") {
    run.spec.kind = ProtocolKind::intra;
    run.spec.train_sensors = {"synA"};
    run.model.use_ifcnet = false;
    run.model.use_cam = false;
    auto out = run_protocol(run);
    DFCANet full(ModelConfig::desk());
    std::int64_t ifc = 0;
    for (const auto& e : full.tensors())
      if (e.trainable && e.name.rfind("ifcnet.", 0) == 0) ifc += e.tensor.numel();
    CHECK(out.param_count == full.param_count() - ifc);
    bool seen = false;
    for (const auto& [k, v] : out.report)
      if (k == "param_count") seen = v == std::to_string(out.param_count);
    CHECK(seen);
  }
  SUBCASE("lens detection trains a three-way head") {
    auto lens_rows = load_manifest(dir / "manifest.csv", RelabelPolicy{});
    run.records = lens_rows;
    run.spec.kind = ProtocolKind::lens_detection;
    run.spec.train_sensors = {"synA"};
    auto out = run_protocol(run);
    CHECK(out.metrics.confusion.size() == 3);
    CHECK_FALSE(out.metrics.acer.has_value());
  }
}
