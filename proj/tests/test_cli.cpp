#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <cmath>
#include <fstream>
#include <iterator>
#include <regex>
#include <sstream>

#include "dfca/checkpoint.hpp"
#include "dfca/train.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace dfca;
using dfca::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;  // stdout and stderr together
};

Run dfca_cli(const std::string& args, const fs::path& cwd) {
  const auto log = cwd / "cli_output.txt";
  const std::string cmd =
      "cd '" + cwd.string() + "' && '" + DFCA_CLI_PATH + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  r.out.assign(std::istreambuf_iterator<char>(in), {});
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int label_total(const std::string& log, const std::string& label) {
  // "labels: train attack:30,bonafide:10, test attack:30,bonafide:10"
  std::smatch m;
  const std::regex line("labels: train (.*), test (.*)");
  REQUIRE(std::regex_search(log, m, line));
  int total = 0;
  for (int g = 1; g <= 2; ++g) {
    std::smatch c;
    const std::string part = m[g].str();
    if (std::regex_search(part, c, std::regex(label + ":([0-9]+)"))) total += std::stoi(c[1].str());
  }
  return total;
}

// One small dataset shared by every case below.
struct Fixture {
  TempDir dir{"cli"};
  Fixture() {
    const auto r = dfca_cli("synth --out data --counts 12,10,12,12,0 --image-size 64", dir.path);
    REQUIRE(r.code == 0);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("synth is repeatable and rejects empty counts") {
  auto& f = fixture();
  REQUIRE(dfca_cli("synth --out again --counts 12,10,12,12,0 --image-size 64", f.dir.path).code == 0);
  CHECK(slurp(f.dir.path / "data/manifest.csv") == slurp(f.dir.path / "again/manifest.csv"));
  CHECK(slurp(f.dir.path / "data/synB/soft/3.png") == slurp(f.dir.path / "again/synB/soft/3.png"));

  const auto r = dfca_cli("synth --out zero --counts 0,0,0,0,0", f.dir.path);
  CHECK(r.code == 1);
  CHECK(r.out.find("--counts") != std::string::npos);

  for (Label soft : {Label::attack, Label::bonafide}) {
    RelabelPolicy p;
    p.soft_lens_as = soft;
    CHECK(load_manifest((f.dir.path / "data/manifest.csv").string(), p).size() == 2 * 46);
  }
}

TEST_CASE("train writes resolved config with default hyperparameters") {
  auto& f = fixture();
  const auto r = dfca_cli("train --manifest data/manifest.csv --train-sensors synA --epochs 0 --out runs --run-id defaults",
                          f.dir.path);
  REQUIRE(r.code == 0);
  std::stringstream cfg(slurp(f.dir.path / "runs/defaults/config.json"));
  const std::string text = cfg.str();
  CHECK(text.find("\"lr\": 0.0001") != std::string::npos);
  CHECK(text.find("\"batch_size\": 32") != std::string::npos);
  CHECK(fs::exists(f.dir.path / "runs/defaults/report.txt"));
  CHECK(fs::exists(f.dir.path / "runs/defaults/best.ckpt"));

  // the resolved config alone reproduces the run
  const auto again = dfca_cli("train --config runs/defaults/config.json --out runs --run-id replay", f.dir.path);
  REQUIRE(again.code == 0);
  CHECK(slurp(f.dir.path / "runs/defaults/report.txt") == slurp(f.dir.path / "runs/replay/report.txt"));
  CHECK(slurp(f.dir.path / "runs/defaults/best.ckpt") == slurp(f.dir.path / "runs/replay/best.ckpt"));
}

TEST_CASE("ablation and relabel flags show up in the run log") {
  auto& f = fixture();
  const auto r = dfca_cli(
      "train --manifest data/manifest.csv --train-sensors synA --epochs 0 --ablate backbone-only --out runs --run-id bb",
      f.dir.path);
  REQUIRE(r.code == 0);
  const auto log = slurp(f.dir.path / "runs/bb/run.log");
  CHECK(log.find("ifcnet=off") != std::string::npos);
  CHECK(log.find("cam=off") != std::string::npos);

  const auto a = dfca_cli("train --manifest data/manifest.csv --train-sensors synA --epochs 0 --soft-lens-as attack "
                          "--out runs --run-id soft_a",
                          f.dir.path);
  const auto b = dfca_cli("train --manifest data/manifest.csv --train-sensors synA --epochs 0 --soft-lens-as bonafide "
                          "--out runs --run-id soft_b",
                          f.dir.path);
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  const auto la = slurp(f.dir.path / "runs/soft_a/run.log"), lb = slurp(f.dir.path / "runs/soft_b/run.log");
  const int soft_rows = 10;  // synA soft lens rows
  CHECK(label_total(la, "attack") - label_total(lb, "attack") == soft_rows);
  CHECK(label_total(lb, "bonafide") - label_total(la, "bonafide") == soft_rows);
}

TEST_CASE("eval reproduces the training report and honours the threshold") {
  auto& f = fixture();
  REQUIRE(dfca_cli("train --manifest data/manifest.csv --train-sensors synA --epochs 2 --batch 8 --lr 1e-3 --out runs "
                   "--run-id trained",
                   f.dir.path)
              .code == 0);
  REQUIRE(dfca_cli("eval --checkpoint runs/trained/best.ckpt --out runs --run-id ev", f.dir.path).code == 0);
  const auto trained = read_report((f.dir.path / "runs/trained/report.txt").string());
  const auto ev = read_report((f.dir.path / "runs/ev/report.txt").string());
  for (const char* k : {"aa", "apcer", "npcer", "acer", "eer", "confusion", "test_total"})
    CHECK(trained.values.at(k) == ev.values.at(k));
  CHECK(trained.det.size() == ev.det.size());

  REQUIRE(dfca_cli("eval --checkpoint runs/trained/best.ckpt --threshold 0 --out runs --run-id thr0", f.dir.path).code ==
          0);
  const auto zero = read_report((f.dir.path / "runs/thr0/report.txt").string());
  CHECK(zero.values.at("apcer") == "0.00");
  CHECK(zero.values.at("npcer") == "100.00");
  for (const auto* rep : {&trained, &zero}) {
    const double ap = std::stod(rep->values.at("apcer")), np = std::stod(rep->values.at("npcer"));
    CHECK(std::abs(std::stod(rep->values.at("acer")) - (ap + np) / 2) <= 0.005 + 1e-9);
  }
}

TEST_CASE("finetune requires a checkpoint") {
  auto& f = fixture();
  const auto r = dfca_cli("finetune --manifest data/manifest.csv --epochs 1", f.dir.path);
  CHECK(r.code == 1);
  CHECK(r.out.find("--from-checkpoint") != std::string::npos);
  REQUIRE(dfca_cli("train --manifest data/manifest.csv --train-sensors synA --epochs 0 --out runs --run-id src",
                   f.dir.path)
              .code == 0);
  const auto ft = dfca_cli("finetune --manifest data/manifest.csv --from-checkpoint runs/src/best.ckpt "
                           "--train-sensors synB --test-sensors synB --epochs 1 --batch 8 --out runs --run-id ft",
                           f.dir.path);
  CHECK(ft.code == 0);
  CHECK(read_report((f.dir.path / "runs/ft/report.txt").string()).values.at("transfer_skipped") == "0");
}

TEST_CASE("exit codes for usage, data and numeric failures") {
  auto& f = fixture();
  CHECK(dfca_cli("train --lr", f.dir.path).code == 1);
  CHECK(dfca_cli("train --manifest data/manifest.csv --ablate nothing", f.dir.path).code == 1);
  CHECK(dfca_cli("train --manifest data/manifest.csv --train-sensors synA,synB --epochs 1", f.dir.path).code == 1);
  {
    std::ofstream(f.dir.path / "bad.json") << R"({"train": {"epochs": 1, "learning_rate": 3}})";
    const auto r = dfca_cli("train --config bad.json --manifest data/manifest.csv", f.dir.path);
    CHECK(r.code == 1);
    CHECK(r.out.find("learning_rate") != std::string::npos);
  }
  CHECK(dfca_cli("train --manifest missing.csv --train-sensors synA --epochs 1", f.dir.path).code == 2);
  // a poisoned source checkpoint makes the first training loss NaN
  DFCANet poisoned(ModelConfig::desk());
  Tensor w = poisoned.tensors().front().tensor;
  w.mutable_buffer().set(0, std::nan(""));
  save_model(poisoned, (f.dir.path / "nan.ckpt").string());
  const auto nan = dfca_cli("finetune --manifest data/manifest.csv --from-checkpoint nan.ckpt --train-sensors synB "
                            "--test-sensors synB --epochs 1 --out runs --run-id nan",
                            f.dir.path);
  CHECK(nan.code == 3);
  CHECK(nan.out.find("numeric") != std::string::npos);
}

TEST_CASE("gradcheck table and fault hook") {
  auto& f = fixture();
  const auto ok = dfca_cli("gradcheck --scale tiny --seed 3", f.dir.path);
  CHECK(ok.code == 0);
  CHECK(ok.out.find("all gradient checks passed") != std::string::npos);
  CHECK(ok.out.find("FAIL") == std::string::npos);
  const auto bad = dfca_cli("gradcheck --scale tiny --inject-fault fcblock", f.dir.path);
  CHECK(bad.code == 3);
  CHECK(std::regex_search(bad.out, std::regex("fcblock +FAIL")));
  CHECK(dfca_cli("gradcheck --inject-fault nosuch", f.dir.path).code == 1);
}

TEST_CASE("dump writes one file per stage") {
  auto& f = fixture();
  // full-width model at its native input size, untrained
  const auto dir = f.dir.path / "fullmodel";
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << R"({"model": {"scale": "full", "seed": 5}})";
  save_model(DFCANet(ModelConfig::full()), (dir / "best.ckpt").string());

  const std::string args = "dump --checkpoint fullmodel/best.ckpt --image data/synA/normal/0.png "
                           "--stages backbone,fcblock1,fcblock3,fcblock5,cam ";
  REQUIRE(dfca_cli(args + "--out f1", f.dir.path).code == 0);
  REQUIRE(dfca_cli(args + "--out f2", f.dir.path).code == 0);
  int files = 0;
  for (const auto& e : fs::directory_iterator(f.dir.path / "f1")) {
    ++files;
    CHECK(slurp(e.path()) == slurp(f.dir.path / "f2" / e.path().filename()));
  }
  CHECK(files == 5);
  CHECK(read_tensor_file((f.dir.path / "f1/backbone.tensor").string()).shape() == Shape{1, 56, 56, 128});
  CHECK(read_tensor_file((f.dir.path / "f1/fcblock5.tensor").string()).shape() == Shape{1, 14, 14, 512});

  const auto bad = dfca_cli("dump --checkpoint fullmodel/best.ckpt --image data/synA/normal/0.png --stages densenet",
                            f.dir.path);
  CHECK(bad.code == 1);
  CHECK(bad.out.find("fcblock3") != std::string::npos);
}
