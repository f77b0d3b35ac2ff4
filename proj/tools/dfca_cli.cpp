// dfca: synthesis, training, fine-tuning, evaluation, gradient checks and
// feature-map dumps. Exit codes: 0 ok, 1 usage, 2 data, 3 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "dfca/checkpoint.hpp"
#include "dfca/gradsuite.hpp"
#include "dfca/train.hpp"

using namespace dfca;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum Exit { ok = 0, usage = 1, data = 2, numeric = 3 };

// ---------------------------------------------------------------------------
// Resolved configuration

struct ModelSection {
  std::string scale = "desk";
  std::string ablate = "none";
  std::uint64_t seed = 0;
  std::string dtype = "f32";
  double dropout = 0.2;
};

struct RunConfig {
  std::string command;
  std::string manifest;
  double threshold = 0.5;
  ModelSection model;
  TrainConfig train;
  ProtocolSpec protocol;
  SynthConfig synth;
  std::vector<int> counts{100, 100, 100, 100, 0};
};

const std::vector<std::string> kScales{"full", "desk", "tiny"};
const std::vector<std::string> kAblations{"none", "no-ifcnet", "no-cam", "backbone-only"};

ModelConfig build_model_config(const ModelSection& m) {
  ModelConfig cfg = m.scale == "full" ? ModelConfig::full() : m.scale == "tiny" ? ModelConfig::tiny() : ModelConfig::desk();
  cfg.use_ifcnet = m.ablate == "none" || m.ablate == "no-cam";
  cfg.use_cam = m.ablate == "none" || m.ablate == "no-ifcnet";
  cfg.seed = m.seed;
  cfg.dtype = m.dtype == "f64" ? DType::f64 : DType::f32;
  cfg.dropout = m.dropout;
  return cfg;
}

ordered_json to_json(const RunConfig& c) {
  const auto& t = c.train;
  const auto& p = c.protocol;
  const auto& s = c.synth;
  ordered_json j;
  j["command"] = c.command;
  j["manifest"] = c.manifest;
  j["threshold"] = c.threshold;
  j["model"] = {{"scale", c.model.scale},
                {"ablate", c.model.ablate},
                {"seed", c.model.seed},
                {"dtype", c.model.dtype},
                {"dropout", c.model.dropout}};
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"lr", t.lr},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"seed", t.seed},
                {"val_fraction", t.val_fraction},
                {"augment", t.augment},
                {"shift_fraction", t.augmentation.shift_fraction},
                {"shear_degrees", t.augmentation.shear_degrees}};
  j["protocol"] = {{"kind", protocol_name(p.kind)},
                   {"train_sensors", p.train_sensors},
                   {"test_sensors", p.test_sensors},
                   {"datasets", p.datasets},
                   {"soft_lens_as", label_name(p.policy.soft_lens_as)},
                   {"checkpoint", p.checkpoint},
                   {"test_subsample", p.test_subsample},
                   {"seed", p.seed}};
  j["synth"] = {{"seed", s.seed},
                {"image_size", s.image_size},
                {"sensors", s.sensors},
                {"dataset", s.dataset},
                {"ring_freq_lo", s.ring_freq_lo},
                {"ring_freq_hi", s.ring_freq_hi},
                {"radial_noise", s.radial_noise},
                {"lattice_period", s.lattice_period},
                {"lattice_contrast", s.lattice_contrast},
                {"film_alpha", s.film_alpha},
                {"halftone_period", s.halftone_period},
                {"blur_sigma", s.blur_sigma},
                {"counts", c.counts}};
  return j;
}

template <class T>
void take(const ordered_json& sec, const char* key, T& dst) {
  if (sec.contains(key)) dst = sec.at(key).get<T>();
}

void reject_unknown(const ordered_json& sec, const std::string& where, const ordered_json& known) {
  for (const auto& [k, v] : sec.items())
    if (!known.contains(k)) throw UsageError("unknown key '" + k + "' in config section '" + where + "'");
}

RunConfig from_json(const ordered_json& j) {
  RunConfig c;
  const ordered_json ref = to_json(c);
  reject_unknown(j, "top level", ref);
  take(j, "command", c.command);
  take(j, "manifest", c.manifest);
  take(j, "threshold", c.threshold);
  if (j.contains("model")) {
    const auto& m = j["model"];
    reject_unknown(m, "model", ref["model"]);
    take(m, "scale", c.model.scale);
    take(m, "ablate", c.model.ablate);
    take(m, "seed", c.model.seed);
    take(m, "dtype", c.model.dtype);
    take(m, "dropout", c.model.dropout);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t, "train", ref["train"]);
    take(t, "epochs", c.train.epochs);
    take(t, "batch_size", c.train.batch_size);
    take(t, "lr", c.train.lr);
    take(t, "beta1", c.train.beta1);
    take(t, "beta2", c.train.beta2);
    take(t, "seed", c.train.seed);
    take(t, "val_fraction", c.train.val_fraction);
    take(t, "augment", c.train.augment);
    take(t, "shift_fraction", c.train.augmentation.shift_fraction);
    take(t, "shear_degrees", c.train.augmentation.shear_degrees);
  }
  if (j.contains("protocol")) {
    const auto& p = j["protocol"];
    reject_unknown(p, "protocol", ref["protocol"]);
    if (p.contains("kind")) c.protocol.kind = parse_protocol(p["kind"].get<std::string>());
    take(p, "train_sensors", c.protocol.train_sensors);
    take(p, "test_sensors", c.protocol.test_sensors);
    take(p, "datasets", c.protocol.datasets);
    if (p.contains("soft_lens_as")) c.protocol.policy.soft_lens_as = parse_label(p["soft_lens_as"].get<std::string>());
    take(p, "checkpoint", c.protocol.checkpoint);
    take(p, "test_subsample", c.protocol.test_subsample);
    take(p, "seed", c.protocol.seed);
  }
  if (j.contains("synth")) {
    const auto& s = j["synth"];
    reject_unknown(s, "synth", ref["synth"]);
    take(s, "seed", c.synth.seed);
    take(s, "image_size", c.synth.image_size);
    take(s, "sensors", c.synth.sensors);
    take(s, "dataset", c.synth.dataset);
    take(s, "ring_freq_lo", c.synth.ring_freq_lo);
    take(s, "ring_freq_hi", c.synth.ring_freq_hi);
    take(s, "radial_noise", c.synth.radial_noise);
    take(s, "lattice_period", c.synth.lattice_period);
    take(s, "lattice_contrast", c.synth.lattice_contrast);
    take(s, "film_alpha", c.synth.film_alpha);
    take(s, "halftone_period", c.synth.halftone_period);
    take(s, "blur_sigma", c.synth.blur_sigma);
    take(s, "counts", c.counts);
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config '" + path + "'");
  try {
    return from_json(ordered_json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config '" + path + "': " + e.what());
  }
}

void write_config(const fs::path& dir, const RunConfig& c) {
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << to_json(c).dump(2) << '\n';
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

// Relative manifest paths fall back to $DFCA_DATA_ROOT.
std::string resolve_manifest(const std::string& path) {
  if (path.empty()) throw UsageError("no manifest given (--manifest or config key 'manifest')");
  fs::path p(path);
  if (p.is_relative() && !fs::exists(p))
    if (const char* root = std::getenv("DFCA_DATA_ROOT")) p = fs::path(root) / p;
  return fs::absolute(p).lexically_normal().string();
}

// ---------------------------------------------------------------------------
// Flag overrides. Values land in these holders and are applied only when given.

struct Overrides {
  std::string config, manifest, protocol, soft_lens_as, ablate, scale, train_sensors, test_sensors, datasets,
      from_checkpoint, counts, dtype;
  int epochs = 0, batch = 0, image_size = 0;
  double lr = 0, threshold = 0, val_fraction = 0;
  std::uint64_t seed = 0;
  std::int64_t test_subsample = 0;
  bool no_augment = false;
};

struct Flags {
  CLI::App* app;
  Overrides v;
  std::map<std::string, CLI::Option*> opt;

  template <class T>
  void add(const std::string& name, T& dst, const std::string& help) {
    opt[name] = app->add_option("--" + name, dst, help);
  }
  bool given(const std::string& name) const {
    auto it = opt.find(name);
    return it != opt.end() && it->second->count() > 0;
  }
};

void add_run_flags(Flags& f) {
  f.add("config", f.v.config, "JSON config; flags override its values");
  f.add("manifest", f.v.manifest, "manifest CSV");
  f.add("protocol", f.v.protocol, "intra|inter|combined|cross_database|incremental|lens_detection");
  f.add("train-sensors", f.v.train_sensors, "comma-separated sensors for training (intra: the one sensor)");
  f.add("test-sensors", f.v.test_sensors, "comma-separated sensors for testing");
  f.add("datasets", f.v.datasets, "comma-separated datasets to keep");
  f.add("soft-lens-as", f.v.soft_lens_as, "attack|bonafide");
  f.opt["soft-lens-as"]->check(CLI::IsMember({"attack", "bonafide"}));
  f.add("ablate", f.v.ablate, "none|no-ifcnet|no-cam|backbone-only");
  f.opt["ablate"]->check(CLI::IsMember(kAblations));
  f.add("scale", f.v.scale, "full|desk|tiny");
  f.opt["scale"]->check(CLI::IsMember(kScales));
  f.add("dtype", f.v.dtype, "f32|f64");
  f.opt["dtype"]->check(CLI::IsMember({"f32", "f64"}));
  f.add("epochs", f.v.epochs, "training epochs");
  f.add("batch", f.v.batch, "minibatch size");
  f.add("lr", f.v.lr, "Adam learning rate");
  f.add("seed", f.v.seed, "seed for model init, shuffling, augmentation and splits");
  f.add("val-fraction", f.v.val_fraction, "share of the training split held out for model selection");
  f.add("test-subsample", f.v.test_subsample, "keep this many test rows (0 keeps all)");
  f.add("threshold", f.v.threshold, "attack decision threshold on the score");
  f.add("from-checkpoint", f.v.from_checkpoint, "checkpoint to fine-tune from");
  f.opt["no-augment"] = f.app->add_flag("--no-augment", f.v.no_augment, "disable shift/shear augmentation");
}

void apply(const Flags& f, RunConfig& c) {
  const auto& v = f.v;
  if (f.given("manifest")) c.manifest = v.manifest;
  if (f.given("protocol")) c.protocol.kind = parse_protocol(v.protocol);
  if (f.given("train-sensors")) c.protocol.train_sensors = split_list(v.train_sensors);
  if (f.given("test-sensors")) c.protocol.test_sensors = split_list(v.test_sensors);
  if (f.given("datasets")) c.protocol.datasets = split_list(v.datasets);
  if (f.given("soft-lens-as")) c.protocol.policy.soft_lens_as = parse_label(v.soft_lens_as);
  if (f.given("ablate")) c.model.ablate = v.ablate;
  if (f.given("scale")) c.model.scale = v.scale;
  if (f.given("dtype")) c.model.dtype = v.dtype;
  if (f.given("epochs")) c.train.epochs = v.epochs;
  if (f.given("batch")) c.train.batch_size = v.batch;
  if (f.given("lr")) c.train.lr = v.lr;
  if (f.given("seed")) c.model.seed = c.train.seed = c.protocol.seed = v.seed;
  if (f.given("val-fraction")) c.train.val_fraction = v.val_fraction;
  if (f.given("test-subsample")) c.protocol.test_subsample = v.test_subsample;
  if (f.given("threshold")) c.threshold = v.threshold;
  if (f.given("from-checkpoint")) c.protocol.checkpoint = fs::absolute(v.from_checkpoint).string();
  if (f.given("no-augment")) c.train.augment = false;
}

RunConfig base_config(const Flags& f, const std::string& command) {
  RunConfig c = f.given("config") ? load_config(f.v.config) : RunConfig{};
  c.command = command;
  apply(f, c);
  if (std::find(kScales.begin(), kScales.end(), c.model.scale) == kScales.end())
    throw UsageError("unknown scale '" + c.model.scale + "'");
  if (std::find(kAblations.begin(), kAblations.end(), c.model.ablate) == kAblations.end())
    throw UsageError("unknown ablation '" + c.model.ablate + "'");
  return c;
}

// --config, else the config.json written next to the checkpoint by train.
std::string config_beside(const Flags& f, const std::string& checkpoint) {
  if (f.given("config")) return f.v.config;
  const auto beside = fs::path(checkpoint).parent_path() / "config.json";
  if (!fs::exists(beside)) throw UsageError("no --config given and no config.json next to the checkpoint");
  return beside.string();
}

// Turns library argument errors into usage errors.
template <class F>
auto as_usage(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

std::function<void(const std::string&)> logger(const fs::path& file) {
  auto out = std::make_shared<std::ofstream>(file);
  return [out](const std::string& m) {
    std::cerr << m << '\n';
    *out << m << '\n';
    out->flush();
  };
}

// ---------------------------------------------------------------------------
// Commands

int cmd_synth(const Flags& f, const std::string& out_dir) {
  RunConfig c = f.given("config") ? load_config(f.v.config) : RunConfig{};
  c.command = "synth";
  if (f.given("seed")) c.synth.seed = f.v.seed;
  if (f.given("image-size")) c.synth.image_size = f.v.image_size;
  if (f.given("counts")) {
    c.counts.clear();
    for (const auto& s : split_list(f.v.counts)) {
      try {
        c.counts.push_back(std::stoi(s));
      } catch (const std::exception&) {
        throw UsageError("--counts expects integers, got '" + s + "'");
      }
    }
  }
  if (c.counts.size() != 5)
    throw UsageError("--counts needs five per-sensor counts: normal,soft,textured,print,scan (e.g. 100,100,100,100,0)");
  if (std::all_of(c.counts.begin(), c.counts.end(), [](int n) { return n == 0; }))
    throw UsageError("--counts are all zero; give at least one positive count, e.g. --counts 100,100,100,100,0");
  as_usage([&] { return synth_generate(c.synth, c.counts, out_dir); });
  c.manifest = fs::absolute(fs::path(out_dir) / "manifest.csv").lexically_normal().string();
  write_config(out_dir, c);
  std::cout << "wrote " << c.manifest << '\n';
  return ok;
}

int cmd_run(const Flags& f, const std::string& command, const std::string& out_root, const std::string& run_id) {
  RunConfig c = base_config(f, command);
  if (command == "finetune") {
    if (f.given("protocol") && c.protocol.kind != ProtocolKind::incremental)
      throw UsageError("finetune runs the incremental protocol; drop --protocol or use 'train'");
    c.protocol.kind = ProtocolKind::incremental;
    if (c.protocol.checkpoint.empty()) throw UsageError("finetune needs --from-checkpoint");
  } else if (c.protocol.kind == ProtocolKind::incremental && c.protocol.checkpoint.empty()) {
    throw UsageError("the incremental protocol needs --from-checkpoint (or use 'finetune')");
  } else if (c.protocol.kind != ProtocolKind::incremental && f.given("from-checkpoint")) {
    throw UsageError("--from-checkpoint only applies to the incremental protocol");
  }
  as_usage([&] {
    validate(c.train);
    validate(c.protocol);
    return 0;
  });
  c.manifest = resolve_manifest(c.manifest);
  const fs::path dir = fs::path(out_root) / run_id;
  write_config(dir, c);

  ProtocolRun run;
  run.spec = c.protocol;
  run.records = load_manifest(c.manifest, c.protocol.policy);
  run.model = build_model_config(c.model);
  run.train = c.train;
  run.threshold = c.threshold;
  run.out_dir = dir.string();
  run.log = logger(dir / "run.log");
  run.log("run " + run_id + ": " + command + " " + protocol_name(c.protocol.kind) + " ablate=" + c.model.ablate +
          " ifcnet=" + (run.model.use_ifcnet ? "on" : "off") + " cam=" + (run.model.use_cam ? "on" : "off"));
  const auto outcome = run_protocol(run);
  for (const auto& [k, v] : metric_entries(outcome.metrics)) run.log(k + "=" + v);
  std::cout << (dir / "report.txt").string() << '\n';
  return ok;
}

int cmd_eval(const Flags& f, const std::string& checkpoint, const std::string& split, const std::string& out_root,
             const std::string& run_id) {
  RunConfig c = load_config(config_beside(f, checkpoint));
  c.command = "eval";
  apply(f, c);
  c.manifest = resolve_manifest(c.manifest);
  const fs::path dir = fs::path(out_root) / run_id;
  write_config(dir, c);

  const auto records = load_manifest(c.manifest, c.protocol.policy);
  std::vector<SampleRecord> rows;
  if (split == "all") {
    rows = records;
  } else {
    auto spec = c.protocol;
    if (spec.kind == ProtocolKind::incremental && spec.checkpoint.empty()) spec.checkpoint = checkpoint;
    auto s = as_usage([&] { return make_protocol_splits(records, spec); });
    rows = split == "train" ? s.train : s.test;
  }
  const ModelConfig mcfg = model_for_protocol(build_model_config(c.model), c.protocol.kind);
  DFCANet model(mcfg);
  load_into(model, read_checkpoint(checkpoint), LoadMode::strict);
  const auto set = load_set(rows, labels_for_protocol(c.protocol.kind), static_cast<int>(mcfg.input_size));
  const auto m = evaluate(model, set, c.threshold);

  std::vector<std::pair<std::string, std::string>> entries{{"protocol", protocol_name(c.protocol.kind)},
                                                           {"split", split},
                                                           {"checkpoint", fs::absolute(checkpoint).string()}};
  for (auto& e : metric_entries(m)) entries.push_back(std::move(e));
  write_report((dir / "report.txt").string(), entries, m.det);
  for (const auto& [k, v] : entries) std::cout << k << '=' << v << '\n';
  return ok;
}

int cmd_gradcheck(const std::string& scale, std::uint64_t seed, const std::string& fault) {
  if (scale != "tiny") throw UsageError("gradcheck runs at --scale tiny only");
  if (!fault.empty()) {
    const auto& names = gradient_suite_cases();
    if (std::find(names.begin(), names.end(), fault) == names.end()) {
      std::string all;
      for (const auto& n : names) all += (all.empty() ? "" : ", ") + n;
      throw UsageError("unknown gradcheck case '" + fault + "'; valid: " + all);
    }
  }
  GradSuiteOptions opt;
  opt.seed = seed;
  opt.inject_fault = fault;
  bool all = true;
  std::printf("%-16s %-6s %-12s %-10s %s\n", "case", "result", "max_rel_err", "elements", "kink_retries");
  for (const auto& c : run_gradient_suite(opt)) {
    std::int64_t n = 0, retries = 0;
    for (const auto& r : c.results) {
      n += r.checked;
      retries += r.kink_retries;
    }
    std::printf("%-16s %-6s %-12.3e %-10lld %lld\n", c.name.c_str(), c.passed() ? "pass" : "FAIL", c.max_rel_error(),
                static_cast<long long>(n), static_cast<long long>(retries));
    if (!c.passed()) {
      all = false;
      for (const auto& r : c.results)
        if (!r.passed) std::printf("  failing tensor %s rel %.3e\n", r.name.c_str(), r.max_rel_error);
    }
  }
  std::printf("%s (tolerance %.0e)\n", all ? "all gradient checks passed" : "gradient check FAILED", opt.check.tolerance);
  return all ? ok : numeric;
}

int cmd_dump(const Flags& f, const std::string& checkpoint, const std::string& image, const std::string& stages,
             const std::string& out_dir) {
  const auto names = split_list(stages);
  if (names.empty()) throw UsageError("--stages is empty");
  std::string valid;
  for (const auto& n : tap_names()) valid += (valid.empty() ? "" : ", ") + n;
  for (const auto& n : names)
    if (std::find(tap_names().begin(), tap_names().end(), n) == tap_names().end())
      throw UsageError("unknown stage '" + n + "'; valid stages: " + valid);

  RunConfig c = load_config(config_beside(f, checkpoint));
  const ModelConfig mcfg = model_for_protocol(build_model_config(c.model), c.protocol.kind);
  DFCANet model(mcfg);
  load_into(model, read_checkpoint(checkpoint), LoadMode::strict);
  model.set_mode(Mode::infer);
  const auto size = static_cast<int>(mcfg.input_size);
  Tensor img = reshape(decode_and_resize(image, size, size), {1, size, size, 3}).to(mcfg.dtype);
  const std::set<std::string> wanted(names.begin(), names.end());
  const auto out = model.forward(img, wanted);
  fs::create_directories(out_dir);
  for (const auto& n : names)
    if (!out.taps.count(n)) throw UsageError("stage '" + n + "' does not exist in this model configuration");
  for (const auto& n : names) {
    const auto path = (fs::path(out_dir) / (n + ".tensor")).string();
    write_tensor_file(path, n, out.taps.at(n));
    std::cout << path << ' ' << shape_str(out.taps.at(n).shape()) << '\n';
  }
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DFCANet iris presentation-attack detection"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate the synthetic iris dataset and manifest");
  Flags fs_synth{synth, {}, {}};
  std::string synth_out = "synthetic";
  if (const char* root = std::getenv("DFCA_DATA_ROOT")) synth_out = (fs::path(root) / "synthetic").string();
  fs_synth.add("config", fs_synth.v.config, "JSON config (synth section)");
  synth->add_option("--out", synth_out, "dataset directory");
  fs_synth.add("seed", fs_synth.v.seed, "generator seed");
  fs_synth.add("counts", fs_synth.v.counts, "per-sensor counts normal,soft,textured,print,scan");
  fs_synth.add("image-size", fs_synth.v.image_size, "square image size");

  std::string out_root = "runs", run_id = "run";
  auto* train = app.add_subcommand("train", "run a protocol from scratch");
  Flags fs_train{train, {}, {}};
  add_run_flags(fs_train);
  train->add_option("--out", out_root, "output root");
  train->add_option("--run-id", run_id, "outputs go to <out>/<run-id>");

  auto* finetune = app.add_subcommand("finetune", "fine-tune a checkpoint under the incremental protocol");
  Flags fs_ft{finetune, {}, {}};
  add_run_flags(fs_ft);
  finetune->add_option("--out", out_root, "output root");
  finetune->add_option("--run-id", run_id, "outputs go to <out>/<run-id>");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  Flags fs_eval{eval, {}, {}};
  std::string eval_ckpt, eval_split = "test";
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required();
  eval->add_option("--split", eval_split, "test|train|all")->check(CLI::IsMember({"test", "train", "all"}));
  fs_eval.add("config", fs_eval.v.config, "run config (default: config.json beside the checkpoint)");
  fs_eval.add("manifest", fs_eval.v.manifest, "manifest CSV");
  fs_eval.add("threshold", fs_eval.v.threshold, "attack decision threshold");
  eval->add_option("--out", out_root, "output root");
  eval->add_option("--run-id", run_id, "outputs go to <out>/<run-id>");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks per layer and block");
  std::string grad_scale = "tiny", grad_fault;
  std::uint64_t grad_seed = 1;
  grad->add_option("--scale", grad_scale, "model scale (tiny)");
  grad->add_option("--seed", grad_seed, "seed for weights and inputs");
  grad->add_option("--inject-fault", grad_fault, "test hook: skew the backward pass of one case")->group("");

  auto* dump = app.add_subcommand("dump", "write feature maps of one image");
  Flags fs_dump{dump, {}, {}};
  std::string dump_ckpt, dump_image, dump_stages = "backbone,fcblock1,cam,embedding", dump_out = "features";
  dump->add_option("--checkpoint", dump_ckpt, "checkpoint")->required();
  dump->add_option("--image", dump_image, "PNG or BMP image")->required();
  dump->add_option("--stages", dump_stages, "comma-separated stage names");
  dump->add_option("--out", dump_out, "output directory");
  fs_dump.add("config", fs_dump.v.config, "run config (default: config.json beside the checkpoint)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? ok : usage;
  }

  try {
    if (*synth) return cmd_synth(fs_synth, synth_out);
    if (*train) return cmd_run(fs_train, "train", out_root, run_id);
    if (*finetune) return cmd_run(fs_ft, "finetune", out_root, run_id);
    if (*eval) return cmd_eval(fs_eval, eval_ckpt, eval_split, out_root, run_id);
    if (*grad) return cmd_gradcheck(grad_scale, grad_seed, grad_fault);
    if (*dump) return cmd_dump(fs_dump, dump_ckpt, dump_image, dump_stages, dump_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\nrun with --help for options\n";
    return usage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return numeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return data;
  }
  return usage;
}
