#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dfca/data.hpp"

namespace dfca {

namespace fs = std::filesystem;

const char* label_name(Label l) { return l == Label::attack ? "attack" : "bonafide"; }

Label parse_label(const std::string& s) {
  if (s == "attack") return Label::attack;
  if (s == "bonafide") return Label::bonafide;
  throw std::invalid_argument("unknown label '" + s + "' (attack|bonafide)");
}

const char* lens_class_name(LensClass c) {
  switch (c) {
    case LensClass::normal: return "normal";
    case LensClass::soft: return "soft";
    case LensClass::textured: return "textured";
    case LensClass::print: return "print";
    case LensClass::scan: return "scan";
  }
  return "?";
}

const std::vector<LensClass>& all_lens_classes() {
  static const std::vector<LensClass> all{LensClass::normal, LensClass::soft, LensClass::textured, LensClass::print,
                                          LensClass::scan};
  return all;
}

LensClass parse_lens_class(const std::string& s) {
  for (auto c : all_lens_classes())
    if (s == lens_class_name(c)) return c;
  throw std::invalid_argument("unknown lens_class '" + s + "'");
}

Label label_for(LensClass c, const RelabelPolicy& policy) {
  switch (c) {
    case LensClass::normal: return Label::bonafide;
    case LensClass::soft: return policy.soft_lens_as;
    default: return Label::attack;
  }
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

Split parse_split(const std::string& s, std::size_t row) {
  if (s.empty() || s == "unassigned") return Split::unassigned;
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw std::invalid_argument("manifest row " + std::to_string(row) + ": unknown split '" + s + "'");
}

const char* split_name(Split s) {
  return s == Split::train ? "train" : s == Split::test ? "test" : "unassigned";
}

}  // namespace

std::vector<SampleRecord> load_manifest(const std::string& path, const RelabelPolicy& policy, bool check_files) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest '" + path + "'");
  const fs::path base = fs::path(path).parent_path();
  std::string line;
  std::vector<SampleRecord> records;
  if (!std::getline(in, line)) return records;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv(line);
  const bool has_split = header.size() == 5 && header[4] == "split";
  if (!(header.size() == 4 || has_split) || header[0] != "path" || header[1] != "lens_class" ||
      header[2] != "sensor" || header[3] != "dataset")
    throw std::invalid_argument("manifest '" + path + "': header must be path,lens_class,sensor,dataset[,split]");

  std::vector<std::string> missing;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size())
      throw std::invalid_argument("manifest row " + std::to_string(row) + ": expected " +
                                  std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
    SampleRecord r;
    fs::path p(cells[0]);
    r.path = (p.is_absolute() ? p : base / p).lexically_normal().string();
    try {
      r.lens_class = parse_lens_class(cells[1]);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("manifest row " + std::to_string(row) + ": " + e.what());
    }
    r.label = label_for(r.lens_class, policy);
    r.sensor = cells[2];
    r.dataset = cells[3];
    if (has_split) r.split = parse_split(cells[4], row);
    if (check_files && !fs::exists(r.path)) missing.push_back(r.path);
    records.push_back(std::move(r));
  }
  if (!missing.empty()) {
    std::string msg = "manifest '" + path + "' references " + std::to_string(missing.size()) + " missing file(s):";
    for (const auto& m : missing) msg += "\n  " + m;
    throw std::runtime_error(msg);
  }
  return records;
}

void write_manifest(const std::string& path, const std::vector<SampleRecord>& records, const std::string& base_dir) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest '" + path + "'");
  const bool with_split =
      std::any_of(records.begin(), records.end(), [](const SampleRecord& r) { return r.split != Split::unassigned; });
  out << "path,lens_class,sensor,dataset" << (with_split ? ",split" : "") << "\n";
  for (const auto& r : records) {
    std::string p = base_dir.empty() ? r.path : fs::path(r.path).lexically_relative(base_dir).string();
    out << p << ',' << lens_class_name(r.lens_class) << ',' << r.sensor << ',' << r.dataset;
    if (with_split) out << ',' << split_name(r.split);
    out << "\n";
  }
}

// ---------------------------------------------------------------------------

const char* protocol_name(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::intra: return "intra";
    case ProtocolKind::inter: return "inter";
    case ProtocolKind::combined: return "combined";
    case ProtocolKind::cross_database: return "cross_database";
    case ProtocolKind::incremental: return "incremental";
    case ProtocolKind::lens_detection: return "lens_detection";
  }
  return "?";
}

ProtocolKind parse_protocol(const std::string& s) {
  for (auto k : {ProtocolKind::intra, ProtocolKind::inter, ProtocolKind::combined, ProtocolKind::cross_database,
                 ProtocolKind::incremental, ProtocolKind::lens_detection})
    if (s == protocol_name(k)) return k;
  throw std::invalid_argument("unknown protocol '" + s +
                              "' (intra|inter|combined|cross_database|incremental|lens_detection)");
}

void validate(const ProtocolSpec& spec) {
  switch (spec.kind) {
    case ProtocolKind::intra:
      if (spec.train_sensors.size() != 1) throw std::invalid_argument("intra protocol needs exactly one sensor");
      break;
    case ProtocolKind::inter:
    case ProtocolKind::cross_database: {
      if (spec.train_sensors.empty() || spec.test_sensors.empty())
        throw std::invalid_argument(std::string(protocol_name(spec.kind)) + " protocol needs train and test sensors");
      for (const auto& s : spec.test_sensors)
        if (std::find(spec.train_sensors.begin(), spec.train_sensors.end(), s) != spec.train_sensors.end())
          throw std::invalid_argument("sensor '" + s + "' is on both sides of the protocol");
      break;
    }
    case ProtocolKind::incremental:
      if (spec.checkpoint.empty()) throw std::invalid_argument("incremental protocol needs a checkpoint path");
      break;
    default:
      break;
  }
  if (spec.test_subsample < 0) throw std::invalid_argument("test subsample must be >= 0");
}

SplitResult stratified_holdout(const std::vector<SampleRecord>& records, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("holdout fraction must be in (0,1)");
  std::map<std::pair<std::string, int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < records.size(); ++i)
    groups[{records[i].sensor, static_cast<int>(records[i].label) * 16 + static_cast<int>(records[i].lens_class)}]
        .push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> dealt;
  for (auto& [key, idx] : groups) {
    std::shuffle(idx.begin(), idx.end(), rng);
    dealt.insert(dealt.end(), idx.begin(), idx.end());
  }
  // Deal the concatenation so that every prefix keeps the train share, carrying remainders across groups.
  SplitResult out;
  double owed = 0.0;
  for (std::size_t i : dealt) {
    owed += train_fraction;
    if (owed >= 0.5) {
      out.train.push_back(records[i]);
      owed -= 1.0;
    } else {
      out.test.push_back(records[i]);
    }
  }
  return out;
}

SplitResult make_protocol_splits(const std::vector<SampleRecord>& records, const ProtocolSpec& spec) {
  validate(spec);
  std::set<std::string> known;
  for (const auto& r : records) known.insert(r.sensor);
  for (const auto* list : {&spec.train_sensors, &spec.test_sensors})
    for (const auto& s : *list)
      if (!known.count(s)) throw std::invalid_argument("protocol names unknown sensor '" + s + "'");

  auto in = [](const std::vector<std::string>& list, const std::string& v) {
    return list.empty() || std::find(list.begin(), list.end(), v) != list.end();
  };
  std::vector<SampleRecord> pool;
  for (const auto& r : records) {
    if (!in(spec.datasets, r.dataset)) continue;
    if (spec.kind == ProtocolKind::lens_detection && (r.lens_class == LensClass::print || r.lens_class == LensClass::scan))
      continue;
    pool.push_back(r);
  }

  SplitResult out;
  switch (spec.kind) {
    case ProtocolKind::intra:
    case ProtocolKind::combined:
    case ProtocolKind::incremental:
    case ProtocolKind::lens_detection: {
      std::vector<SampleRecord> chosen;
      for (const auto& r : pool)
        if (in(spec.train_sensors, r.sensor)) chosen.push_back(r);
      const bool provided = std::any_of(chosen.begin(), chosen.end(),
                                        [](const SampleRecord& r) { return r.split != Split::unassigned; });
      if (provided) {
        for (const auto& r : chosen) {
          if (r.split == Split::train) out.train.push_back(r);
          else if (r.split == Split::test) out.test.push_back(r);
        }
      } else {
        out = stratified_holdout(chosen, 0.5, spec.seed);
      }
      break;
    }
    case ProtocolKind::inter:
    case ProtocolKind::cross_database:
      for (const auto& r : pool) {
        if (in(spec.train_sensors, r.sensor)) out.train.push_back(r);
        else if (in(spec.test_sensors, r.sensor)) out.test.push_back(r);
      }
      break;
  }
  if (spec.test_subsample > 0 && static_cast<std::size_t>(spec.test_subsample) < out.test.size()) {
    std::mt19937_64 rng(mix_seed(spec.seed, 0x5ab5));
    std::vector<std::size_t> idx(out.test.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(spec.test_subsample));
    std::sort(idx.begin(), idx.end());
    std::vector<SampleRecord> kept;
    for (auto i : idx) kept.push_back(out.test[i]);
    out.test = std::move(kept);
  }
  if (out.train.empty()) throw std::invalid_argument(std::string(protocol_name(spec.kind)) + " protocol: empty training side");
  if (out.test.empty()) throw std::invalid_argument(std::string(protocol_name(spec.kind)) + " protocol: empty test side");
  return out;
}

// ---------------------------------------------------------------------------

int lens_index(LensClass c) {
  switch (c) {
    case LensClass::normal: return 0;
    case LensClass::soft: return 1;
    case LensClass::textured: return 2;
    default: throw std::invalid_argument(std::string("lens detection has no class for '") + lens_class_name(c) + "'");
  }
}

const std::vector<std::string>& lens_task_classes() {
  static const std::vector<std::string> names{"normal", "soft", "textured"};
  return names;
}

LabeledSet load_set(const std::vector<SampleRecord>& records, TaskLabels task, int image_size) {
  LabeledSet set;
  const auto per = static_cast<std::size_t>(image_size) * image_size * 3;
  Tensor images = Tensor::zeros({static_cast<std::int64_t>(std::max<std::size_t>(records.size(), 1)), image_size,
                                 image_size, 3});
  auto dst = images.mutable_data<float>();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Tensor img = decode_and_resize(records[i].path, image_size, image_size);
    std::copy(img.data<float>().begin(), img.data<float>().end(), dst.begin() + static_cast<std::ptrdiff_t>(i * per));
    set.labels.push_back(task == TaskLabels::pad ? static_cast<int>(records[i].label) : lens_index(records[i].lens_class));
    set.sensors.push_back(records[i].sensor);
  }
  set.images = images;
  return set;
}

Tensor gather_images(const LabeledSet& set, const std::vector<std::size_t>& idx) {
  const auto h = set.images.dim(1), w = set.images.dim(2), c = set.images.dim(3);
  const auto per = static_cast<std::size_t>(h * w * c);
  Tensor out = Tensor::zeros({static_cast<std::int64_t>(idx.size()), h, w, c}, DType::f32);
  auto src = set.images.data<float>();
  auto dst = out.mutable_data<float>();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= set.size()) throw std::out_of_range("gather_images: index past end of set");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                dst.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace dfca
