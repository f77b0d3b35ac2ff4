#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dfca/tensor.hpp"

namespace dfca {

enum class Label { bonafide = 0, attack = 1 };
enum class LensClass { normal, soft, textured, print, scan };
enum class Split { unassigned, train, test };

const char* label_name(Label l);
const char* lens_class_name(LensClass c);
LensClass parse_lens_class(const std::string& s);  // throws on unknown names
Label parse_label(const std::string& s);
const std::vector<LensClass>& all_lens_classes();

struct SampleRecord {
  std::string path;  // resolved against the manifest directory
  Label label = Label::bonafide;
  LensClass lens_class = LensClass::normal;
  std::string sensor;
  std::string dataset;
  Split split = Split::unassigned;
};

struct RelabelPolicy {
  Label soft_lens_as = Label::attack;
};

Label label_for(LensClass c, const RelabelPolicy& policy);

/// Header: path,lens_class,sensor,dataset[,split]. Relative paths are taken
/// from the manifest's directory. All referenced files must exist unless
/// check_files is false.
std::vector<SampleRecord> load_manifest(const std::string& path, const RelabelPolicy& policy,
                                        bool check_files = true);
void write_manifest(const std::string& path, const std::vector<SampleRecord>& records,
                    const std::string& base_dir = "");

// ---------------------------------------------------------------------------
// Images

/// Interleaved 8-bit pixels, channels 1 (gray) or 3 (RGB).
struct Image8 {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

/// PNG (via libpng) or uncompressed BMP (8-bit palette or 24-bit); chosen by signature.
Image8 read_image(const std::string& path);
void write_png(const std::string& path, const Image8& img);
void write_bmp(const std::string& path, const Image8& img);

/// [H,W,3] f32 in [0,1]; gray is replicated, then bilinear (half-pixel centers) resize.
Tensor to_tensor_resized(const Image8& img, int out_h, int out_w);
Tensor decode_and_resize(const std::string& path, int out_h = 224, int out_w = 224);

struct AugmentConfig {
  double shift_fraction = 0.1;
  double shear_degrees = 10.0;
  std::uint64_t seed = 0;
};

/// Inverse-mapped affine warp of an [H,W,C] image with zero fill: output (x, y)
/// reads input (x - tx - tan(shear) * (y - cy), y - ty) bilinearly.
Tensor affine_warp(const Tensor& img, double tx, double ty, double shear_degrees);

/// Random translation within +-shift_fraction of each extent and shear within
/// +-shear_degrees, drawn from (cfg.seed, per_sample_seed).
Tensor augment(const Tensor& img, const AugmentConfig& cfg, std::uint64_t per_sample_seed);

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// ---------------------------------------------------------------------------
// Protocols

enum class ProtocolKind { intra, inter, combined, cross_database, incremental, lens_detection };
const char* protocol_name(ProtocolKind k);
ProtocolKind parse_protocol(const std::string& s);

struct ProtocolSpec {
  ProtocolKind kind = ProtocolKind::intra;
  std::vector<std::string> train_sensors;  // empty means every sensor where a union is taken
  std::vector<std::string> test_sensors;
  std::vector<std::string> datasets;       // restricts rows for every kind when non-empty
  RelabelPolicy policy;
  std::string checkpoint;                  // incremental: model to fine-tune
  std::int64_t test_subsample = 0;         // 0 keeps every test row
  std::uint64_t seed = 0;
};

void validate(const ProtocolSpec& spec);

struct SplitResult {
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> test;
};

/// intra: one sensor, provided split column or seeded stratified 50/50 holdout.
/// inter / cross_database: train sensors vs test sensors, which must not overlap.
/// combined, incremental, lens_detection: holdout over the union of the named sensors.
/// lens_detection drops print and scan rows.
SplitResult make_protocol_splits(const std::vector<SampleRecord>& records, const ProtocolSpec& spec);

/// Stratified by (sensor, label): groups are shuffled with seed and dealt
/// alternately, so the first part gets ceil(n * fraction) rows per interleave.
SplitResult stratified_holdout(const std::vector<SampleRecord>& records, double train_fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Decoded sets

enum class TaskLabels { pad, lens };

/// Lens-detection class index: normal 0, soft 1, textured 2.
int lens_index(LensClass c);
const std::vector<std::string>& lens_task_classes();

struct LabeledSet {
  Tensor images;  // [N,S,S,3] f32
  std::vector<int> labels;
  std::vector<std::string> sensors;
  std::size_t size() const { return labels.size(); }
};

LabeledSet load_set(const std::vector<SampleRecord>& records, TaskLabels task, int image_size);
/// Rows idx of the set, copied into a fresh batch tensor.
Tensor gather_images(const LabeledSet& set, const std::vector<std::size_t>& idx);
/// Deterministic permutation for an epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

// ---------------------------------------------------------------------------
// Synthetic iris-like data

struct SynthConfig {
  std::uint64_t seed = 7;
  int image_size = 64;
  std::vector<std::string> sensors{"synA", "synB"};
  std::string dataset = "synthetic";
  // bonafide texture
  double ring_freq_lo = 6.0, ring_freq_hi = 14.0;
  double radial_noise = 0.06;
  // textured lens
  int lattice_period = 4;
  double lattice_contrast = 0.22;
  // soft lens
  double film_alpha = 0.28;
  // print / scan
  int halftone_period = 3;
  double blur_sigma = 1.0;
};

/// Counts are per sensor and per class in the order normal, soft, textured, print, scan.
/// Writes <out>/<sensor>/<class>/<index>.png and <out>/manifest.csv; returns the records.
std::vector<SampleRecord> synth_generate(const SynthConfig& cfg, const std::vector<int>& counts,
                                         const std::string& out_dir);
/// One image, exposed for inspection.
Image8 synth_image(const SynthConfig& cfg, LensClass cls, std::size_t sensor_index, std::uint64_t sample_seed);

}  // namespace dfca
