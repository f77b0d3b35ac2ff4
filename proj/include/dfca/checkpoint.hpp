#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dfca/nn.hpp"

namespace dfca {

class DFCANet;

/// On-disk layout (little endian):
///   "DFCA" u32 version u32 count
///   per entry: u32 name_len, name, u32 rank, u64 extents[rank], u8 dtype (0 f32, 1 f64), raw values
inline constexpr std::uint32_t kCheckpointVersion = 1;

using TensorEntries = std::vector<std::pair<std::string, Tensor>>;

void write_checkpoint(const std::string& path, const TensorEntries& entries);
void write_checkpoint(const std::string& path, const TensorList& tensors);
TensorEntries read_checkpoint(const std::string& path);

/// Byte-level variants used by the file functions.
std::string encode_checkpoint(const TensorEntries& entries);
TensorEntries decode_checkpoint(const std::string& bytes);

/// A single tensor in the checkpoint container (count = 1).
void write_tensor_file(const std::string& path, const std::string& name, const Tensor& t);
Tensor read_tensor_file(const std::string& path, std::string* name = nullptr);

enum class LoadMode { strict, transfer };

struct LoadReport {
  std::vector<std::string> loaded;   // model tensors whose values came from the checkpoint
  std::vector<std::string> skipped;  // model tensors left as initialized
  std::vector<std::string> unused;   // checkpoint entries with no home in the model
};

/// Strict: every model tensor must be present with an identical shape and no
/// extra entries are allowed. Transfer: tensors are grouped by module (name up
/// to the last '.'); a module is loaded only if all of its tensors are present
/// with matching shapes. only_prefix restricts loading to names with that prefix.
LoadReport load_into(const TensorList& target, const TensorEntries& entries, LoadMode mode,
                     const std::string& only_prefix = "");
LoadReport load_into(DFCANet& model, const TensorEntries& entries, LoadMode mode,
                     const std::string& only_prefix = "");

void save_model(const DFCANet& model, const std::string& path);

}  // namespace dfca
