#pragma once

#include <string>
#include <utility>
#include <vector>

#include "csft/tensor.hpp"

namespace csft {

// Flat named-tensor container, format version 1:
//   magic "CSFTCKPT" | u32 version | u32 entry count
//   per entry: u32 name length | name bytes | u32 ndim | u32 dims[ndim]
//              | f32 data[prod(dims)]
// All integers and floats little-endian. Values are stored as 32-bit floats,
// so a save/load round trip quantizes doubles to f32.

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<CheckpointEntry> load_checkpoint(const std::string& path);

// Writes the container after an arbitrary text header line (used by model
// files that carry a manifest); `header` must not contain newlines.
void save_checkpoint_with_header(const std::string& path, const std::string& header,
                                 const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<CheckpointEntry> load_checkpoint_with_header(const std::string& path,
                                                         std::string& header_out);

// Copies entries into matching tensors by name; throws on any missing,
// extra, or shape-mismatched entry.
void apply_checkpoint(const std::vector<CheckpointEntry>& entries,
                      const std::vector<std::pair<std::string, Tensor>>& tensors);

}  // namespace csft
