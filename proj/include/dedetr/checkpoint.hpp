#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dedetr/tensor.hpp"

namespace dedetr {

// Checkpoint file layout (little-endian):
//   "DEDT" | u32 version=1 | u64 json_len | config json | u32 count | records
// each record: u32 name_len | name | u32 rank | rank x u64 dims | f32 data.
// Values are stored at f32, so a round-trip is exact at that precision.

struct TensorRecord {
  std::string name;
  Shape dims;
  std::vector<float> data;
};

void write_tensor_record(std::ostream& out, const TensorRecord& rec);
TensorRecord read_tensor_record(std::istream& in);  // throws IoError on truncation

struct Checkpoint {
  nlohmann::json config;
  std::vector<TensorRecord> tensors;
};

void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const std::vector<std::pair<std::string, Tensor>>& params);

Checkpoint load_checkpoint(const std::string& path);  // IoError on bad magic/version/truncation

// Copies records into params by name; any missing name or shape mismatch
// throws ShapeError. Every record must be consumed.
void restore_params(const Checkpoint& ck, std::vector<std::pair<std::string, Tensor>>& params);

}  // namespace dedetr
