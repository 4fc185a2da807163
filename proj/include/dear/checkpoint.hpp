#pragma once

// Binary checkpoint: "DEAR", u32 version, u32 tensor count, then per tensor
// u16 name length, name bytes, u8 dtype (0 = f64), u8 rank, u64 dims and a
// little-endian f64 payload. Tensors are written in sorted name order. A
// trailing u64 length + UTF-8 JSON blob carries the run configuration.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>

#include "dear/tensor.hpp"

namespace dear {

struct Model;

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::string config_json;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
/// BadMagicError, VersionMismatchError or TruncatedError on malformed input.
Checkpoint read_checkpoint(std::istream& in);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Value copies of every named model tensor.
Checkpoint checkpoint_from_model(Model& model, std::string config_json);
/// Copies checkpoint values into the model. CheckpointError on a missing
/// tensor, ShapeError on a dimension mismatch.
void apply_checkpoint(Model& model, const Checkpoint& ckpt);

}  // namespace dear
