#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "khn/config.hpp"
#include "khn/model.hpp"

namespace khn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (all integers little-endian):
//   "KHNCKPT\0" | u32 version | u64 n + n bytes config JSON
//   | u32 rank + u64 dims (input shape)
//   | u32 count | count x (u32 n + name, u32 rank + u64 dims, u64 offset)
//   | u64 payload bytes | float64 payload, row-major, in manifest order
struct Checkpoint {
  RunConfig config;
  Shape input_shape;
  Model model;
};

std::string encode_checkpoint(const RunConfig& config, const Shape& input_shape, const Model& model);
// Throws IncompatibleCheckpointError on a version mismatch and
// CheckpointError on anything malformed or truncated.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const Shape& input_shape,
                     const Model& model);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace khn
