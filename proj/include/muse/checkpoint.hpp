#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "muse/model.hpp"

namespace muse {

// Layout, all integers little-endian:
//   "MUSECKPT" | u32 version | u32 n, n bytes of config text
//   | u32 records | per record: u32 len, name | u32 ndim, u64 dims | f32 data
inline constexpr std::string_view kCheckpointMagic = "MUSECKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct CheckpointFile {
  std::uint32_t version = kCheckpointVersion;
  ModelConfig config;
  std::vector<CheckpointRecord> records;
};

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const ModelConfig& cfg, const ModelParams<T>& params);
CheckpointFile decode_checkpoint(const std::vector<std::uint8_t>& bytes);

template <typename T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams<T>& params);
CheckpointFile read_checkpoint(const std::string& path);

// Rebuilds parameters from a checkpoint; every parameter of the configured
// model must be present with a matching shape, and nothing else.
template <typename T>
ModelParams<T> params_from_checkpoint(const CheckpointFile& ckpt);

}  // namespace muse
