#pragma once

// Binary checkpoint format shared by every model (all integers little-endian):
//
//   "MT4C" | u32 version=1 | u32 tensor_count
//   per tensor: u16 name_len | name bytes (UTF-8) | u8 rank | u32 dims[rank]
//               | f32 values (row-major)
//   u32 CRC-32 of every preceding byte
//
// The configuration fingerprint travels as the tensor "meta.fingerprint",
// shape [8], holding the fingerprint's little-endian bytes as float values.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mamt4/models.hpp"

namespace mamt4 {

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct CheckpointData {
  std::uint64_t fingerprint = 0;
  std::vector<NamedTensor> tensors;  // excludes meta.fingerprint
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kFingerprintTensor = "meta.fingerprint";

std::vector<std::uint8_t> encode_checkpoint(const ModelState& state);
CheckpointData decode_checkpoint(const std::vector<std::uint8_t>& bytes);

// Writes the parameters of state into the matching tensors of target after
// checking fingerprint, names and shapes.
void apply_checkpoint(const CheckpointData& data, ModelState& target);
// ModelState with the checkpoint's tensors as plain (trainable) parameters.
ModelState state_from_checkpoint(const CheckpointData& data);

void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
CheckpointData read_checkpoint(const std::filesystem::path& path);
void load_checkpoint(ModelState& target, const std::filesystem::path& path);

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size);

}  // namespace mamt4
