#pragma once

// Binary tensor bundles: "DLM2", u32 version, u32 count, then per tensor
// u32 name length, name bytes, u32 rank, u64 dims, f32 little-endian payload.
// Values are narrowed to float on save, so a load/save cycle is bit-exact
// only from the second save onward.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dlm2/tensor.hpp"

namespace dlm2 {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedTensor> tensors);
std::vector<NamedTensor> decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace dlm2
