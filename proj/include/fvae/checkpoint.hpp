#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fvae/train.hpp"

namespace fvae {

// "FVAE", u32 version, length-prefixed JSON header (configs, counters, RNG
// and early-stopping state), u32 tensor count, then per tensor a
// length-prefixed name, u8 rank, u32 dims and little-endian f32 data.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(TrainingState& state);
// Throws ParseError on any malformed, truncated or mismatched input.
TrainingState decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(TrainingState& state, const std::filesystem::path& path);
TrainingState load_checkpoint(const std::filesystem::path& path);

}  // namespace fvae
