#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fvae/errors.hpp"
#include "fvae/tensor.hpp"

namespace fvae {

// 8-bit image, channel-interleaved rows (1 channel = gray, 3 = RGB).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  bool operator==(const Image8&) const = default;
};

// Binary PGM (P5) / PPM (P6), maxval 255.
std::vector<std::uint8_t> encode_pnm(const Image8& image);
Image8 decode_pnm(std::span<const std::uint8_t> bytes);
Image8 read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image8& image);

// x / 127.5 - 1, as CHW.
Tensor normalize(const Image8& image);
// Inverse of normalize: round to nearest, clamp to [0, 255].
Image8 denormalize(const Tensor& chw);

}  // namespace fvae
