#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fvae/autodiff.hpp"
#include "fvae/errors.hpp"

namespace fvae {

// Absolute sampling positions in normalized coordinates: coords is H x W x 2
// holding (x, y), where -1 maps to the first source pixel and +1 to the last.
struct FlowField {
  Tensor coords;

  FlowField() = default;
  explicit FlowField(Tensor c);

  std::size_t height() const { return coords.dim(0); }
  std::size_t width() const { return coords.dim(1); }
  float x(std::size_t row, std::size_t col) const { return coords.at(row, col, 0); }
  float y(std::size_t row, std::size_t col) const { return coords.at(row, col, 1); }
};

// Normalized coordinate of pixel index i on an axis of the given extent.
double pixel_to_normalized(double i, std::size_t extent);

FlowField identity_flow(std::size_t height, std::size_t width);

// Sample n of an [N, 2, H, W] network output, and the inverse packing.
FlowField flow_from_batch(const Tensor& flows, std::size_t n);
Tensor flows_to_batch(std::span<const FlowField> flows);

// H x W x 2 absolute pixel coordinates: (x + 1) / 2 * (extent - 1).
Tensor denormalize_flow(const FlowField& flow, std::size_t src_width, std::size_t src_height);

// Bilinear warp of a CHW source by flow; output is C x flow.height x flow.width.
// Positions outside the source are clamped to the border.
Tensor bilinear_sample(const Tensor& source, const FlowField& flow);

// Batched, differentiable form: source [N, C, H, W], flow [N, 2, H', W'].
template <typename T>
Var bilinear_sample(Graph<T>& g, Var source, Var flow);

// Corner-aligned bilinear resampling of the normalized field onto a grid
// factor times larger in each direction.
FlowField upsample_flow(const FlowField& flow, int factor);

// Flow file: f32 magic 202021.25, i32 width, i32 height, then per pixel
// (dx, dy) f32 displacements in pixels, all little-endian.
inline constexpr float kFlowMagic = 202021.25f;

std::vector<std::uint8_t> encode_flow(const FlowField& flow, std::size_t src_width,
                                      std::size_t src_height);
FlowField decode_flow(std::span<const std::uint8_t> bytes, std::size_t src_width,
                      std::size_t src_height);
void export_flow(const FlowField& flow, std::size_t src_width, std::size_t src_height,
                 const std::filesystem::path& path);
FlowField import_flow(const std::filesystem::path& path, std::size_t src_width,
                      std::size_t src_height);

}  // namespace fvae
