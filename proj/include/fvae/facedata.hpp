#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "fvae/tensor.hpp"

namespace fvae {

enum class Expression { neutral, smile, disgust, squint, surprise };

inline constexpr std::array<Expression, 5> kExpressions{
    Expression::neutral, Expression::smile, Expression::disgust, Expression::squint,
    Expression::surprise};

std::string_view to_string(Expression e);
Expression parse_expression(std::string_view name);

struct Identity {
  float face_radius = 0.37f;
  float eye_spacing = 0.30f;
  float eye_height = 0.41f;
  float skin_tone = 0.68f;
};

struct FaceParams {
  Identity identity;
  Expression expression = Expression::neutral;
  float intensity = 1.0f;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

// Valid identity ranges, in canvas units ([0, 1] across the image).
struct IdentityRanges {
  static constexpr float face_radius_min = 0.34f, face_radius_max = 0.40f;
  static constexpr float eye_spacing_min = 0.26f, eye_spacing_max = 0.34f;
  static constexpr float eye_height_min = 0.38f, eye_height_max = 0.44f;
  static constexpr float skin_tone_min = 0.50f, skin_tone_max = 0.85f;
};

Identity random_identity(std::mt19937_64& rng);

// Anti-aliased face as a CHW tensor in [-1, 1], quantized to 8-bit levels so
// that writing it as PGM/PPM and normalizing again is lossless.
Tensor render_face(const FaceParams& params, std::size_t size, std::size_t channels = 1);

// 1 where the open mouth shows its interior (the region a closed mouth
// hides), else 0; 1 x size x size.
Tensor mouth_interior_mask(const FaceParams& params, std::size_t size);

struct FaceImage {
  int identity = 0;
  Expression label = Expression::neutral;
  Tensor pixels;  // CHW in [-1, 1]
};

struct FacePair {
  std::size_t source;  // indices into FacePairSet::images
  std::size_t target;
};

struct FacePairSet {
  std::vector<FaceImage> images;
  std::vector<FacePair> pairs;

  std::vector<int> identities() const;
  const FaceImage& source(std::size_t pair) const { return images[pairs[pair].source]; }
  const FaceImage& target(std::size_t pair) const { return images[pairs[pair].target]; }
};

struct DatasetSplit {
  FacePairSet train;
  FacePairSet test;
};

// All ordered (source, target) expression pairs within each identity, with
// identities split train/test by a seeded shuffle. Needs >= 5 identities.
DatasetSplit build_pairs(std::vector<FaceImage> images, std::uint64_t split_seed,
                         double train_fraction = 0.8);

// All pairs of a set of images without splitting.
FacePairSet all_pairs(std::vector<FaceImage> images);

struct SynthConfig {
  int identities = 20;
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::uint64_t seed = 1;

  bool operator==(const SynthConfig&) const = default;
};

std::vector<Identity> synth_identities(const SynthConfig& config);
std::vector<FaceImage> render_dataset(const SynthConfig& config);

// Per-channel affine map matching source mean/std to target's, clamped to
// [lo, hi]. A near-constant source channel is only mean-shifted.
Tensor color_transfer(const Tensor& source, const Tensor& target, float lo = -1.0f,
                      float hi = 1.0f);

Tensor hflip(const Tensor& chw);

struct ImagePair {
  Tensor source;
  Tensor target;
};

// With probability 1/2 flips both images.
ImagePair hflip_augment(ImagePair pair, std::mt19937_64& rng);

struct ManifestRecord {
  int identity = 0;
  Expression source_label = Expression::neutral;
  Expression target_label = Expression::neutral;
  std::filesystem::path source_path;
  std::filesystem::path target_path;

  bool operator==(const ManifestRecord&) const = default;
};

// Tab-separated: identity, source label, target label, source path, target path.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

// Loads every image a manifest references (paths relative to the manifest's
// directory) into a pair set.
FacePairSet load_manifest_pairs(const std::filesystem::path& manifest);

}  // namespace fvae
