#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>

#include "fvae/autodiff.hpp"

namespace fvae {

struct AdamConfig {
  float learning_rate = 0.0003f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;

  bool operator==(const AdamConfig&) const = default;
};

struct AdamMoments {
  Tensor m;
  Tensor v;
};

struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::map<std::string, AdamMoments> moments;  // keyed by parameter name
};

// Bias-corrected Adam update driven by each parameter's grad. Every gradient is
// checked before any value changes, so a rejected step leaves params and state
// untouched.
void adam_step(std::span<Parameter<float>* const> params, AdamState& state);

// Clamps every component into [-threshold, threshold].
void clip_gradients(std::span<Parameter<float>* const> params, float threshold);
void clip_values(std::span<float> values, float threshold);

// Normal(0, stddev) resampled until inside +-2 stddev.
template <typename T>
BasicTensor<T> truncated_normal(Shape shape, T stddev, std::mt19937_64& rng) {
  BasicTensor<T> out(std::move(shape));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v;
    do {
      v = normal(rng);
    } while (std::abs(v) > 2.0);
    out[i] = static_cast<T>(v * static_cast<double>(stddev));
  }
  return out;
}

}  // namespace fvae
