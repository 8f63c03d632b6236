#pragma once

#include <optional>

#include "fvae/autodiff.hpp"

// Differentiable primitives recorded on a Graph. Image tensors are NCHW,
// convolution kernels are [out_channels, in_channels, k, k].
namespace fvae::nn {

enum class Padding { same, valid };
enum class Mode { train, infer };
enum class Activation { relu, tanh, sigmoid };

template <typename T>
struct BatchNormState {
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  T momentum = T(0.99);
  T epsilon = T(1e-5);

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               Padding padding);

template <typename T>
Var conv2d(Graph<T>& g, Var input, Var kernels, std::optional<Var> bias, std::size_t stride,
           Padding padding);

// Per-channel standardization over (N, H, W). Train mode uses batch statistics
// and folds them into state's running averages; infer mode uses the running
// averages. Train mode needs at least two samples.
template <typename T>
Var batch_norm(Graph<T>& g, Var x, Var gamma, Var beta, BatchNormState<T>& state, Mode mode);

// relu'(0) is taken as 0.
template <typename T>
Var activation(Graph<T>& g, Var x, Activation kind);

template <typename T>
Var add(Graph<T>& g, Var a, Var b);

template <typename T>
Var sub(Graph<T>& g, Var a, Var b);

template <typename T>
Var mul(Graph<T>& g, Var a, Var b);

template <typename T>
Var scale(Graph<T>& g, Var x, T factor);

template <typename T>
Var sum(Graph<T>& g, Var x);

template <typename T>
Var concat_channels(Graph<T>& g, Var a, Var b);

template <typename T>
Var upsample_nearest(Graph<T>& g, Var x, std::size_t factor);

// z = mu + exp(log_var / 2) * noise, with noise held constant.
template <typename T>
Var reparameterize(Graph<T>& g, Var mu, Var log_var, const BasicTensor<T>& noise);

}  // namespace fvae::nn
