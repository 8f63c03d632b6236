#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fvae/autodiff.hpp"
#include "fvae/layers.hpp"
#include "fvae/losses.hpp"

namespace fvae {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t channels = 1;
  // One stride-2 stage per entry; the latent block is image_size >> stages.
  std::vector<std::size_t> widths{16, 32, 64, 128};
  std::size_t latent_channels = 32;
  float init_stddev = 0.01f;
  // Decoder flow head returns the exact identity grid (for tests and tools).
  bool force_identity_flow = false;

  void validate() const;
  std::size_t stages() const { return widths.size(); }
  std::size_t latent_extent() const { return image_size >> widths.size(); }
  Shape latent_shape(std::size_t batch) const {
    return {batch, latent_channels, latent_extent(), latent_extent()};
  }
  Shape image_shape(std::size_t batch) const { return {batch, channels, image_size, image_size}; }

  static ModelConfig full_scale();

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct NamedBatchNorm {
  Parameter<T> gamma;
  Parameter<T> beta;
  nn::BatchNormState<T> state;
};

// Parameters and batch-norm state of every network, keyed by name. Iteration
// order is the name order, which fixes the order of every reduction over them.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(const std::string& name, BasicTensor<T> value);
  NamedBatchNorm<T>& add_batch_norm(const std::string& name, std::size_t channels);

  Parameter<T>& param(const std::string& name);
  NamedBatchNorm<T>& batch_norm(const std::string& name);

  // Trainable tensors (including batch-norm affine terms) whose name starts with prefix.
  std::vector<Parameter<T>*> trainable(const std::string& prefix = "");

  // Every tensor that defines the model, running statistics included.
  std::map<std::string, BasicTensor<T>*> tensors();

 private:
  std::map<std::string, Parameter<T>> params_;
  std::map<std::string, NamedBatchNorm<T>> norms_;
};

enum class Binding { trainable, frozen };

template <typename T>
struct EncoderOutput {
  Var mu;
  Var log_var;
};

// Encoder f, flow decoder g (with its own source branch) and the confidence
// mask network M. Networks are addressed by parameter prefix: "encoder.",
// "decoder." and "mask.".
template <typename T>
class FlowModel {
 public:
  explicit FlowModel(ModelConfig config, std::uint64_t seed = 1);

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& params() { return params_; }

  // target [N, C, S, S] -> mu, log_var [N, latent_channels, L, L]
  EncoderOutput<T> encode(Graph<T>& g, Var target, nn::Mode mode, Binding binding);

  // source [N, C, S, S], z latent -> flows [N, 2, S, S] in (-1, 1)
  Var decode_flow(Graph<T>& g, Var source, Var z, nn::Mode mode, Binding binding);

  // source, z -> confidence [N, 1, S, S] in (0, 1)
  Var predict_mask(Graph<T>& g, Var source, Var z, nn::Mode mode, Binding binding);

 private:
  Var bind(Graph<T>& g, Parameter<T>& p, Binding binding);
  Var conv(Graph<T>& g, Var x, const std::string& name, std::size_t stride, Binding binding,
           bool bias);
  Var conv_bn_relu(Graph<T>& g, Var x, const std::string& name, const std::string& bn_name,
                   std::size_t stride, nn::Mode mode, Binding binding);
  void check_image(Graph<T>& g, Var image, const char* what) const;
  Var decoder(Graph<T>& g, const std::string& net, Var source, Var z, nn::Mode mode,
              Binding binding);
  void add_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                bool bias, std::mt19937_64& rng);
  void add_decoder(const std::string& net, std::size_t head_channels, std::mt19937_64& rng);

  ModelConfig config_;
  ParameterSet<T> params_;
};

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;
extern template class FlowModel<float>;
extern template class FlowModel<double>;

// Result of one encode (mu, log_var) plus the sample drawn from it.
struct LatentCode {
  Tensor mu;
  Tensor log_var;
  Tensor z;
};

struct Decoded {
  Tensor flows;   // [N, 2, S, S]
  Tensor warped;  // [N, C, S, S]
};

// Inference-mode conveniences on float models (running batch-norm statistics,
// no gradients). Rank-3 images are treated as a batch of one.
LatentCode encode(FlowModel<float>& model, const Tensor& target);
Decoded decode(FlowModel<float>& model, const Tensor& source, const Tensor& z);
Tensor predict_mask(FlowModel<float>& model, const Tensor& source, const Tensor& z);

// z = mu + exp(log_var / 2) * eps with eps ~ N(0, I) drawn from rng.
Tensor reparameterize(const Tensor& mu, const Tensor& log_var, std::mt19937_64& rng);
Tensor standard_normal(Shape shape, std::mt19937_64& rng);

}  // namespace fvae
