#include "fvae/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fvae/optim.hpp"
#include "fvae/warp.hpp"

namespace fvae {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (image_size < 8 || (image_size & (image_size - 1)) != 0) {
    fail("image_size must be a power of two >= 8, got " + std::to_string(image_size));
  }
  if (channels != 1 && channels != 3) fail("channels must be 1 or 3");
  if (widths.empty()) fail("widths must name at least one stage");
  for (std::size_t w : widths)
    if (w == 0) fail("widths must be positive");
  if ((image_size >> widths.size()) == 0 || (image_size >> widths.size()) << widths.size() != image_size) {
    fail(std::to_string(widths.size()) + " stages do not divide image_size " +
         std::to_string(image_size));
  }
  if (latent_channels == 0) fail("latent_channels must be positive");
  if (!(init_stddev > 0.0f)) fail("init_stddev must be positive");
}

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.image_size = 128;
  c.channels = 3;
  c.widths = {64, 128, 256, 512, 1024};
  c.latent_channels = 1024;
  return c;
}

template <typename T>
Parameter<T>& ParameterSet<T>::add(const std::string& name, BasicTensor<T> value) {
  auto [it, inserted] = params_.try_emplace(name, name, std::move(value));
  if (!inserted) throw std::logic_error("duplicate parameter " + name);
  return it->second;
}

template <typename T>
NamedBatchNorm<T>& ParameterSet<T>::add_batch_norm(const std::string& name, std::size_t channels) {
  NamedBatchNorm<T> bn{Parameter<T>(name + ".gamma", BasicTensor<T>(Shape{channels}, T(1))),
                       Parameter<T>(name + ".beta", BasicTensor<T>(Shape{channels})),
                       nn::BatchNormState<T>(channels)};
  auto [it, inserted] = norms_.try_emplace(name, std::move(bn));
  if (!inserted) throw std::logic_error("duplicate batch norm " + name);
  return it->second;
}

template <typename T>
Parameter<T>& ParameterSet<T>::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter " + name);
  return it->second;
}

template <typename T>
NamedBatchNorm<T>& ParameterSet<T>::batch_norm(const std::string& name) {
  auto it = norms_.find(name);
  if (it == norms_.end()) throw std::out_of_range("no batch norm " + name);
  return it->second;
}

template <typename T>
std::vector<Parameter<T>*> ParameterSet<T>::trainable(const std::string& prefix) {
  std::map<std::string, Parameter<T>*> all;
  for (auto& [name, p] : params_) all[name] = &p;
  for (auto& [name, bn] : norms_) {
    all[bn.gamma.name] = &bn.gamma;
    all[bn.beta.name] = &bn.beta;
  }
  std::vector<Parameter<T>*> out;
  for (auto& [name, p] : all)
    if (name.starts_with(prefix)) out.push_back(p);
  return out;
}

template <typename T>
std::map<std::string, BasicTensor<T>*> ParameterSet<T>::tensors() {
  std::map<std::string, BasicTensor<T>*> out;
  for (auto& [name, p] : params_) out[name] = &p.value;
  for (auto& [name, bn] : norms_) {
    out[bn.gamma.name] = &bn.gamma.value;
    out[bn.beta.name] = &bn.beta.value;
    out[name + ".running_mean"] = &bn.state.running_mean;
    out[name + ".running_var"] = &bn.state.running_var;
  }
  return out;
}

template <typename T>
FlowModel<T>::FlowModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto& w = config_.widths;
  std::size_t in = config_.channels;
  for (std::size_t s = 0; s < w.size(); ++s) {
    add_conv("encoder.conv" + std::to_string(s), in, w[s], s == 0 ? 5 : 3, false, rng);
    params_.add_batch_norm("encoder.bn" + std::to_string(s), w[s]);
    in = w[s];
  }
  add_conv("encoder.mu", in, config_.latent_channels, 3, true, rng);
  add_conv("encoder.log_var", in, config_.latent_channels, 3, true, rng);
  add_decoder("decoder", 2, rng);
  add_decoder("mask", 1, rng);
}

template <typename T>
void FlowModel<T>::add_conv(const std::string& name, std::size_t in, std::size_t out,
                            std::size_t k, bool bias, std::mt19937_64& rng) {
  params_.add(name + ".kernel",
              truncated_normal<T>(Shape{out, in, k, k}, T(config_.init_stddev), rng));
  if (bias) params_.add(name + ".bias", BasicTensor<T>(Shape{out}));
}

template <typename T>
void FlowModel<T>::add_decoder(const std::string& net, std::size_t head_channels,
                               std::mt19937_64& rng) {
  const auto& w = config_.widths;
  const std::size_t d = w.size();
  std::size_t in = config_.channels;
  for (std::size_t s = 0; s < d; ++s) {
    add_conv(net + ".source.conv" + std::to_string(s), in, w[s], s == 0 ? 5 : 3, false, rng);
    params_.add_batch_norm(net + ".source.bn" + std::to_string(s), w[s]);
    in = w[s];
  }
  for (std::size_t s = d; s-- > 0;) {
    const std::size_t from = s + 1 == d ? config_.latent_channels : w[s + 1];
    add_conv(net + ".stage" + std::to_string(s), from + w[s], w[s], 3, false, rng);
    params_.add_batch_norm(net + ".stage_bn" + std::to_string(s), w[s]);
  }
  add_conv(net + ".refine", w[0] + config_.channels, w[0], 3, true, rng);
  add_conv(net + ".head", w[0], head_channels, 5, true, rng);
}

template <typename T>
Var FlowModel<T>::bind(Graph<T>& g, Parameter<T>& p, Binding binding) {
  return binding == Binding::trainable ? g.parameter(p) : g.constant(p.value);
}

template <typename T>
Var FlowModel<T>::conv(Graph<T>& g, Var x, const std::string& name, std::size_t stride,
                       Binding binding, bool bias) {
  const Var k = bind(g, params_.param(name + ".kernel"), binding);
  std::optional<Var> b;
  if (bias) b = bind(g, params_.param(name + ".bias"), binding);
  return nn::conv2d(g, x, k, b, stride, nn::Padding::same);
}

template <typename T>
Var FlowModel<T>::conv_bn_relu(Graph<T>& g, Var x, const std::string& name,
                               const std::string& bn_name, std::size_t stride, nn::Mode mode,
                               Binding binding) {
  auto& bn = params_.batch_norm(bn_name);
  const Var y = conv(g, x, name, stride, binding, false);
  const Var normed = nn::batch_norm(g, y, bind(g, bn.gamma, binding), bind(g, bn.beta, binding),
                                    bn.state, mode);
  return nn::activation(g, normed, nn::Activation::relu);
}

template <typename T>
void FlowModel<T>::check_image(Graph<T>& g, Var image, const char* what) const {
  const Shape& s = g.value(image).shape();
  if (s.size() != 4 || s[1] != config_.channels || s[2] != config_.image_size ||
      s[3] != config_.image_size) {
    throw std::invalid_argument(std::string(what) + ": expected " +
                                shape_string(config_.image_shape(s.empty() ? 1 : s[0])) + ", got " +
                                shape_string(s));
  }
}

template <typename T>
EncoderOutput<T> FlowModel<T>::encode(Graph<T>& g, Var target, nn::Mode mode, Binding binding) {
  check_image(g, target, "encode");
  Var x = target;
  for (std::size_t s = 0; s < config_.stages(); ++s) {
    x = conv_bn_relu(g, x, "encoder.conv" + std::to_string(s), "encoder.bn" + std::to_string(s), 2,
                     mode, binding);
  }
  return {conv(g, x, "encoder.mu", 1, binding, true),
          conv(g, x, "encoder.log_var", 1, binding, true)};
}

template <typename T>
Var FlowModel<T>::decoder(Graph<T>& g, const std::string& net, Var source, Var z, nn::Mode mode,
                          Binding binding) {
  check_image(g, source, net.c_str());
  const Shape expected = config_.latent_shape(g.value(source).dim(0));
  if (g.value(z).shape() != expected) {
    throw std::invalid_argument(net + ": latent must be " + shape_string(expected) + ", got " +
                                shape_string(g.value(z).shape()));
  }
  const std::size_t d = config_.stages();
  std::vector<Var> features;
  Var f = source;
  for (std::size_t s = 0; s < d; ++s) {
    f = conv_bn_relu(g, f, net + ".source.conv" + std::to_string(s),
                     net + ".source.bn" + std::to_string(s), 2, mode, binding);
    features.push_back(f);
  }
  Var x = z;
  for (std::size_t s = d; s-- > 0;) {
    if (s + 1 < d) x = nn::upsample_nearest(g, x, 2);
    x = nn::concat_channels(g, x, features[s]);
    x = conv_bn_relu(g, x, net + ".stage" + std::to_string(s), net + ".stage_bn" + std::to_string(s),
                     1, mode, binding);
  }
  x = nn::upsample_nearest(g, x, 2);
  x = nn::concat_channels(g, x, source);
  x = nn::activation(g, conv(g, x, net + ".refine", 1, binding, true), nn::Activation::relu);
  return conv(g, x, net + ".head", 1, binding, true);
}

template <typename T>
Var FlowModel<T>::decode_flow(Graph<T>& g, Var source, Var z, nn::Mode mode, Binding binding) {
  const std::size_t n = g.value(source).rank() == 4 ? g.value(source).dim(0) : 1;
  const std::size_t size = config_.image_size;
  if (config_.force_identity_flow) {
    check_image(g, source, "decoder");
    std::vector<FlowField> grids(n, identity_flow(size, size));
    return g.constant(flows_to_batch(grids).template cast<T>());
  }
  const Var h = decoder(g, "decoder", source, z, mode, binding);
  // The head predicts an offset in atanh space around the identity grid, so an
  // untrained decoder starts near the identity warp.
  BasicTensor<T> prior(Shape{n, 2, size, size});
  constexpr double kEdge = 1.0 - 1e-5;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t r = 0; r < size; ++r)
      for (std::size_t c = 0; c < size; ++c) {
        prior.at(b, 0, r, c) = T(std::atanh(std::clamp(pixel_to_normalized(double(c), size), -kEdge, kEdge)));
        prior.at(b, 1, r, c) = T(std::atanh(std::clamp(pixel_to_normalized(double(r), size), -kEdge, kEdge)));
      }
  return nn::activation(g, nn::add(g, h, g.constant(std::move(prior))), nn::Activation::tanh);
}

template <typename T>
Var FlowModel<T>::predict_mask(Graph<T>& g, Var source, Var z, nn::Mode mode, Binding binding) {
  return nn::activation(g, decoder(g, "mask", source, z, mode, binding), nn::Activation::sigmoid);
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class FlowModel<float>;
template class FlowModel<double>;

namespace {

Tensor as_batch(const Tensor& x) {
  if (x.rank() == 3) return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  return x;
}

}  // namespace

LatentCode encode(FlowModel<float>& model, const Tensor& target) {
  Graph<float> g;
  const auto out = model.encode(g, g.constant(as_batch(target)), nn::Mode::infer, Binding::frozen);
  return {g.value(out.mu), g.value(out.log_var), g.value(out.mu)};
}

Decoded decode(FlowModel<float>& model, const Tensor& source, const Tensor& z) {
  Graph<float> g;
  const Var s = g.constant(as_batch(source));
  const Var flows = model.decode_flow(g, s, g.constant(z), nn::Mode::infer, Binding::frozen);
  const Var warped = bilinear_sample(g, s, flows);
  return {g.value(flows), g.value(warped)};
}

Tensor predict_mask(FlowModel<float>& model, const Tensor& source, const Tensor& z) {
  Graph<float> g;
  const Var m = model.predict_mask(g, g.constant(as_batch(source)), g.constant(z), nn::Mode::infer,
                                   Binding::frozen);
  return g.value(m);
}

Tensor standard_normal(Shape shape, std::mt19937_64& rng) {
  Tensor out(std::move(shape));
  for (auto& v : out.data()) v = static_cast<float>(std::normal_distribution<double>(0.0, 1.0)(rng));
  return out;
}

Tensor reparameterize(const Tensor& mu, const Tensor& log_var, std::mt19937_64& rng) {
  if (mu.shape() != log_var.shape()) {
    throw std::invalid_argument("reparameterize: mu " + shape_string(mu.shape()) + " vs log_var " +
                                shape_string(log_var.shape()));
  }
  const Tensor eps = standard_normal(mu.shape(), rng);
  Tensor z(mu.shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = mu[i] + std::exp(log_var[i] * 0.5f) * eps[i];
  return z;
}

}  // namespace fvae
