#include "fvae/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fvae/layers.hpp"

namespace fvae {
namespace {

template <typename T>
std::size_t batch_count(const BasicTensor<T>& t) {
  return t.rank() == 4 ? t.dim(0) : 1;
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape()));
  }
}

// Rank-3 CHW promoted to a batch of one.
template <typename T>
BasicTensor<T> as_batch(const BasicTensor<T>& t) {
  if (t.rank() == 4) return t;
  if (t.rank() == 3) return t.reshaped(Shape{1, t.dim(0), t.dim(1), t.dim(2)});
  throw std::invalid_argument("expected CHW or NCHW tensor, got " + shape_string(t.shape()));
}

struct Offset {
  int dy, dx;
};

std::vector<Offset> window_offsets(int radius) {
  std::vector<Offset> out;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dy != 0 || dx != 0) out.push_back({dy, dx});
  return out;
}

// Affinity for every (pixel, offset) pair; 0 where the neighbor is outside.
template <typename T>
std::vector<T> coherence_affinities(const BasicTensor<T>& target, std::size_t H, std::size_t W,
                                    const LossWeights& weights,
                                    const std::vector<Offset>& offsets) {
  const std::size_t N = target.dim(0), C = target.dim(1), P = H * W;
  const T alpha = static_cast<T>(weights.alpha);
  std::vector<T> aff(N * P * offsets.size(), T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t o = 0; o < offsets.size(); ++o) {
          const auto ny = static_cast<std::ptrdiff_t>(y) + offsets[o].dy;
          const auto nx = static_cast<std::ptrdiff_t>(x) + offsets[o].dx;
          if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(H) ||
              nx >= static_cast<std::ptrdiff_t>(W))
            continue;
          T color = 0;
          for (std::size_t c = 0; c < C; ++c) {
            const T d = target.at(n, c, y, x) - target.at(n, c, ny, nx);
            color += d * d;
          }
          const T spatial = static_cast<T>(offsets[o].dy * offsets[o].dy + offsets[o].dx * offsets[o].dx);
          aff[(n * P + y * W + x) * offsets.size() + o] = std::exp(-(alpha * color + spatial));
        }
  return aff;
}

template <typename T>
void check_coherence_inputs(const BasicTensor<T>& flows, const BasicTensor<T>& target) {
  if (flows.rank() != 4 || flows.dim(1) != 2 || target.rank() != 4 ||
      target.dim(0) != flows.dim(0) || target.dim(2) != flows.dim(2) ||
      target.dim(3) != flows.dim(3)) {
    throw std::invalid_argument("flow_coherence_loss: flow " + shape_string(flows.shape()) +
                                " and target " + shape_string(target.shape()) +
                                " must share batch and spatial extents");
  }
}

template <typename T>
T coherence_value(const BasicTensor<T>& flows, const std::vector<T>& aff,
                  const std::vector<Offset>& offsets) {
  const std::size_t N = flows.dim(0), H = flows.dim(2), W = flows.dim(3), P = H * W;
  T total = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t o = 0; o < offsets.size(); ++o) {
          const T a = aff[(n * P + y * W + x) * offsets.size() + o];
          if (a == T(0)) continue;
          const std::size_t ny = y + offsets[o].dy, nx = x + offsets[o].dx;
          T d2 = 0;
          for (std::size_t k = 0; k < 2; ++k) {
            const T d = flows.at(n, k, y, x) - flows.at(n, k, ny, nx);
            d2 += d * d;
          }
          total += d2 * a;
        }
  return total / static_cast<T>(N);
}

template <typename T>
T clamp_mask(T m) {
  return std::clamp(m, static_cast<T>(kMaskClamp), static_cast<T>(1.0 - kMaskClamp));
}

}  // namespace

void LossWeights::validate() const {
  if (!(lambda_prior >= 0) || !(lambda_flow >= 0)) {
    throw std::invalid_argument("LossWeights: lambda_prior and lambda_flow must be >= 0");
  }
  if (!(beta > 0)) throw std::invalid_argument("LossWeights: beta must be > 0");
  if (!(alpha >= 0)) throw std::invalid_argument("LossWeights: alpha must be >= 0");
  if (neighborhood_radius < 1) {
    throw std::invalid_argument("LossWeights: neighborhood_radius must be >= 1");
  }
}

template <typename T>
T reconstruction_loss(const BasicTensor<T>& target, const BasicTensor<T>& warped) {
  require_same_shape(target, warped, "reconstruction_loss");
  T s = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const T d = target[i] - warped[i];
    s += d * d;
  }
  return s / static_cast<T>(batch_count(target));
}

template <typename T>
T prior_loss(const BasicTensor<T>& mu, const BasicTensor<T>& log_var) {
  require_same_shape(mu, log_var, "prior_loss");
  T s = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    s -= T(1) + log_var[i] - mu[i] * mu[i] - std::exp(log_var[i]);
  }
  return s / static_cast<T>(batch_count(mu));
}

template <typename T>
T flow_coherence_loss(const BasicTensor<T>& flows, const BasicTensor<T>& target,
                      const LossWeights& weights) {
  const auto tb = as_batch(target);
  check_coherence_inputs(flows, tb);
  const auto offsets = window_offsets(weights.neighborhood_radius);
  const auto aff = coherence_affinities(tb, flows.dim(2), flows.dim(3), weights, offsets);
  return coherence_value(flows, aff, offsets);
}

float flow_coherence_loss(const FlowField& flow, const Tensor& target, const LossWeights& weights) {
  return flow_coherence_loss(flows_to_batch(std::span<const FlowField>(&flow, 1)), target, weights);
}

double total_loss(double recon, double prior, double coherence, const LossWeights& weights) {
  if (!std::isfinite(recon)) throw std::runtime_error("total_loss: reconstruction term is not finite");
  if (!std::isfinite(prior)) throw std::runtime_error("total_loss: prior term is not finite");
  if (!std::isfinite(coherence)) throw std::runtime_error("total_loss: flow coherence term is not finite");
  return recon + double(weights.lambda_prior) * prior + double(weights.lambda_flow) * coherence;
}

template <typename T>
BasicTensor<T> soft_confidence_label(const BasicTensor<T>& target, const BasicTensor<T>& warped,
                                     T beta) {
  require_same_shape(target, warped, "soft_confidence_label");
  if (!(beta > T(0))) throw std::invalid_argument("soft_confidence_label: beta must be > 0");
  const auto tb = as_batch(target);
  const auto wb = as_batch(warped);
  const std::size_t N = tb.dim(0), C = tb.dim(1), H = tb.dim(2), W = tb.dim(3);
  BasicTensor<T> out(Shape{N, 1, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        T r = 0;
        for (std::size_t c = 0; c < C; ++c) {
          const T d = tb.at(n, c, y, x) - wb.at(n, c, y, x);
          r += d * d;
        }
        out.at(n, 0, y, x) = std::exp(-r / beta);
      }
  if (target.rank() == 3) return out.reshaped(Shape{1, H, W});
  return out;
}

template <typename T>
T mask_cross_entropy(const BasicTensor<T>& label, const BasicTensor<T>& mask) {
  require_same_shape(label, mask, "mask_cross_entropy");
  T s = 0;
  for (std::size_t i = 0; i < label.size(); ++i) {
    const T m = clamp_mask(mask[i]);
    s -= label[i] * std::log(m) + (T(1) - label[i]) * std::log(T(1) - m);
  }
  return s / static_cast<T>(batch_count(label));
}

namespace nn {

template <typename T>
Var reconstruction_loss(Graph<T>& g, const BasicTensor<T>& target, Var warped) {
  const auto& w = g.value(warped);
  const T value = fvae::reconstruction_loss(target, w);
  const T inv_n = T(1) / static_cast<T>(batch_count(target));
  return g.record(BasicTensor<T>::scalar(value), {warped},
                  [target, warped, inv_n](Graph<T>& g, std::size_t self) {
                    const T dy = g.grad(Var{self})[0];
                    const auto& w = g.value(warped);
                    auto& dw = g.grad_buffer(warped);
                    for (std::size_t i = 0; i < dw.size(); ++i)
                      dw[i] += dy * T(2) * (w[i] - target[i]) * inv_n;
                  });
}

template <typename T>
Var prior_loss(Graph<T>& g, Var mu, Var log_var) {
  const T value = fvae::prior_loss(g.value(mu), g.value(log_var));
  const T inv_n = T(1) / static_cast<T>(batch_count(g.value(mu)));
  return g.record(BasicTensor<T>::scalar(value), {mu, log_var},
                  [mu, log_var, inv_n](Graph<T>& g, std::size_t self) {
                    const T dy = g.grad(Var{self})[0];
                    const auto& m = g.value(mu);
                    const auto& lv = g.value(log_var);
                    if (g.requires_grad(mu)) {
                      auto& dm = g.grad_buffer(mu);
                      for (std::size_t i = 0; i < dm.size(); ++i) dm[i] += dy * T(2) * m[i] * inv_n;
                    }
                    if (g.requires_grad(log_var)) {
                      auto& dl = g.grad_buffer(log_var);
                      for (std::size_t i = 0; i < dl.size(); ++i)
                        dl[i] += dy * (std::exp(lv[i]) - T(1)) * inv_n;
                    }
                  });
}

template <typename T>
Var flow_coherence_loss(Graph<T>& g, Var flows, const BasicTensor<T>& target,
                        const LossWeights& weights) {
  const auto& f = g.value(flows);
  const auto tb = as_batch(target);
  check_coherence_inputs(f, tb);
  auto offsets = window_offsets(weights.neighborhood_radius);
  auto aff = coherence_affinities(tb, f.dim(2), f.dim(3), weights, offsets);
  const T value = coherence_value(f, aff, offsets);
  return g.record(
      BasicTensor<T>::scalar(value), {flows},
      [flows, offsets = std::move(offsets), aff = std::move(aff)](Graph<T>& g, std::size_t self) {
        const T dy = g.grad(Var{self})[0];
        const auto& f = g.value(flows);
        auto& df = g.grad_buffer(flows);
        const std::size_t N = f.dim(0), H = f.dim(2), W = f.dim(3), P = H * W;
        const T scale = dy * T(2) / static_cast<T>(N);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
              for (std::size_t o = 0; o < offsets.size(); ++o) {
                const T a = aff[(n * P + y * W + x) * offsets.size() + o];
                if (a == T(0)) continue;
                const std::size_t ny = y + offsets[o].dy, nx = x + offsets[o].dx;
                for (std::size_t k = 0; k < 2; ++k) {
                  const T d = scale * a * (f.at(n, k, y, x) - f.at(n, k, ny, nx));
                  df.at(n, k, y, x) += d;
                  df.at(n, k, ny, nx) -= d;
                }
              }
      });
}

template <typename T>
Var mask_cross_entropy(Graph<T>& g, const BasicTensor<T>& label, Var mask) {
  const T value = fvae::mask_cross_entropy(label, g.value(mask));
  const T inv_n = T(1) / static_cast<T>(batch_count(label));
  return g.record(BasicTensor<T>::scalar(value), {mask},
                  [label, mask, inv_n](Graph<T>& g, std::size_t self) {
                    const T dy = g.grad(Var{self})[0];
                    const auto& m = g.value(mask);
                    auto& dm = g.grad_buffer(mask);
                    for (std::size_t i = 0; i < dm.size(); ++i) {
                      if (clamp_mask(m[i]) != m[i]) continue;
                      dm[i] -= dy * inv_n * (label[i] / m[i] - (T(1) - label[i]) / (T(1) - m[i]));
                    }
                  });
}

template <typename T>
Var total_loss(Graph<T>& g, Var recon, Var prior, Var coherence, const LossWeights& weights) {
  const Var weighted_prior = scale(g, prior, static_cast<T>(weights.lambda_prior));
  const Var weighted_flow = scale(g, coherence, static_cast<T>(weights.lambda_flow));
  return add(g, add(g, recon, weighted_prior), weighted_flow);
}

}  // namespace nn

#define FVAE_INSTANTIATE(T)                                                                     \
  template T reconstruction_loss<T>(const BasicTensor<T>&, const BasicTensor<T>&);              \
  template T prior_loss<T>(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template T flow_coherence_loss<T>(const BasicTensor<T>&, const BasicTensor<T>&,               \
                                    const LossWeights&);                                        \
  template BasicTensor<T> soft_confidence_label<T>(const BasicTensor<T>&, const BasicTensor<T>&, \
                                                   T);                                          \
  template T mask_cross_entropy<T>(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template Var nn::reconstruction_loss<T>(Graph<T>&, const BasicTensor<T>&, Var);               \
  template Var nn::prior_loss<T>(Graph<T>&, Var, Var);                                          \
  template Var nn::flow_coherence_loss<T>(Graph<T>&, Var, const BasicTensor<T>&,                \
                                          const LossWeights&);                                  \
  template Var nn::mask_cross_entropy<T>(Graph<T>&, const BasicTensor<T>&, Var);                \
  template Var nn::total_loss<T>(Graph<T>&, Var, Var, Var, const LossWeights&);

FVAE_INSTANTIATE(float)
FVAE_INSTANTIATE(double)

}  // namespace fvae
