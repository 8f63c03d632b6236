#pragma once

#include "fvae/autodiff.hpp"
#include "fvae/warp.hpp"

// Training objectives. Image-shaped arguments are NCHW batches (a rank-3
// tensor counts as a batch of one); every loss is averaged over the batch.
namespace fvae {

struct LossWeights {
  float lambda_prior = 0.003f;
  float lambda_flow = 0.001f;
  float alpha = 0.5f;  // colour-affinity weight of the coherence term
  float beta = 0.1f;   // temperature of the soft confidence label
  int neighborhood_radius = 3;

  void validate() const;

  bool operator==(const LossWeights&) const = default;
};

// Batch mean of the per-image sum of squared differences.
template <typename T>
T reconstruction_loss(const BasicTensor<T>& target, const BasicTensor<T>& warped);

// Batch mean of -sum_k (1 + log_var - mu^2 - exp(log_var)).
template <typename T>
T prior_loss(const BasicTensor<T>& mu, const BasicTensor<T>& log_var);

// Edge-aware smoothness over ordered neighbor pairs within the window:
// |F_i - F_j|^2 * exp(-(alpha |T_i - T_j|^2 + |i - j|^2)), offsets in pixels.
// flows is [N, 2, H, W]; target is [N, C, H, W].
template <typename T>
T flow_coherence_loss(const BasicTensor<T>& flows, const BasicTensor<T>& target,
                      const LossWeights& weights);
float flow_coherence_loss(const FlowField& flow, const Tensor& target, const LossWeights& weights);

// recon + lambda_prior * prior + lambda_flow * coherence. Throws naming the
// first non-finite term.
double total_loss(double recon, double prior, double coherence, const LossWeights& weights);

// Per-pixel exp(-|T_i - g_i|^2 / beta) with the norm over channels; the result
// has a single channel.
template <typename T>
BasicTensor<T> soft_confidence_label(const BasicTensor<T>& target, const BasicTensor<T>& warped,
                                     T beta);

inline constexpr double kMaskClamp = 1e-7;

// Batch mean of -sum_i [y log M + (1 - y) log(1 - M)], with M clamped into
// [1e-7, 1 - 1e-7].
template <typename T>
T mask_cross_entropy(const BasicTensor<T>& label, const BasicTensor<T>& mask);

namespace nn {

template <typename T>
Var reconstruction_loss(Graph<T>& g, const BasicTensor<T>& target, Var warped);

template <typename T>
Var prior_loss(Graph<T>& g, Var mu, Var log_var);

template <typename T>
Var flow_coherence_loss(Graph<T>& g, Var flows, const BasicTensor<T>& target,
                        const LossWeights& weights);

template <typename T>
Var mask_cross_entropy(Graph<T>& g, const BasicTensor<T>& label, Var mask);

template <typename T>
Var total_loss(Graph<T>& g, Var recon, Var prior, Var coherence, const LossWeights& weights);

}  // namespace nn
}  // namespace fvae
