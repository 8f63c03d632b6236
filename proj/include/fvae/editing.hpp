#pragma once

#include <optional>
#include <span>
#include <vector>

#include "fvae/facedata.hpp"
#include "fvae/image_io.hpp"
#include "fvae/model.hpp"
#include "fvae/warp.hpp"

namespace fvae {

// Mean encoded mu over the images carrying label, divided by their count.
// Throws std::invalid_argument if no image has the label.
Tensor latent_class_mean(FlowModel<float>& model, std::span<const FaceImage> dataset,
                         Expression label);

struct ExpressionDirection {
  Expression source_label;
  Expression target_label;
  Tensor direction;  // latent-shaped, batch of one
  std::size_t source_count = 0;
  std::size_t target_count = 0;
};

ExpressionDirection expression_direction(FlowModel<float>& model, std::span<const FaceImage> dataset,
                                         Expression source_label, Expression target_label);

struct EditStep {
  Tensor latent;   // [1, Cz, L, L]
  FlowField flow;
  Tensor image;    // CHW
};

// Latent arithmetic: step i of k decodes source with Z(S) + i/k * d, where d
// is the class-mean difference. With no source label, Z(S) stands in for the
// source class mean.
std::vector<EditStep> expression_edit(FlowModel<float>& model, const Tensor& source,
                                      std::optional<Expression> source_label,
                                      Expression target_label, int k,
                                      std::span<const FaceImage> dataset);

// Per-pixel softmax weight of the first mask: exp(m1) / (exp(m1) + exp(m2)).
Tensor blend_weights(const Tensor& m1, const Tensor& m2);

struct InterpolationStep {
  Tensor latent;
  Tensor first;   // decode(S1, Z)
  Tensor second;  // decode(S2, Z)
  Tensor weight;  // blend weight of first, 1 x H x W
  Tensor image;
};

// Walks from Z(S1) to Z(S2) in k steps, decoding from both sources and
// blending by the confidence masks.
std::vector<InterpolationStep> expression_interpolate(FlowModel<float>& model, const Tensor& s1,
                                                      const Tensor& s2, int k);

// 10 log10(255^2 / MSE); +infinity for identical images.
double psnr(const Image8& a, const Image8& b);

// Box-filter downsample of a CHW image by an integer factor.
Tensor area_downsample(const Tensor& chw, int factor);

// Edits a factor-times larger source: the edit runs at model resolution, its
// flow is upsampled and applied to the original high-resolution source.
std::vector<EditStep> edit_highres(FlowModel<float>& model, const Tensor& source_highres,
                                   std::optional<Expression> source_label,
                                   Expression target_label, int k,
                                   std::span<const FaceImage> dataset, int factor);

}  // namespace fvae
