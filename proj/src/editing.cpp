#include "fvae/editing.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace fvae {
namespace {

Tensor scaled_sum(const Tensor& a, float wa, const Tensor& b, float wb) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = wa * a[i] + wb * b[i];
  return out;
}

void check_steps(int k) {
  if (k < 1) throw std::invalid_argument("number of steps must be >= 1, got " + std::to_string(k));
}

Tensor chw(const Tensor& batch_of_one) { return batch_item(batch_of_one, 0); }

}  // namespace

Tensor latent_class_mean(FlowModel<float>& model, std::span<const FaceImage> dataset,
                         Expression label) {
  std::vector<double> sum;
  Shape shape;
  std::size_t count = 0;
  for (const auto& img : dataset) {
    if (img.label != label) continue;
    const Tensor mu = encode(model, img.pixels).mu;
    if (sum.empty()) {
      sum.assign(mu.size(), 0.0);
      shape = mu.shape();
    }
    for (std::size_t i = 0; i < mu.size(); ++i) sum[i] += mu[i];
    ++count;
  }
  if (count == 0) {
    throw std::invalid_argument("latent_class_mean: no image labelled " +
                                std::string(to_string(label)));
  }
  Tensor mean(shape);
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = static_cast<float>(sum[i] / count);
  return mean;
}

ExpressionDirection expression_direction(FlowModel<float>& model, std::span<const FaceImage> dataset,
                                         Expression source_label, Expression target_label) {
  ExpressionDirection d{source_label, target_label, {}, 0, 0};
  for (const auto& img : dataset) {
    d.source_count += img.label == source_label;
    d.target_count += img.label == target_label;
  }
  if (source_label == target_label) {
    // still validates that the label exists
    d.direction = Tensor(latent_class_mean(model, dataset, source_label).shape());
    return d;
  }
  d.direction = scaled_sum(latent_class_mean(model, dataset, target_label), 1.0f,
                           latent_class_mean(model, dataset, source_label), -1.0f);
  return d;
}

std::vector<EditStep> expression_edit(FlowModel<float>& model, const Tensor& source,
                                      std::optional<Expression> source_label,
                                      Expression target_label, int k,
                                      std::span<const FaceImage> dataset) {
  check_steps(k);
  const Tensor zs = encode(model, source).mu;
  Tensor direction;
  if (source_label) {
    direction = expression_direction(model, dataset, *source_label, target_label).direction;
  } else {
    direction = scaled_sum(latent_class_mean(model, dataset, target_label), 1.0f, zs, -1.0f);
  }
  std::vector<EditStep> steps;
  for (int i = 1; i <= k; ++i) {
    const float t = static_cast<float>(i) / static_cast<float>(k);
    Tensor z = scaled_sum(zs, 1.0f, direction, t);
    const Decoded out = decode(model, source, z);
    steps.push_back({std::move(z), flow_from_batch(out.flows, 0), chw(out.warped)});
  }
  return steps;
}

Tensor blend_weights(const Tensor& m1, const Tensor& m2) {
  if (m1.shape() != m2.shape()) {
    throw std::invalid_argument("blend_weights: mask shapes " + shape_string(m1.shape()) + " vs " +
                                shape_string(m2.shape()));
  }
  Tensor w(m1.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 1.0f / (1.0f + std::exp(m2[i] - m1[i]));
  return w;
}

std::vector<InterpolationStep> expression_interpolate(FlowModel<float>& model, const Tensor& s1,
                                                      const Tensor& s2, int k) {
  check_steps(k);
  if (s1.shape() != s2.shape()) {
    throw std::invalid_argument("expression_interpolate: source extents " + shape_string(s1.shape()) +
                                " vs " + shape_string(s2.shape()));
  }
  const Tensor z1 = encode(model, s1).mu;
  const Tensor z2 = encode(model, s2).mu;
  std::vector<InterpolationStep> steps;
  for (int i = 1; i <= k; ++i) {
    // weighted form so that step k is exactly z2 and swapping sources mirrors the path
    const float b = static_cast<float>(i) / static_cast<float>(k);
    const float a = static_cast<float>(k - i) / static_cast<float>(k);
    InterpolationStep step;
    step.latent = scaled_sum(z1, a, z2, b);
    step.first = chw(decode(model, s1, step.latent).warped);
    step.second = chw(decode(model, s2, step.latent).warped);
    step.weight = chw(blend_weights(predict_mask(model, s1, step.latent),
                                    predict_mask(model, s2, step.latent)));
    step.image = Tensor(step.first.shape());
    const std::size_t plane = step.weight.size();
    for (std::size_t i2 = 0; i2 < step.image.size(); ++i2) {
      const float w1 = step.weight[i2 % plane];
      step.image[i2] = w1 * step.first[i2] + (1.0f - w1) * step.second[i2];
    }
    steps.push_back(std::move(step));
  }
  return steps;
}

double psnr(const Image8& a, const Image8& b) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels) {
    throw std::invalid_argument("psnr: image extents differ");
  }
  double se = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = double(a.pixels[i]) - double(b.pixels[i]);
    se += d * d;
  }
  if (se == 0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(a.pixels.size());
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

Tensor area_downsample(const Tensor& image, int factor) {
  if (factor < 1) throw std::invalid_argument("area_downsample: factor must be >= 1");
  const std::size_t f = static_cast<std::size_t>(factor);
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (H % f != 0 || W % f != 0) {
    throw std::invalid_argument("area_downsample: " + shape_string(image.shape()) +
                                " not divisible by " + std::to_string(factor));
  }
  if (f == 1) return image;
  Tensor out(Shape{C, H / f, W / f});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H / f; ++y)
      for (std::size_t x = 0; x < W / f; ++x) {
        double s = 0;
        for (std::size_t dy = 0; dy < f; ++dy)
          for (std::size_t dx = 0; dx < f; ++dx) s += image.at(c, y * f + dy, x * f + dx);
        out.at(c, y, x) = static_cast<float>(s / double(f * f));
      }
  return out;
}

std::vector<EditStep> edit_highres(FlowModel<float>& model, const Tensor& source_highres,
                                   std::optional<Expression> source_label,
                                   Expression target_label, int k,
                                   std::span<const FaceImage> dataset, int factor) {
  if (factor < 1 || factor > 4) {
    throw std::invalid_argument("edit_highres: factor must be an integer in [1, 4], got " +
                                std::to_string(factor));
  }
  const std::size_t want = model.config().image_size * static_cast<std::size_t>(factor);
  if (source_highres.rank() != 3 || source_highres.dim(1) != want || source_highres.dim(2) != want) {
    throw std::invalid_argument("edit_highres: source must be " + std::to_string(want) + "x" +
                                std::to_string(want) + ", got " +
                                shape_string(source_highres.shape()));
  }
  auto steps = expression_edit(model, area_downsample(source_highres, factor), source_label,
                               target_label, k, dataset);
  for (auto& step : steps) {
    step.flow = upsample_flow(step.flow, factor);
    step.image = bilinear_sample(source_highres, step.flow);
  }
  return steps;
}

}  // namespace fvae
