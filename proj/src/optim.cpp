#include "fvae/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fvae {

void adam_step(std::span<Parameter<float>* const> params, AdamState& state) {
  for (const Parameter<float>* p : params) {
    if (p->grad.shape() != p->value.shape()) {
      throw std::invalid_argument("adam_step: gradient shape " + shape_string(p->grad.shape()) +
                                  " differs from parameter '" + p->name + "' shape " +
                                  shape_string(p->value.shape()));
    }
    if (!p->grad.all_finite()) {
      throw std::runtime_error("adam_step: non-finite gradient in parameter '" + p->name + "'");
    }
    auto it = state.moments.find(p->name);
    if (it != state.moments.end() && it->second.m.shape() != p->value.shape()) {
      throw std::invalid_argument("adam_step: moment shape mismatch for '" + p->name + "'");
    }
  }

  state.step += 1;
  const auto& cfg = state.config;
  const double t = static_cast<double>(state.step);
  const float correction1 = static_cast<float>(1.0 - std::pow(double(cfg.beta1), t));
  const float correction2 = static_cast<float>(1.0 - std::pow(double(cfg.beta2), t));
  for (Parameter<float>* p : params) {
    auto [it, inserted] = state.moments.try_emplace(p->name);
    if (inserted) it->second = AdamMoments{Tensor(p->value.shape()), Tensor(p->value.shape())};
    auto& m = it->second.m;
    auto& v = it->second.v;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const float g = p->grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * g * g;
      const float m_hat = m[i] / correction1;
      const float v_hat = v[i] / correction2;
      p->value[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

void clip_values(std::span<float> values, float threshold) {
  if (!(threshold > 0.0f)) throw std::invalid_argument("clip_gradients: threshold must be > 0");
  for (float& v : values) v = std::clamp(v, -threshold, threshold);
}

void clip_gradients(std::span<Parameter<float>* const> params, float threshold) {
  for (Parameter<float>* p : params) clip_values(p->grad.data(), threshold);
}

}  // namespace fvae
