#include "fvae/train.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "fvae/warp.hpp"

namespace fvae {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (batch_size < 2) fail("batch_size must be >= 2 for batch norm");
  if (max_steps < 0 || mask_steps < 0) fail("step counts must be non-negative");
  if (!(clip > 0.0f)) fail("clip must be positive");
  if (!(adam.learning_rate > 0.0f)) fail("learning_rate must be positive");
  if (log_interval < 1 || eval_interval < 1) fail("intervals must be >= 1");
  if (patience < 0) fail("patience must be >= 0");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    fail("validation_fraction must be in [0, 1)");
  }
  if (checkpoint_interval < 0) fail("checkpoint_interval must be >= 0");
  loss.validate();
}

Batch make_batch(const FacePairSet& set, std::span<const std::size_t> pairs,
                 std::mt19937_64* flip_rng, bool color_transfer) {
  std::vector<Tensor> sources, targets;
  for (std::size_t p : pairs) {
    ImagePair pair{set.source(p).pixels, set.target(p).pixels};
    if (color_transfer) pair.source = fvae::color_transfer(pair.source, pair.target);
    if (flip_rng) pair = hflip_augment(std::move(pair), *flip_rng);
    sources.push_back(std::move(pair.source));
    targets.push_back(std::move(pair.target));
  }
  return {stack<float>(sources), stack<float>(targets)};
}

Batch sample_batch(const FacePairSet& set, const TrainConfig& config, std::mt19937_64& rng) {
  const std::size_t n = set.pairs.size();
  if (n < config.batch_size) {
    throw std::invalid_argument("sample_batch: " + std::to_string(n) + " pairs for batch size " +
                                std::to_string(config.batch_size));
  }
  // partial Fisher-Yates over pair indices
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < config.batch_size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  order.resize(config.batch_size);
  return make_batch(set, order, config.hflip ? &rng : nullptr, config.color_transfer);
}

template <typename T>
ObjectiveVars<T> fvae_objective(Graph<T>& g, FlowModel<T>& model, const BasicTensor<T>& source,
                                const BasicTensor<T>& target, const BasicTensor<T>& noise,
                                const LossWeights& weights, nn::Mode mode, Binding binding) {
  ObjectiveVars<T> v;
  const char* stage = "encoder";
  try {
    const Var s = g.constant(source);
    const auto enc = model.encode(g, g.constant(target), mode, binding);
    v.mu = enc.mu;
    v.log_var = enc.log_var;
    stage = "latent sample";
    v.z = nn::reparameterize(g, v.mu, v.log_var, noise);
    stage = "decoder";
    v.flows = model.decode_flow(g, s, v.z, mode, binding);
    v.warped = bilinear_sample(g, s, v.flows);
    stage = "reconstruction loss";
    v.recon = nn::reconstruction_loss(g, target, v.warped);
    stage = "prior loss";
    v.prior = nn::prior_loss(g, v.mu, v.log_var);
    stage = "coherence loss";
    v.coherence = nn::flow_coherence_loss(g, v.flows, target, weights);
    stage = "total loss";
    v.total = nn::total_loss(g, v.recon, v.prior, v.coherence, weights);
  } catch (const NonFiniteValue& e) {
    throw NonFiniteLoss(std::string("non-finite value in ") + stage + " (" + e.what() + ")");
  }
  return v;
}

template ObjectiveVars<float> fvae_objective(Graph<float>&, FlowModel<float>&, const Tensor&,
                                             const Tensor&, const Tensor&, const LossWeights&,
                                             nn::Mode, Binding);
template ObjectiveVars<double> fvae_objective(Graph<double>&, FlowModel<double>&,
                                              const BasicTensor<double>&, const BasicTensor<double>&,
                                              const BasicTensor<double>&, const LossWeights&,
                                              nn::Mode, Binding);

TrainingState::TrainingState(const ModelConfig& model_config, const TrainConfig& train_config)
    : config(train_config), model(model_config, train_config.seed), rng(train_config.seed + 1) {
  config.validate();
  adam.config = config.adam;
  mask_adam.config = config.adam;
}

namespace {

void zero_grads(std::span<Parameter<float>* const> params) {
  for (auto* p : params) p->zero_grad();
}

double item(Graph<float>& g, Var v) { return static_cast<double>(g.value(v).item()); }

}  // namespace

StepMetrics train_step(TrainingState& state, const Batch& batch) {
  auto& model = state.model;
  const auto params = [&] {
    auto enc = model.params().trainable("encoder.");
    auto dec = model.params().trainable("decoder.");
    enc.insert(enc.end(), dec.begin(), dec.end());
    return enc;
  }();
  const Tensor noise = standard_normal(model.config().latent_shape(batch.source.dim(0)), state.rng);
  zero_grads(params);
  Graph<float> g;
  const auto v = fvae_objective(g, model, batch.source, batch.target, noise, state.config.loss,
                                nn::Mode::train, Binding::trainable);
  StepMetrics m{item(g, v.recon), item(g, v.prior), item(g, v.coherence), item(g, v.total)};
  try {
    total_loss(m.recon, m.prior, m.coherence, state.config.loss);
  } catch (const std::runtime_error& e) {
    throw NonFiniteLoss(e.what());
  }
  g.backward(v.total);
  clip_gradients(params, state.config.clip);
  adam_step(params, state.adam);
  ++state.step;
  return m;
}

double train_mask_step(TrainingState& state, const Batch& batch) {
  auto& model = state.model;
  const auto params = model.params().trainable("mask.");
  const LatentCode code = encode(model, batch.target);
  const Decoded dec = decode(model, batch.source, code.mu);
  const Tensor label = soft_confidence_label(batch.target, dec.warped, state.config.loss.beta);

  zero_grads(params);
  Graph<float> g;
  const Var mask = model.predict_mask(g, g.constant(batch.source), g.constant(code.mu),
                                      nn::Mode::train, Binding::trainable);
  const Var loss = nn::mask_cross_entropy(g, label, mask);
  const double value = item(g, loss);
  if (!std::isfinite(value)) {
    throw NonFiniteLoss("mask step " + std::to_string(state.mask_step + 1) +
                        ": mask cross-entropy is not finite");
  }
  g.backward(loss);
  clip_gradients(params, state.config.clip);
  adam_step(params, state.mask_adam);
  ++state.mask_step;
  return value;
}

double validation_loss(FlowModel<float>& model, const FacePairSet& set, const TrainConfig& config) {
  if (set.pairs.empty()) throw std::invalid_argument("validation_loss: empty set");
  double sum = 0;
  for (std::size_t start = 0; start < set.pairs.size(); start += config.batch_size) {
    const std::size_t end = std::min(set.pairs.size(), start + config.batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Batch b = make_batch(set, idx, nullptr, config.color_transfer);
    Graph<float> g;
    const Tensor zero(model.config().latent_shape(idx.size()));
    const auto v = fvae_objective(g, model, b.source, b.target, zero, config.loss, nn::Mode::infer,
                                  Binding::frozen);
    sum += item(g, v.total) * static_cast<double>(idx.size());
  }
  return sum / static_cast<double>(set.pairs.size());
}

bool record_validation(EarlyStopState& es, double val_total, int patience) {
  if (!es.best || val_total < *es.best) {
    es.best = val_total;
    es.bad_evals = 0;
    return true;
  }
  ++es.bad_evals;
  if (patience > 0 && es.bad_evals >= patience) es.stopped = true;
  return false;
}

void run_training(TrainingState& state, const FacePairSet& train, const FacePairSet& validation,
                  const TrainHooks& hooks) {
  const auto& cfg = state.config;
  auto checkpoint = [&] {
    if (hooks.on_checkpoint) hooks.on_checkpoint(state);
  };
  while (!state.fvae_done()) {
    const Batch batch = sample_batch(train, cfg, state.rng);
    const StepMetrics m = train_step(state, batch);
    if (hooks.on_step) hooks.on_step(m);
    LogRow row{state.step, m, std::nullopt, std::nullopt};
    if (!validation.pairs.empty() && state.step % cfg.eval_interval == 0) {
      row.val_total = validation_loss(state.model, validation, cfg);
      record_validation(state.early_stop, *row.val_total, cfg.patience);
    }
    if (hooks.on_log && (state.step % cfg.log_interval == 0 || row.val_total)) hooks.on_log(row);
    if (cfg.checkpoint_interval > 0 && state.step % cfg.checkpoint_interval == 0) checkpoint();
  }
  // the mask net needs a trained flow to learn from
  if (state.step == 0) return;
  while (state.mask_step < cfg.mask_steps) {
    const Batch batch = sample_batch(train, cfg, state.rng);
    const double loss = train_mask_step(state, batch);
    if (hooks.on_log && state.mask_step % cfg.log_interval == 0) {
      hooks.on_log({state.step + state.mask_step, std::nullopt, loss, std::nullopt});
    }
    if (cfg.checkpoint_interval > 0 && state.mask_step % cfg.checkpoint_interval == 0) checkpoint();
  }
}

DatasetSplit validation_split(const FacePairSet& train, const TrainConfig& config) {
  if (config.validation_fraction == 0.0) return {train, {}};
  return build_pairs(train.images, config.seed, 1.0 - config.validation_fraction);
}

}  // namespace fvae
