#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "fvae/facedata.hpp"
#include "fvae/model.hpp"
#include "fvae/optim.hpp"

namespace fvae {

struct TrainConfig {
  std::uint64_t seed = 1;
  std::size_t batch_size = 16;
  std::int64_t max_steps = 2000;
  std::int64_t mask_steps = 600;
  float clip = 5.0f;
  AdamConfig adam;
  LossWeights loss;
  std::int64_t log_interval = 10;
  std::int64_t eval_interval = 100;
  int patience = 10;  // evaluations without improvement; 0 disables early stopping
  double validation_fraction = 0.2;
  bool hflip = true;
  bool color_transfer = false;
  std::int64_t checkpoint_interval = 500;  // 0 disables periodic checkpoints

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// NCHW source and target batches.
struct Batch {
  Tensor source;
  Tensor target;
};

// Stacks the listed pairs; flips each pair with probability 1/2 when flip_rng
// is given, and color-transfers each source onto its target when asked.
Batch make_batch(const FacePairSet& set, std::span<const std::size_t> pairs,
                 std::mt19937_64* flip_rng, bool color_transfer);

// batch_size distinct pairs drawn uniformly from set.
Batch sample_batch(const FacePairSet& set, const TrainConfig& config, std::mt19937_64& rng);

struct StepMetrics {
  double recon = 0;
  double prior = 0;
  double coherence = 0;
  double total = 0;

  bool operator==(const StepMetrics&) const = default;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct ObjectiveVars {
  Var mu, log_var, z, flows, warped;
  Var recon, prior, coherence, total;
};

// Full forward pass of the objective: encode target, sample z with the given
// noise, decode with source, warp, weighted loss. A non-finite intermediate
// throws NonFiniteLoss naming the stage it appeared in.
template <typename T>
ObjectiveVars<T> fvae_objective(Graph<T>& g, FlowModel<T>& model, const BasicTensor<T>& source,
                                const BasicTensor<T>& target, const BasicTensor<T>& noise,
                                const LossWeights& weights, nn::Mode mode, Binding binding);

struct EarlyStopState {
  std::optional<double> best;
  int bad_evals = 0;
  bool stopped = false;
};

// Everything a run needs to continue exactly where it left off.
struct TrainingState {
  TrainConfig config;
  FlowModel<float> model;
  AdamState adam;
  AdamState mask_adam;
  std::mt19937_64 rng;
  std::int64_t step = 0;
  std::int64_t mask_step = 0;
  EarlyStopState early_stop;

  TrainingState(const ModelConfig& model_config, const TrainConfig& train_config);

  bool fvae_done() const { return step >= config.max_steps || early_stop.stopped; }
  bool done() const { return fvae_done() && (step == 0 || mask_step >= config.mask_steps); }
};

// One optimizer step on encoder and decoder. Throws NonFiniteLoss before any
// update if a loss term is not finite.
StepMetrics train_step(TrainingState& state, const Batch& batch);

// One optimizer step on the mask network against the frozen encoder/decoder
// (inference mode, z = mu). Returns the mask cross-entropy.
double train_mask_step(TrainingState& state, const Batch& batch);

// Mean objective over set with z = mu and running batch-norm statistics.
double validation_loss(FlowModel<float>& model, const FacePairSet& set, const TrainConfig& config);

// Records early-stopping progress for one validation loss; returns true if it improved.
bool record_validation(EarlyStopState& es, double val_total, int patience);

struct LogRow {
  std::int64_t step = 0;
  std::optional<StepMetrics> fvae;
  std::optional<double> mask_loss;
  std::optional<double> val_total;
};

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const LogRow&)> on_log;
  std::function<void(const TrainingState&)> on_checkpoint;
};

// Runs the FVAE phase then the mask phase until state.done(). With no FVAE
// step taken the mask phase is skipped.
void run_training(TrainingState& state, const FacePairSet& train, const FacePairSet& validation,
                  const TrainHooks& hooks = {});

// Training identities split into fitting and validation subsets.
DatasetSplit validation_split(const FacePairSet& train, const TrainConfig& config);

}  // namespace fvae
