#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "layerforge/denoiser.hpp"
#include "layerforge/layers.hpp"
#include "layerforge/schedule.hpp"

namespace layerforge {

/// √ᾱ_t·z0 + √(1-ᾱ_t)·noise
Tensor q_sample(const Tensor& z0, int t, const Tensor& noise, const NoiseSchedule& sched);

/// (z_t - √(1-ᾱ_t)·ε) / √ᾱ_t
Tensor predict_x0(const Tensor& z_t, const Tensor& eps, double abar_t);

/// Deterministic (η = 0) update from ᾱ_t to ᾱ_next; also used in reverse for
/// inversion. Identity when the two are equal.
Tensor ddim_update(const Tensor& z_t, const Tensor& eps, double abar_t, double abar_next);

/// ε̂ for every layer of a batch at timestep t.
using NoisePredictor = std::function<std::vector<Tensor>(const std::vector<Tensor>& latents, int t)>;

/// Called with the latents at every grid timestep, before they are updated.
using StepObserver = std::function<void(int t, const std::vector<Tensor>& latents)>;

struct DenoiserOutput {
    std::vector<Tensor> eps;
    std::vector<Tensor> context_maps;     // h×w per foreground
    std::vector<Tensor> foreground_maps;  // h×w per foreground
};

DenoiserOutput run_denoiser(const DenoiserModel& model, const std::vector<Tensor>& latents, const Conditioning& cond,
                            int t, const AttentionHooks& hooks);

NoisePredictor make_predictor(const DenoiserModel& model, Conditioning cond, AttentionHooks hooks);

/// z_{t_next} for every layer.
std::vector<Tensor> ddim_step(const NoisePredictor& predict, const std::vector<Tensor>& z_t, int t, int t_next,
                              const NoiseSchedule& sched);

/// Starting noise z_T for a batch of `layers` latents, drawn from the seed.
std::vector<Tensor> initial_latents(const ModelConfig& config, std::size_t layers, std::uint64_t seed,
                                    bool shared_noise = false);

/// Runs the deterministic sampler over a descending timestep grid.
std::vector<Tensor> ddim_sample(const NoisePredictor& predict, std::vector<Tensor> z, const std::vector<int>& timesteps,
                                const NoiseSchedule& sched, const StepObserver& observer = {});

/// Reversed recursion over the ascending grid; returns the latents at every
/// grid point, starting with z0 and ending at z_T. Each step starts from the
/// explicit update (ε taken at the current step) and then re-solves
/// z_next = update(z, ε(z_next, t_next)) by fixed-point iteration, which makes
/// the deterministic sampler retrace the trajectory; 0 iterations gives the
/// plain explicit inversion.
std::vector<std::vector<Tensor>> ddim_invert(const NoisePredictor& predict, const std::vector<Tensor>& z0,
                                             const std::vector<int>& ascending, const NoiseSchedule& sched,
                                             int refine_iterations = 0);

// ---- latent codec -------------------------------------------------------------

/// Area-averages the image onto the latent grid and lifts RGB with the fixed
/// codec rows: z = (2x - 1)·P.
Tensor encode_image(const DenoiserModel& model, const Tensor& rgb);

/// Pseudo-inverse of the codec, then bilinear upsampling to the image grid.
Tensor decode_latent(const DenoiserModel& model, const Tensor& z);

/// Alpha head on a foreground latent, upsampled to the image grid.
Tensor decode_alpha(const DenoiserModel& model, const Tensor& z);

/// Alpha head on the latent grid (h×w).
Tensor decode_alpha_latent(const DenoiserModel& model, const Tensor& z);

// ---- training -----------------------------------------------------------------

struct TrainingExample {
    std::vector<Tensor> latents;  // clean z0: background, foregrounds..., global
    std::vector<Tensor> alphas;   // per foreground, h×w on the latent grid
    Conditioning cond;
};

/// Encodes a layer stack: foreground colors are taken where alpha covers
/// them and mid-gray elsewhere; the global latent encodes the composite.
TrainingExample make_training_example(const DenoiserModel& model, const LayerStack& stack);

/// Per-cell weights of the alpha head's L1 loss: covered (α > 0.5) and
/// uncovered cells each carry half of the total weight, so the mostly
/// transparent foregrounds do not collapse the head to α ≈ 0. All ones when
/// only one class is present.
Tensor balanced_alpha_weights(const Tensor& alpha);

struct TrainOptions {
    double learning_rate = 1e-2;
    double alpha_learning_rate = 1.0;
    LossWeights lambdas;
    bool kv_only = false;
    bool shared_noise = false;
    bool train_alpha_head = true;
    AttentionHooks hooks;
};

struct StepLog {
    std::uint64_t step = 0;
    int t = 0;
    double noise = 0, context = 0, layout = 0, total = 0, alpha = 0;
};

/// Timestep and noise drawn from the (seed, step) stream.
NoisySample<float> draw_noisy_sample(const TrainingExample& ex, const NoiseSchedule& sched, std::uint64_t seed,
                                     std::uint64_t step, bool shared_noise);

/// Noise-prediction loss for one draw.
double noise_loss(const DenoiserModel& model, const TrainingExample& ex, int t, std::uint64_t seed,
                  const NoiseSchedule& sched, const AttentionHooks& hooks = {});

/// One gradient-descent step on λ_n·L_noise + λ_c·L_c + λ_l·L_layout and,
/// separately, the alpha head's L1 loss. Throws EvaluationError on a
/// non-finite loss (parameters untouched).
StepLog train_step(DenoiserModel& model, const TrainingExample& ex, const NoiseSchedule& sched,
                   const TrainOptions& options, std::uint64_t seed, std::uint64_t step);

/// Steps [first_step, first_step + steps) cycling through the examples.
std::vector<StepLog> train(DenoiserModel& model, const std::vector<TrainingExample>& examples,
                           const NoiseSchedule& sched, const TrainOptions& options, std::uint64_t seed,
                           std::uint64_t first_step, std::uint64_t steps,
                           const std::function<void(const StepLog&)>& on_step = {});

// ---- checkpoints --------------------------------------------------------------

struct Checkpoint {
    DenoiserModel model;
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
};

/// Directory with header.json plus one LTENS file per tensor.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace layerforge
