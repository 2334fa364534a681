#pragma once

// Toy latent denoiser ε_θ(z_t, t, C): a stack of pre-norm transformer blocks
// over the h·w latent tokens of every layer in the batch, with
//   - layer-shared self-attention (joint K/V over all layers, optional mask),
//   - cross-attention to each layer's prompt embedding,
//   - context-map extraction from the global layer at one block, refined by
//     context-aware layers and injected into foreground inputs of later
//     blocks while t ≥ inject_from,
// plus a small alpha head that maps a clean foreground latent to opacity.

#include <cstdint>
#include <string>
#include <vector>

#include "layerforge/attention.hpp"
#include "layerforge/parameters.hpp"
#include "layerforge/prompts.hpp"
#include "layerforge/schedule.hpp"

namespace layerforge {

struct ModelConfig {
    std::size_t image_h = 64, image_w = 64;
    std::size_t latent_h = 16, latent_w = 16;
    std::size_t dim = 32;
    std::size_t seq_len = 16;
    std::size_t blocks = 2;
    std::size_t heads = 2;
    std::size_t ffn_mult = 4;
    std::size_t cal_depth = 1;
    std::size_t alpha_hidden = 16;
    std::size_t max_layers = 4;
    std::size_t extraction_block = 0;
    // Noise schedule the model is trained under; ε̂ carries a parameter-free
    // skip term √(1-ᾱ_t)·z_t so the near-identity at large t need not be learned.
    int timesteps = 1000;
    double beta_start = 1e-4, beta_end = 2e-2;
    bool eps_skip = true;

    NoiseSchedule schedule() const { return NoiseSchedule::linear(timesteps, beta_start, beta_end); }

    std::size_t tokens() const { return latent_h * latent_w; }
    void validate() const;
};

struct AttentionHooks {
    bool share_layers = true;
    bool inject_global = true;
    int inject_from = 850;
    MaskMode mask = MaskMode::none;
    bool mask_global_rows_only = false;
};

/// Prompt conditioning for a batch. layer_seqs has one entry per non-global
/// latent (background first); global_seqs are the sources stitched into the
/// global embedding. With `plain`, the global embedding is the bare token
/// lookup of global_seqs[0] (the non-layered base model).
struct Conditioning {
    std::vector<TokenSeq> layer_seqs;
    std::vector<TokenSeq> global_seqs;
    bool plain = false;

    static Conditioning layered(std::vector<TokenSeq> seqs) { return {seqs, seqs, false}; }
    static Conditioning single(TokenSeq seq) { return {{}, {std::move(seq)}, true}; }
};

template <typename T>
struct Denoiser {
    ModelConfig config;
    ParameterSet<T> params;
    BasicTensor<T> token_table;  // frozen, V×D
    BasicTensor<T> positions;    // fixed, hw×D
    BasicTensor<T> codec;        // fixed, 3×D with rows orthogonal, |row|² = D/3

    template <typename U>
    Denoiser<U> cast() const {
        return {config, params.template cast<U>(), token_table.template cast<U>(), positions.template cast<U>(),
                codec.template cast<U>()};
    }
};

using DenoiserModel = Denoiser<float>;

DenoiserModel init_denoiser(const ModelConfig& config, std::uint64_t seed, std::size_t vocab_size);

/// Parameters updated by the alpha-head objective rather than the main loss.
bool is_alpha_head_parameter(const std::string& name);

/// Cross-attention key/value projections (the optional fine-tuning subset).
bool is_cross_kv_parameter(const std::string& name);

template <typename T>
struct ForwardResult {
    std::vector<Var> eps;              // per layer, hw×D
    std::vector<Var> initial_maps;     // per foreground, hw×1, before refinement
    std::vector<Var> context_maps;     // per foreground, hw×1, refined
    std::vector<Var> foreground_maps;  // per foreground, from its own cross-attention
    // Inputs to the piecewise-smooth ops (min-max normalisation, final clamp),
    // for callers that need to know how far the point is from a kink.
    std::vector<Var> normalize_inputs;
    std::vector<Var> clamp_inputs;
};

/// `params` are index-aligned with model.params (leaves or constants).
template <typename T>
ForwardResult<T> denoiser_forward(Graph<T>& g, const Denoiser<T>& model, const std::vector<Var>& params,
                                  const std::vector<Var>& latents, const Conditioning& cond, int t,
                                  const AttentionHooks& hooks);

struct LossWeights {
    double noise = 1.0, context = 1.0, layout = 1.0;
};

template <typename T>
struct NoisySample {
    std::vector<BasicTensor<T>> latents;  // z_t per layer
    std::vector<BasicTensor<T>> noise;    // ε per layer
    std::vector<BasicTensor<T>> alphas;   // per foreground, on the latent grid
    /// When non-empty, replaces the (detached) refined global maps as the
    /// layout-loss target; lets a finite-difference check hold the target
    /// fixed the way the detach does.
    std::vector<BasicTensor<T>> layout_targets;
    Conditioning cond;
    int t = 0;
};

struct LossVars {
    Var noise, context, layout, total;
};

template <typename T>
LossVars training_losses(Graph<T>& g, const Denoiser<T>& model, const std::vector<Var>& params,
                         const NoisySample<T>& sample, const AttentionHooks& hooks, const LossWeights& weights);

/// sigmoid(W2·gelu(W1·z + b1) + b2) → hw×1
template <typename T>
Var alpha_head(Graph<T>& g, const Denoiser<T>& model, const std::vector<Var>& params, Var z);

/// Sinusoidal timestep features, 1×dim.
template <typename T>
BasicTensor<T> timestep_features(int t, std::size_t dim);

}  // namespace layerforge
