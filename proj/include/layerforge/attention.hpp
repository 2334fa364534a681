#pragma once

// Context-aware cross-attention (map extraction, aggregation, refinement,
// context/layout losses) and layer-shared self-attention (global injection,
// joint key/value attention, masked inversion variant).
//
// The graph-level functions are used by the denoiser for both training and
// sampling. The Tensor overloads at the bottom wrap them in a non-recording
// graph for standalone use.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "layerforge/autodiff.hpp"
#include "layerforge/prompts.hpp"
#include "layerforge/random.hpp"

namespace layerforge {

enum class MaskMode {
    none,
    global_only,  // every query sees only the global layer's keys
};

std::string to_string(MaskMode mode);
MaskMode mask_mode_from_string(const std::string& name);

template <typename H>
struct AttentionWeights {
    H wq, wk, wv, wo;  // D×D each
};

template <typename H>
struct NormWeights {
    H gain, bias;  // 1×D
};

template <typename H>
struct FeedForwardWeights {
    H w1, b1, w2, b2;
};

/// One context-aware layer: the map value (plus position) is embedded as the
/// query, latent features supply keys and values, and a zero-initialised head
/// adds a residual correction to the map.
template <typename H>
struct ContextBlockWeights {
    H embed_w, embed_b;  // 1×D, 1×D
    NormWeights<H> norm_q, norm_kv, norm_ff;
    AttentionWeights<H> attn;
    FeedForwardWeights<H> ff;
    H head_w, head_b;  // D×1, 1×1
};

struct ContextAwareLayerParams {
    std::vector<ContextBlockWeights<Tensor>> blocks;
    std::size_t heads = 2;

    /// Random attention/FFN weights, zero head (identity at init).
    static ContextAwareLayerParams create(std::size_t depth, std::size_t dim, std::size_t heads, Rng& rng);
};

/// Fixed 2-D sinusoidal position table, (h·w)×dim.
template <typename T>
BasicTensor<T> positional_embedding(std::size_t h, std::size_t w, std::size_t dim) {
    BasicTensor<T> pe = BasicTensor<T>::matrix(h * w, dim);
    const std::size_t half = dim / 2;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t p = y * w + x;
            for (std::size_t c = 0; c < dim; ++c) {
                const bool along_y = c < half;
                const std::size_t local = along_y ? c : c - half;
                const std::size_t width = along_y ? half : dim - half;
                const double freq = std::pow(100.0, -static_cast<double>(local / 2 * 2) / static_cast<double>(width));
                const double pos = static_cast<double>(along_y ? y : x);
                pe.at(p, c) = static_cast<T>(local % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq));
            }
        }
    }
    return pe;
}

// ---- graph-level building blocks ---------------------------------------------

/// Multi-head attention on already-projected q (Lq×D), k, v (Lk×D).
template <typename T>
Var attend(Graph<T>& g, Var q, Var k, Var v, std::size_t heads, const BasicTensor<T>* mask = nullptr) {
    const std::size_t D = g.value(q).cols();
    if (heads == 0 || D % heads != 0) throw ShapeError("attend: head count must divide width");
    const std::size_t hd = D / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    std::vector<Var> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Var qh = heads == 1 ? q : g.slice_cols(q, h * hd, hd);
        Var kh = heads == 1 ? k : g.slice_cols(k, h * hd, hd);
        Var vh = heads == 1 ? v : g.slice_cols(v, h * hd, hd);
        Var probs = g.softmax_rows(g.scale(g.matmul_nt(qh, kh), scale), mask);
        outs.push_back(g.matmul(probs, vh));
    }
    return g.concat_cols(outs);
}

template <typename T>
Var multi_head_attention(Graph<T>& g, Var q_in, Var kv_in, const AttentionWeights<Var>& w, std::size_t heads,
                         const BasicTensor<T>* mask = nullptr) {
    Var q = g.matmul(q_in, w.wq);
    Var k = g.matmul(kv_in, w.wk);
    Var v = g.matmul(kv_in, w.wv);
    return g.matmul(attend(g, q, k, v, heads, mask), w.wo);
}

template <typename T>
Var feed_forward(Graph<T>& g, Var x, const FeedForwardWeights<Var>& w) {
    Var h = g.gelu(g.add_row(g.matmul(x, w.w1), w.b1));
    return g.add_row(g.matmul(h, w.w2), w.b2);
}

template <typename T>
Var norm(Graph<T>& g, Var x, const NormWeights<Var>& w) {
    return g.layer_norm(x, w.gain, w.bias);
}

/// Softmax(z·wq · (cond·wk)ᵀ / √d): hw×S, rows sum to 1.
template <typename T>
Var cross_attention_map(Graph<T>& g, Var z, Var cond, Var wq, Var wk) {
    Var q = g.matmul(z, wq);
    Var k = g.matmul(cond, wk);
    const T scale = T(1) / std::sqrt(static_cast<T>(g.value(q).cols()));
    return g.softmax_rows(g.scale(g.matmul_nt(q, k), scale));
}

/// minmax_norm(Σ_{s∈span} Σ_j M_j[:, s]) per span → hw×1 each.
template <typename T>
std::vector<Var> aggregate_global_maps(Graph<T>& g, const std::vector<Var>& site_maps,
                                       const std::vector<TokenSpan>& spans) {
    if (site_maps.empty()) throw ShapeError("aggregate_global_maps: no attention maps");
    const auto& shape = g.value(site_maps.front()).shape();
    for (Var m : site_maps)
        if (g.value(m).shape() != shape) throw ShapeError("aggregate_global_maps: site maps differ in shape");
    std::vector<Var> out;
    out.reserve(spans.size());
    for (const auto& span : spans) {
        Var acc = g.sum_cols(site_maps.front(), span.start, span.length);
        for (std::size_t j = 1; j < site_maps.size(); ++j)
            acc = g.add(acc, g.sum_cols(site_maps[j], span.start, span.length));
        out.push_back(g.minmax_norm(acc));
    }
    return out;
}

/// One context-aware layer applied to a single map (hw×1).
template <typename T>
Var context_block(Graph<T>& g, Var map, Var features, Var positions, const ContextBlockWeights<Var>& w,
                  std::size_t heads, std::vector<Var>* preclamp = nullptr) {
    Var e = g.add(g.add_row(g.matmul(map, w.embed_w), w.embed_b), positions);
    Var attn = multi_head_attention(g, norm(g, e, w.norm_q), norm(g, features, w.norm_kv), w.attn, heads);
    e = g.add(e, attn);
    e = g.add(e, feed_forward(g, norm(g, e, w.norm_ff), w.ff));
    Var delta = g.add_row(g.matmul(e, w.head_w), w.head_b);
    Var updated = g.add(map, delta);
    if (preclamp) preclamp->push_back(updated);
    return g.clamp01(updated);
}

template <typename T>
Var refine_context_map(Graph<T>& g, Var map, Var features, Var positions,
                       const std::vector<ContextBlockWeights<Var>>& blocks, std::size_t heads,
                       std::vector<Var>* preclamp = nullptr) {
    for (const auto& b : blocks) map = context_block(g, map, features, positions, b, heads, preclamp);
    return map;
}

/// Σ_f ‖target_f - map_f‖₂
template <typename T>
Var context_loss(Graph<T>& g, const std::vector<Var>& maps, const std::vector<Var>& targets) {
    if (maps.size() != targets.size()) throw ShapeError("context_loss: map/alpha count mismatch");
    Var total = g.constant(BasicTensor<T>::scalar(T(0)));
    for (std::size_t f = 0; f < maps.size(); ++f) total = g.add(total, g.l2_norm(g.sub(targets[f], maps[f])));
    return total;
}

/// Σ_f ‖M_G^f - M_F^f‖₂ with the global maps detached.
template <typename T>
Var layout_loss(Graph<T>& g, const std::vector<Var>& global_maps, const std::vector<Var>& foreground_maps) {
    if (global_maps.size() != foreground_maps.size()) throw ShapeError("layout_loss: map count mismatch");
    Var total = g.constant(BasicTensor<T>::scalar(T(0)));
    for (std::size_t f = 0; f < global_maps.size(); ++f) {
        if (g.value(global_maps[f]).shape() != g.value(foreground_maps[f]).shape())
            throw ShapeError("layout_loss: map shape mismatch");
        total = g.add(total, g.l2_norm(g.sub(g.detach(global_maps[f]), foreground_maps[f])));
    }
    return total;
}

/// z_global ⊙ m + z_fg ⊙ (1 - m), m broadcast over channels.
template <typename T>
Var inject_global(Graph<T>& g, Var z_fg, Var z_global, Var m) {
    return g.add(g.mul_col(z_global, m), g.mul_col(z_fg, g.one_minus(m)));
}

/// Additive mask for a joint key sequence of `layers` segments of `tokens`
/// rows each; only the last (global) segment is visible.
template <typename T>
BasicTensor<T> global_only_mask(std::size_t queries, std::size_t layers, std::size_t tokens) {
    BasicTensor<T> mask = BasicTensor<T>::matrix(queries, layers * tokens, -std::numeric_limits<T>::infinity());
    for (std::size_t r = 0; r < queries; ++r)
        for (std::size_t c = (layers - 1) * tokens; c < layers * tokens; ++c) mask.at(r, c) = T(0);
    return mask;
}

/// Each layer's own queries attend over keys/values projected from the
/// concatenation of all layers (global last).
template <typename T>
std::vector<Var> layer_shared_attention(Graph<T>& g, const std::vector<Var>& layers, const AttentionWeights<Var>& w,
                                        std::size_t heads, MaskMode mode, bool mask_global_rows_only = false) {
    if (layers.empty()) throw ShapeError("layer_shared_attention: empty batch");
    const std::size_t tokens = g.value(layers.front()).rows();
    for (Var l : layers)
        if (g.value(l).shape() != g.value(layers.front()).shape())
            throw ShapeError("layer_shared_attention: layers differ in shape");
    Var joint = g.concat_rows(layers);
    Var k = g.matmul(joint, w.wk);
    Var v = g.matmul(joint, w.wv);
    BasicTensor<T> mask;
    if (mode == MaskMode::global_only) mask = global_only_mask<T>(tokens, layers.size(), tokens);
    std::vector<Var> out;
    out.reserve(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const bool masked = mode == MaskMode::global_only && (!mask_global_rows_only || i + 1 == layers.size());
        Var q = g.matmul(layers[i], w.wq);
        out.push_back(g.matmul(attend(g, q, k, v, heads, masked ? &mask : nullptr), w.wo));
    }
    return out;
}

// ---- Tensor-level API ---------------------------------------------------------

struct CrossAttnMap {
    Tensor map;  // hw×S
    int site = 0;
};

struct GlobalContextMap {
    std::vector<Tensor> maps;  // one h×w map per foreground
    std::size_t depth = 0;
};

CrossAttnMap cross_attn_map(const Tensor& z, const Tensor& global_embedding, const Tensor& wq, const Tensor& wk,
                            int site = 0);

GlobalContextMap aggregate_global_maps(const std::vector<CrossAttnMap>& maps, const std::vector<TokenSpan>& spans,
                                       std::size_t h, std::size_t w);

/// Applies the context-aware layers to every foreground map. `features` is
/// Σ_j z_t^{j,k+1} (hw×D).
GlobalContextMap refine_context(const GlobalContextMap& initial, const Tensor& features,
                                const ContextAwareLayerParams& params);

/// Σ_f ‖alpha_f - M_G^f‖₂; alphas must already be on the map grid.
float context_loss(const GlobalContextMap& maps, const std::vector<Tensor>& alphas);

float layout_loss(const GlobalContextMap& global_maps, const std::vector<Tensor>& foreground_maps);

/// Blend for t ≥ inject_from, identity otherwise. z tensors are hw×D (or
/// h×w×D); m is h×w (or hw×1).
Tensor inject_global(const Tensor& z_fg, const Tensor& z_global, const Tensor& m, int t, int inject_from);

struct LatentBatch {
    std::vector<Tensor> layers;  // background, foregrounds..., global; each hw×D
    int timestep = 0;
};

LatentBatch layer_shared_attention(const LatentBatch& batch, const AttentionWeights<Tensor>& weights,
                                   std::size_t heads, MaskMode mode, bool mask_global_rows_only = false);

}  // namespace layerforge
