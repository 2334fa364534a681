#include "layerforge/attention.hpp"

namespace layerforge {

std::string to_string(MaskMode mode) {
    return mode == MaskMode::global_only ? "global_only" : "none";
}

MaskMode mask_mode_from_string(const std::string& name) {
    if (name == "none") return MaskMode::none;
    if (name == "global_only") return MaskMode::global_only;
    throw ValidationError("unknown mask mode: " + name);
}

ContextAwareLayerParams ContextAwareLayerParams::create(std::size_t depth, std::size_t dim, std::size_t heads,
                                                        Rng& rng) {
    if (heads == 0 || dim % heads != 0) throw ShapeError("context layers: head count must divide width");
    const double s = 1.0 / std::sqrt(static_cast<double>(dim));
    const std::size_t hidden = 4 * dim;
    auto norm_init = [&] { return NormWeights<Tensor>{Tensor({1, dim}, 1.0f), Tensor({1, dim}, 0.0f)}; };
    ContextAwareLayerParams p;
    p.heads = heads;
    for (std::size_t n = 0; n < depth; ++n) {
        ContextBlockWeights<Tensor> b;
        b.embed_w = rng.normal_tensor<float>({1, dim});
        b.embed_b = Tensor({1, dim}, 0.0f);
        b.norm_q = norm_init();
        b.norm_kv = norm_init();
        b.norm_ff = norm_init();
        b.attn = {rng.normal_tensor<float>({dim, dim}, s), rng.normal_tensor<float>({dim, dim}, s),
                  rng.normal_tensor<float>({dim, dim}, s), rng.normal_tensor<float>({dim, dim}, s)};
        b.ff = {rng.normal_tensor<float>({dim, hidden}, s), Tensor({1, hidden}, 0.0f),
                rng.normal_tensor<float>({hidden, dim}, 1.0 / std::sqrt(static_cast<double>(hidden))),
                Tensor({1, dim}, 0.0f)};
        b.head_w = Tensor({dim, 1}, 0.0f);
        b.head_b = Tensor({1, 1}, 0.0f);
        p.blocks.push_back(std::move(b));
    }
    return p;
}

namespace {

AttentionWeights<Var> bind(Graph<float>& g, const AttentionWeights<Tensor>& w) {
    return {g.constant(w.wq), g.constant(w.wk), g.constant(w.wv), g.constant(w.wo)};
}

NormWeights<Var> bind(Graph<float>& g, const NormWeights<Tensor>& w) {
    return {g.constant(w.gain), g.constant(w.bias)};
}

ContextBlockWeights<Var> bind(Graph<float>& g, const ContextBlockWeights<Tensor>& w) {
    return {g.constant(w.embed_w),
            g.constant(w.embed_b),
            bind(g, w.norm_q),
            bind(g, w.norm_kv),
            bind(g, w.norm_ff),
            bind(g, w.attn),
            {g.constant(w.ff.w1), g.constant(w.ff.b1), g.constant(w.ff.w2), g.constant(w.ff.b2)},
            g.constant(w.head_w),
            g.constant(w.head_b)};
}

Tensor as_column(const Tensor& m) { return m.reshaped({m.size(), 1}); }

}  // namespace

CrossAttnMap cross_attn_map(const Tensor& z, const Tensor& global_embedding, const Tensor& wq, const Tensor& wk,
                            int site) {
    z.require_rank(2);
    global_embedding.require_rank(2);
    if (z.cols() != wq.rows() || global_embedding.cols() != wk.rows() || wq.cols() != wk.cols())
        throw ShapeError("cross_attn_map: projection shapes do not match inputs");
    Graph<float> g(false);
    Var m = cross_attention_map(g, g.constant(z), g.constant(global_embedding), g.constant(wq), g.constant(wk));
    return {g.value(m), site};
}

GlobalContextMap aggregate_global_maps(const std::vector<CrossAttnMap>& maps, const std::vector<TokenSpan>& spans,
                                       std::size_t h, std::size_t w) {
    Graph<float> g(false);
    std::vector<Var> sites;
    for (const auto& m : maps) sites.push_back(g.constant(m.map));
    if (!maps.empty() && maps.front().map.rows() != h * w)
        throw ShapeError("aggregate_global_maps: map rows do not match h·w");
    GlobalContextMap out;
    for (Var v : aggregate_global_maps(g, sites, spans)) out.maps.push_back(g.value(v).reshaped({h, w}));
    return out;
}

GlobalContextMap refine_context(const GlobalContextMap& initial, const Tensor& features,
                                const ContextAwareLayerParams& params) {
    GlobalContextMap out;
    out.depth = initial.depth + params.blocks.size();
    if (params.blocks.empty()) {
        out.maps = initial.maps;
        return out;
    }
    Graph<float> g(false);
    std::vector<ContextBlockWeights<Var>> blocks;
    for (const auto& b : params.blocks) blocks.push_back(bind(g, b));
    Var feats = g.constant(features);
    for (const auto& m : initial.maps) {
        if (m.size() != features.rows()) throw ShapeError("refine_context: map and features disagree on h·w");
        Var pos = g.constant(positional_embedding<float>(m.dim(0), m.rank() == 2 ? m.dim(1) : 1, features.cols()));
        Var r = refine_context_map(g, g.constant(as_column(m)), feats, pos, blocks, params.heads);
        out.maps.push_back(g.value(r).reshaped(m.shape()));
    }
    return out;
}

float context_loss(const GlobalContextMap& maps, const std::vector<Tensor>& alphas) {
    if (maps.maps.size() != alphas.size()) throw ShapeError("context_loss: map/alpha count mismatch");
    Graph<float> g(false);
    std::vector<Var> m, a;
    for (std::size_t f = 0; f < alphas.size(); ++f) {
        if (maps.maps[f].size() != alphas[f].size()) throw ShapeError("context_loss: alpha not on the map grid");
        m.push_back(g.constant(as_column(maps.maps[f])));
        a.push_back(g.constant(as_column(alphas[f])));
    }
    return g.value(context_loss(g, m, a)).item();
}

float layout_loss(const GlobalContextMap& global_maps, const std::vector<Tensor>& foreground_maps) {
    Graph<float> g(false);
    std::vector<Var> gm, fm;
    for (const auto& m : global_maps.maps) gm.push_back(g.constant(as_column(m)));
    for (const auto& m : foreground_maps) fm.push_back(g.constant(as_column(m)));
    return g.value(layout_loss(g, gm, fm)).item();
}

Tensor inject_global(const Tensor& z_fg, const Tensor& z_global, const Tensor& m, int t, int inject_from) {
    if (z_fg.shape() != z_global.shape()) throw ShapeError("inject_global: latent shapes differ");
    if (t < inject_from) return z_fg;
    const std::size_t cells = m.size();
    if (cells == 0 || z_fg.size() % cells != 0 || z_fg.dim(0) * (z_fg.rank() == 3 ? z_fg.dim(1) : 1) != cells)
        throw ShapeError("inject_global: map does not match latent grid");
    const std::size_t D = z_fg.size() / cells;
    Tensor out = z_fg;
    for (std::size_t p = 0; p < cells; ++p) {
        const float a = m[p];
        for (std::size_t c = 0; c < D; ++c) {
            const std::size_t i = p * D + c;
            out[i] = z_global[i] * a + z_fg[i] * (1.0f - a);
        }
    }
    return out;
}

LatentBatch layer_shared_attention(const LatentBatch& batch, const AttentionWeights<Tensor>& weights,
                                   std::size_t heads, MaskMode mode, bool mask_global_rows_only) {
    Graph<float> g(false);
    std::vector<Var> layers;
    for (const auto& l : batch.layers) layers.push_back(g.constant(l));
    LatentBatch out;
    out.timestep = batch.timestep;
    for (Var v : layer_shared_attention(g, layers, bind(g, weights), heads, mode, mask_global_rows_only))
        out.layers.push_back(g.value(v));
    return out;
}

}  // namespace layerforge
