#include "layerforge/denoiser.hpp"

#include <cmath>

namespace layerforge {

void ModelConfig::validate() const {
    if (!image_h || !image_w || !latent_h || !latent_w || !dim || !seq_len || !blocks || !heads || !ffn_mult ||
        !alpha_hidden || !max_layers)
        throw ValidationError("model dimensions must be positive");
    if (image_h % latent_h || image_w % latent_w)
        throw ValidationError("image size must be a multiple of the latent grid");
    if (dim % heads) throw ValidationError("head count must divide the model width");
    if (dim < 3) throw ValidationError("model width must be at least 3 (RGB codec)");
    if (seq_len < 2) throw ValidationError("sequence length must be at least 2");
    if (extraction_block >= blocks) throw ValidationError("extraction block outside the block stack");
    schedule();  // validates the schedule fields
}

bool is_alpha_head_parameter(const std::string& name) { return name.rfind("alpha.", 0) == 0; }

bool is_cross_kv_parameter(const std::string& name) {
    const auto ends_with = [&](const char* s) {
        const std::string suffix(s);
        return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    return ends_with(".cross.k") || ends_with(".cross.v");
}

namespace {

std::string block_name(std::size_t b, const char* leaf) { return "block" + std::to_string(b) + "." + leaf; }
std::string cal_name(std::size_t n, const char* leaf) { return "cal" + std::to_string(n) + "." + leaf; }

Tensor orthogonal_codec(std::size_t dim, Rng& rng) {
    Tensor p = rng.normal_tensor<float>({3, dim});
    std::vector<double> rows(3 * dim);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = p[i];
    for (std::size_t r = 0; r < 3; ++r) {
        double* row = rows.data() + r * dim;
        for (std::size_t q = 0; q < r; ++q) {
            const double* prev = rows.data() + q * dim;
            double dot = 0;
            for (std::size_t c = 0; c < dim; ++c) dot += row[c] * prev[c];
            for (std::size_t c = 0; c < dim; ++c) row[c] -= dot * prev[c];
        }
        double n = 0;
        for (std::size_t c = 0; c < dim; ++c) n += row[c] * row[c];
        n = std::sqrt(n);
        for (std::size_t c = 0; c < dim; ++c) row[c] /= n;
    }
    const double s = std::sqrt(static_cast<double>(dim) / 3.0);
    for (std::size_t i = 0; i < rows.size(); ++i) p[i] = static_cast<float>(rows[i] * s);
    return p;
}

}  // namespace

DenoiserModel init_denoiser(const ModelConfig& config, std::uint64_t seed, std::size_t vocab_size) {
    config.validate();
    const std::size_t D = config.dim, F = config.ffn_mult * D, A = config.alpha_hidden;
    Rng root(seed);
    Rng tables = root.split(1), weights = root.split(2), codec = root.split(3);
    const double sd = 1.0 / std::sqrt(static_cast<double>(D));
    auto normal = [&](std::size_t r, std::size_t c, double s) { return weights.normal_tensor<float>({r, c}, s); };
    auto zeros = [](std::size_t r, std::size_t c) { return Tensor({r, c}, 0.0f); };
    auto ones = [](std::size_t r, std::size_t c) { return Tensor({r, c}, 1.0f); };

    DenoiserModel m;
    m.config = config;
    m.token_table = tables.normal_tensor<float>({vocab_size, D});
    m.positions = positional_embedding<float>(config.latent_h, config.latent_w, D);
    m.codec = orthogonal_codec(D, codec);

    auto& p = m.params;
    p.add("layer_assign", zeros(config.max_layers + 1, D));
    p.add("in.w", normal(D, D, sd));
    p.add("in.b", zeros(1, D));
    p.add("time.w", normal(D, D, sd));
    p.add("time.b", zeros(1, D));
    for (std::size_t b = 0; b < config.blocks; ++b) {
        for (const char* n : {"norm1", "norm2", "norm3"}) {
            p.add(block_name(b, n) + ".g", ones(1, D));
            p.add(block_name(b, n) + ".b", zeros(1, D));
        }
        for (const char* n : {"self.q", "self.k", "self.v", "self.o", "cross.q", "cross.k", "cross.v", "cross.o"})
            p.add(block_name(b, n), normal(D, D, sd));
        p.add(block_name(b, "ff.w1"), normal(D, F, sd));
        p.add(block_name(b, "ff.b1"), zeros(1, F));
        p.add(block_name(b, "ff.w2"), normal(F, D, 1.0 / std::sqrt(static_cast<double>(F))));
        p.add(block_name(b, "ff.b2"), zeros(1, D));
    }
    p.add("out.w", normal(D, D, 0.1 * sd));
    p.add("out.b", zeros(1, D));
    for (std::size_t n = 0; n < config.cal_depth; ++n) {
        p.add(cal_name(n, "embed.w"), normal(1, D, 1.0));
        p.add(cal_name(n, "embed.b"), zeros(1, D));
        for (const char* nm : {"norm_q", "norm_kv", "norm_ff"}) {
            p.add(cal_name(n, nm) + std::string(".g"), ones(1, D));
            p.add(cal_name(n, nm) + std::string(".b"), zeros(1, D));
        }
        for (const char* nm : {"attn.q", "attn.k", "attn.v", "attn.o"}) p.add(cal_name(n, nm), normal(D, D, sd));
        p.add(cal_name(n, "ff.w1"), normal(D, F, sd));
        p.add(cal_name(n, "ff.b1"), zeros(1, F));
        p.add(cal_name(n, "ff.w2"), normal(F, D, 1.0 / std::sqrt(static_cast<double>(F))));
        p.add(cal_name(n, "ff.b2"), zeros(1, D));
        p.add(cal_name(n, "head.w"), zeros(D, 1));
        p.add(cal_name(n, "head.b"), zeros(1, 1));
    }
    p.add("alpha.w1", normal(D, A, sd));
    p.add("alpha.b1", zeros(1, A));
    p.add("alpha.w2", zeros(A, 1));
    p.add("alpha.b2", zeros(1, 1));
    return m;
}

template <typename T>
BasicTensor<T> timestep_features(int t, std::size_t dim) {
    BasicTensor<T> out = BasicTensor<T>::matrix(1, dim);
    const std::size_t half = dim / 2;
    for (std::size_t c = 0; c < dim; ++c) {
        const std::size_t k = c < half ? c : c - half;
        const double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(std::max<std::size_t>(half, 1)));
        out[c] = static_cast<T>(c < half ? std::sin(t * freq) : std::cos(t * freq));
    }
    return out;
}

namespace {

template <typename T>
struct Resolver {
    const Denoiser<T>& model;
    const std::vector<Var>& vars;
    Var operator()(const std::string& name) const { return vars.at(model.params.index(name)); }
    NormWeights<Var> norm(const std::string& prefix) const { return {(*this)(prefix + ".g"), (*this)(prefix + ".b")}; }
    FeedForwardWeights<Var> ff(const std::string& prefix) const {
        return {(*this)(prefix + ".w1"), (*this)(prefix + ".b1"), (*this)(prefix + ".w2"), (*this)(prefix + ".b2")};
    }
};

/// Prompt embedding plus assign row `layer`, in-graph so the assign table trains.
template <typename T>
Var layer_embedding(Graph<T>& g, const Denoiser<T>& model, Var assign, const TokenSeq& seq, std::size_t layer) {
    if (layer > model.config.max_layers)
        throw IndexError("layer index " + std::to_string(layer) + " outside assign table");
    if (seq.capacity() != model.config.seq_len) throw ShapeError("token sequence length differs from model");
    BasicTensor<T> tokens = BasicTensor<T>::matrix(seq.capacity(), model.config.dim);
    const std::size_t D = model.config.dim;
    for (std::size_t r = 0; r < seq.capacity(); ++r) {
        const auto id = static_cast<std::size_t>(seq.ids[r]);
        if (id >= model.token_table.rows()) throw IndexError("token id outside table");
        std::copy_n(model.token_table.raw() + id * D, D, tokens.raw() + r * D);
    }
    return g.add_row(g.constant(std::move(tokens)), g.slice_rows(assign, layer, 1));
}

template <typename T>
Var special_rows(Graph<T>& g, const Denoiser<T>& model, int token, std::size_t count) {
    const std::size_t D = model.config.dim;
    BasicTensor<T> rows = BasicTensor<T>::matrix(count, D);
    for (std::size_t r = 0; r < count; ++r)
        std::copy_n(model.token_table.raw() + static_cast<std::size_t>(token) * D, D, rows.raw() + r * D);
    return g.constant(std::move(rows));
}

template <typename T>
Var global_embedding(Graph<T>& g, const Denoiser<T>& model, Var assign, const Conditioning& cond,
                     std::vector<TokenSpan>& spans) {
    if (cond.plain) {
        if (cond.global_seqs.size() != 1) throw ValidationError("plain conditioning takes exactly one prompt");
        spans = {{1, cond.global_seqs[0].content_length}};
        return g.constant(token_embedding(cond.global_seqs[0], model.token_table.template cast<float>())
                              .template cast<T>());
    }
    const GlobalLayout layout = plan_global(cond.global_seqs, model.config.seq_len);
    spans = layout.spans;
    std::vector<Var> parts{special_rows(g, model, kSosId, 1)};
    for (std::size_t l = 0; l < cond.global_seqs.size(); ++l) {
        if (cond.global_seqs[l].content_length == 0) continue;
        Var e = layer_embedding(g, model, assign, cond.global_seqs[l], l + 1);
        parts.push_back(g.slice_rows(e, 1, cond.global_seqs[l].content_length));
    }
    parts.push_back(special_rows(g, model, kEosId, 1));
    std::size_t used = 2;
    for (const auto& s : cond.global_seqs) used += s.content_length;
    if (used < model.config.seq_len) parts.push_back(special_rows(g, model, kPadId, model.config.seq_len - used));
    return g.concat_rows(parts);
}

}  // namespace

template <typename T>
ForwardResult<T> denoiser_forward(Graph<T>& g, const Denoiser<T>& model, const std::vector<Var>& params,
                                  const std::vector<Var>& latents, const Conditioning& cond, int t,
                                  const AttentionHooks& hooks) {
    const auto& cfg = model.config;
    const Resolver<T> P{model, params};
    const std::size_t n = latents.size();
    if (n == 0) throw ShapeError("denoiser: empty batch");
    if (cond.layer_seqs.size() + 1 != n)
        throw ShapeError("denoiser: need one prompt per non-global layer (" + std::to_string(n - 1) + "), got " +
                         std::to_string(cond.layer_seqs.size()));
    for (Var z : latents)
        if (g.value(z).rows() != cfg.tokens() || g.value(z).cols() != cfg.dim)
            throw ShapeError("denoiser: latent must be (h·w)×D");

    Var assign = P("layer_assign");
    std::vector<TokenSpan> spans;
    std::vector<Var> cond_emb;
    for (std::size_t i = 0; i + 1 < n; ++i) cond_emb.push_back(layer_embedding(g, model, assign, cond.layer_seqs[i], i + 1));
    cond_emb.push_back(global_embedding(g, model, assign, cond, spans));
    const std::size_t global = n - 1;
    const std::size_t foregrounds = n >= 3 ? n - 2 : 0;
    if (foregrounds && spans.size() != foregrounds + 1)
        throw ShapeError("denoiser: global prompt sources do not match the layer batch");

    Var pos = g.constant(model.positions);
    Var time_row = g.add(g.matmul(g.constant(timestep_features<T>(t, cfg.dim)), P("time.w")), P("time.b"));
    time_row = g.add(time_row, P("in.b"));
    std::vector<Var> h(n);
    for (std::size_t i = 0; i < n; ++i) h[i] = g.add_row(g.add(g.matmul(latents[i], P("in.w")), pos), time_row);

    ForwardResult<T> out;
    const bool injecting = hooks.inject_global && t >= hooks.inject_from && foregrounds > 0;
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        const auto name = [&](const char* leaf) { return block_name(b, leaf); };
        std::vector<Var> x(n);
        for (std::size_t i = 0; i < n; ++i) x[i] = norm(g, h[i], P.norm(name("norm1")));
        if (injecting && b > cfg.extraction_block)
            for (std::size_t f = 0; f < foregrounds; ++f)
                x[f + 1] = inject_global(g, x[f + 1], x[global], out.context_maps[f]);

        const AttentionWeights<Var> self{P(name("self.q")), P(name("self.k")), P(name("self.v")), P(name("self.o"))};
        std::vector<Var> attn;
        if (hooks.share_layers) {
            attn = layer_shared_attention(g, x, self, cfg.heads, hooks.mask, hooks.mask_global_rows_only);
        } else {
            for (Var xi : x) attn.push_back(multi_head_attention(g, xi, xi, self, cfg.heads));
        }
        for (std::size_t i = 0; i < n; ++i) h[i] = g.add(h[i], attn[i]);

        std::vector<Var> maps(n);
        Var site_features{};
        for (std::size_t i = 0; i < n; ++i) {
            Var y = norm(g, h[i], P.norm(name("norm2")));
            maps[i] = cross_attention_map(g, y, cond_emb[i], P(name("cross.q")), P(name("cross.k")));
            Var values = g.matmul(g.matmul(cond_emb[i], P(name("cross.v"))), P(name("cross.o")));
            h[i] = g.add(h[i], g.matmul(maps[i], values));
            if (i == global) site_features = y;
        }

        if (b == cfg.extraction_block && foregrounds > 0) {
            const std::vector<TokenSpan> fg_spans(spans.begin() + 1, spans.end());
            out.initial_maps = aggregate_global_maps(g, {maps[global]}, fg_spans);
            for (const auto& span : fg_spans) out.normalize_inputs.push_back(g.sum_cols(maps[global], span.start, span.length));
            std::vector<ContextBlockWeights<Var>> cal;
            for (std::size_t c = 0; c < cfg.cal_depth; ++c) {
                const auto cn = [&](const char* leaf) { return cal_name(c, leaf); };
                cal.push_back({P(cn("embed.w")),
                               P(cn("embed.b")),
                               P.norm(cn("norm_q")),
                               P.norm(cn("norm_kv")),
                               P.norm(cn("norm_ff")),
                               {P(cn("attn.q")), P(cn("attn.k")), P(cn("attn.v")), P(cn("attn.o"))},
                               P.ff(cn("ff")),
                               P(cn("head.w")),
                               P(cn("head.b"))});
            }
            for (Var m0 : out.initial_maps)
                out.context_maps.push_back(
                    refine_context_map(g, m0, site_features, pos, cal, cfg.heads, &out.clamp_inputs));
            for (std::size_t f = 0; f < foregrounds; ++f) {
                Var summed = g.sum_cols(maps[f + 1], 1, cond.layer_seqs[f + 1].content_length);
                out.normalize_inputs.push_back(summed);
                out.foreground_maps.push_back(g.minmax_norm(summed));
            }
        }

        for (std::size_t i = 0; i < n; ++i)
            h[i] = g.add(h[i], feed_forward(g, norm(g, h[i], P.norm(name("norm3"))), P.ff(name("ff"))));
    }
    const T skip = cfg.eps_skip ? static_cast<T>(std::sqrt(1.0 - cfg.schedule().abar(t))) : T(0);
    for (std::size_t i = 0; i < n; ++i) {
        Var eps = g.add_row(g.matmul(h[i], P("out.w")), P("out.b"));
        if (cfg.eps_skip) eps = g.add(eps, g.scale(latents[i], skip));
        out.eps.push_back(eps);
    }
    return out;
}

template <typename T>
LossVars training_losses(Graph<T>& g, const Denoiser<T>& model, const std::vector<Var>& params,
                         const NoisySample<T>& sample, const AttentionHooks& hooks, const LossWeights& weights) {
    if (sample.latents.size() != sample.noise.size()) throw ShapeError("training_losses: latent/noise count mismatch");
    std::vector<Var> z;
    for (const auto& l : sample.latents) z.push_back(g.constant(l));
    const ForwardResult<T> fwd = denoiser_forward(g, model, params, z, sample.cond, sample.t, hooks);

    Var noise = g.constant(BasicTensor<T>::scalar(T(0)));
    for (std::size_t i = 0; i < z.size(); ++i)
        noise = g.add(noise, g.mean_square(g.sub(g.constant(sample.noise[i]), fwd.eps[i])));
    noise = g.scale(noise, T(1) / static_cast<T>(z.size()));

    std::vector<Var> alphas;
    for (const auto& a : sample.alphas) alphas.push_back(g.constant(a.reshaped({a.size(), 1})));
    LossVars out;
    out.noise = noise;
    out.context = context_loss(g, fwd.context_maps, alphas);
    if (sample.layout_targets.empty()) {
        out.layout = layout_loss(g, fwd.context_maps, fwd.foreground_maps);
    } else {
        std::vector<Var> targets;
        for (const auto& m : sample.layout_targets) targets.push_back(g.constant(m.reshaped({m.size(), 1})));
        out.layout = layout_loss(g, targets, fwd.foreground_maps);
    }
    out.total = g.add(g.add(g.scale(out.noise, static_cast<T>(weights.noise)),
                            g.scale(out.context, static_cast<T>(weights.context))),
                      g.scale(out.layout, static_cast<T>(weights.layout)));
    return out;
}

template <typename T>
Var alpha_head(Graph<T>& g, const Denoiser<T>& model, const std::vector<Var>& params, Var z) {
    const Resolver<T> P{model, params};
    Var hidden = g.gelu(g.add_row(g.matmul(z, P("alpha.w1")), P("alpha.b1")));
    return g.sigmoid(g.add_row(g.matmul(hidden, P("alpha.w2")), P("alpha.b2")));
}

#define LAYERFORGE_INSTANTIATE(T)                                                                                     \
    template BasicTensor<T> timestep_features<T>(int, std::size_t);                                                  \
    template ForwardResult<T> denoiser_forward<T>(Graph<T>&, const Denoiser<T>&, const std::vector<Var>&,            \
                                                  const std::vector<Var>&, const Conditioning&, int,                \
                                                  const AttentionHooks&);                                            \
    template LossVars training_losses<T>(Graph<T>&, const Denoiser<T>&, const std::vector<Var>&,                     \
                                         const NoisySample<T>&, const AttentionHooks&, const LossWeights&);          \
    template Var alpha_head<T>(Graph<T>&, const Denoiser<T>&, const std::vector<Var>&, Var);

LAYERFORGE_INSTANTIATE(float)
LAYERFORGE_INSTANTIATE(double)
LAYERFORGE_INSTANTIATE(long double)

#undef LAYERFORGE_INSTANTIATE

}  // namespace layerforge
