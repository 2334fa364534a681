#include "layerforge/checks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>

#include "layerforge/diffusion.hpp"
#include "layerforge/gradcheck.hpp"
#include "layerforge/harmonize.hpp"
#include "layerforge/numerics.hpp"
#include "layerforge/scenegen.hpp"

namespace layerforge {

namespace {

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(3);
    s << v;
    return s.str();
}

struct SuiteRunner {
    std::string suite;
    std::vector<CheckResult>& out;

    // `body` returns an empty string on success, otherwise what went wrong.
    void run(const std::string& name, const std::function<std::string()>& body) {
        CheckResult r{suite, name, false, ""};
        try {
            r.detail = body();
            r.passed = r.detail.empty();
        } catch (const std::exception& e) {
            r.detail = std::string("threw: ") + e.what();
        }
        out.push_back(std::move(r));
    }
};

LayerStack random_stack(Rng& rng, std::size_t foregrounds, std::size_t h, std::size_t w, bool binary = false) {
    LayerStack s;
    s.background = Layer::opaque(rng.uniform_tensor<float>({h, w, 3}, 0.0, 1.0));
    for (std::size_t f = 0; f < foregrounds; ++f) {
        Tensor a = rng.uniform_tensor<float>({h, w}, 0.0, 1.0);
        if (binary)
            for (auto& v : a.storage()) v = v < 0.5f ? 0.0f : 1.0f;
        s.foregrounds.emplace_back(rng.uniform_tensor<float>({h, w, 3}, 0.0, 1.0), std::move(a));
    }
    return s;
}

/// Gray "image" layers built from 1-channel latents, for the shared-algebra check.
LayerStack stack_from_latents(const Tensor& bg, const std::vector<Tensor>& fgs, const std::vector<Tensor>& alphas,
                              std::size_t h, std::size_t w) {
    auto gray = [&](const Tensor& z) {
        Tensor c({h, w, 3});
        for (std::size_t p = 0; p < h * w; ++p)
            for (std::size_t ch = 0; ch < 3; ++ch) c[p * 3 + ch] = z[p];
        return c;
    };
    LayerStack s;
    s.background = Layer::opaque(gray(bg));
    for (std::size_t i = 0; i < fgs.size(); ++i) s.foregrounds.emplace_back(gray(fgs[i]), alphas[i]);
    return s;
}

BlendFn blend_for(const FaultInjection& faults) {
    if (!faults.irh_flipped_sign) return irh_blend;
    return [](const Tensor& bg, const std::vector<Tensor>& fgs, const std::vector<Tensor>& alphas) {
        const std::size_t N = bg.rows(), D = bg.cols();
        Tensor out(bg.shape());
        for (std::size_t p = 0; p < N; ++p)
            for (std::size_t d = 0; d < D; ++d) {
                double acc = 0.0, above = 1.0;
                for (std::size_t i = fgs.size(); i-- > 0;) {
                    acc += static_cast<double>(fgs[i][p * D + d]) * alphas[i][p] * above;
                    above *= 1.0 + alphas[i][p];
                }
                out[p * D + d] = static_cast<float>(acc + bg[p * D + d] * above);
            }
        return out;
    };
}

void numerics_suite(SuiteRunner& r) {
    r.run("softmax-rows-sum-to-one", [] {
        Rng rng(11);
        for (int k = 0; k < 50; ++k) {
            const Tensor s = softmax_rows(rng.normal_tensor<float>({7, 9}, 5.0));
            for (std::size_t i = 0; i < 7; ++i) {
                double sum = 0;
                for (std::size_t j = 0; j < 9; ++j) sum += s.at(i, j);
                if (std::abs(sum - 1.0) > 1e-6) return "row sum " + fmt(sum);
            }
        }
        return std::string();
    });
    r.run("minmax-range", [] {
        Rng rng(12);
        for (int k = 0; k < 50; ++k) {
            const Tensor m = minmax_norm(rng.normal_tensor<float>({6, 6}, 3.0));
            const auto [lo, hi] = std::minmax_element(m.data().begin(), m.data().end());
            if (*lo != 0.0f || *hi != 1.0f) return "range [" + fmt(*lo) + ", " + fmt(*hi) + "]";
        }
        return std::string();
    });
    r.run("matmul-matches-naive", [] {
        Rng rng(13);
        const Tensor a = rng.normal_tensor<float>({5, 7}), b = rng.normal_tensor<float>({7, 4});
        const Tensor c = matmul(a, b);
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = 0; j < 4; ++j) {
                double s = 0;
                for (std::size_t k = 0; k < 7; ++k) s += static_cast<double>(a.at(i, k)) * b.at(k, j);
                if (std::abs(s - c.at(i, j)) > 1e-5) return "entry off by " + fmt(s - c.at(i, j));
            }
        return std::string();
    });
    r.run("resize-identity", [] {
        Rng rng(14);
        const Tensor m = rng.normal_tensor<float>({6, 5, 3});
        return resize_bilinear(m, 6, 5).bit_equal(m) ? std::string() : std::string("same-size resize changed values");
    });
    r.run("finite-difference-quadratic", [] {
        const ScalarFunction f = [](std::span<const double> x) { return x[0] * x[0] * x[1] + 3.0 * x[1]; };
        const std::vector<double> x{1.5, -2.0};
        const auto g = central_difference(f, x, 1e-3);
        const double e0 = std::abs(g[0] - 2 * x[0] * x[1]), e1 = std::abs(g[1] - (x[0] * x[0] + 3.0));
        return std::max(e0, e1) < 1e-9 ? std::string() : "error " + fmt(std::max(e0, e1));
    });
}

void compositing_suite(SuiteRunner& r) {
    r.run("sum-form-equals-over-recursion", [] {
        Rng rng(21);
        for (int k = 0; k < 100; ++k) {
            const auto s = random_stack(rng, 1 + static_cast<std::size_t>(k % 4), 8 + k % 5, 9);
            const double d = max_abs_diff(composite(s), composite_iterative(s));
            if (d > 1e-6) return "max-abs " + fmt(d);
        }
        return std::string();
    });
    r.run("opaque-top-layer-wins", [] {
        Rng rng(22);
        auto s = random_stack(rng, 2, 6, 6);
        s.foregrounds.back() = Layer(s.foregrounds.back().color(), Tensor({6, 6}, 1.0f));
        return max_abs_diff(composite(s), s.foregrounds.back().color()) == 0.0f ? std::string()
                                                                               : std::string("top layer not exact");
    });
    r.run("transparent-layers-vanish", [] {
        Rng rng(23);
        auto s = random_stack(rng, 3, 6, 6);
        for (auto& fg : s.foregrounds) fg = Layer(fg.color(), Tensor({6, 6}, 0.0f));
        return max_abs_diff(composite(s), s.background.color()) == 0.0f ? std::string()
                                                                        : std::string("background not exact");
    });
}

void attention_suite(SuiteRunner& r) {
    r.run("cross-attention-rows-sum-to-one", [] {
        Rng rng(31);
        const auto m = cross_attn_map(rng.normal_tensor<float>({16, 8}), rng.normal_tensor<float>({6, 8}),
                                      rng.normal_tensor<float>({8, 8}), rng.normal_tensor<float>({8, 8}));
        for (std::size_t i = 0; i < 16; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 6; ++j) s += m.map.at(i, j);
            if (std::abs(s - 1.0) > 1e-6) return "row sum " + fmt(s);
        }
        return std::string();
    });
    r.run("global-only-mask-isolates", [] {
        Rng rng(32);
        const AttentionWeights<Tensor> w{rng.normal_tensor<float>({8, 8}, 0.4), rng.normal_tensor<float>({8, 8}, 0.4),
                                         rng.normal_tensor<float>({8, 8}, 0.4), rng.normal_tensor<float>({8, 8}, 0.4)};
        LatentBatch b{{rng.normal_tensor<float>({16, 8}), rng.normal_tensor<float>({16, 8}),
                       rng.normal_tensor<float>({16, 8})},
                      900};
        const auto base = layer_shared_attention(b, w, 2, MaskMode::global_only);
        float worst = 0;
        for (int k = 0; k < 10; ++k) {
            b.layers[0] = rng.normal_tensor<float>({16, 8}, 3.0);
            b.layers[1] = rng.normal_tensor<float>({16, 8}, 3.0);
            const auto out = layer_shared_attention(b, w, 2, MaskMode::global_only);
            worst = std::max(worst, max_abs_diff(out.layers[2], base.layers[2]));  // the global segment
        }
        return worst < 1e-6f ? std::string() : "outputs moved by " + fmt(worst);
    });
    r.run("identical-layers-match-self-attention", [] {
        Rng rng(33);
        const AttentionWeights<Tensor> w{rng.normal_tensor<float>({8, 8}, 0.4), rng.normal_tensor<float>({8, 8}, 0.4),
                                         rng.normal_tensor<float>({8, 8}, 0.4), rng.normal_tensor<float>({8, 8}, 0.4)};
        const Tensor z = rng.normal_tensor<float>({16, 8});
        const auto single = layer_shared_attention(LatentBatch{{z}, 0}, w, 2, MaskMode::none);
        const auto pair = layer_shared_attention(LatentBatch{{z, z}, 0}, w, 2, MaskMode::none);
        const float d = std::max(max_abs_diff(pair.layers[0], single.layers[0]),
                                 max_abs_diff(pair.layers[1], single.layers[0]));
        return d < 1e-5f ? std::string() : "differs by " + fmt(d);
    });
    r.run("injection-off-below-T_G", [] {
        Rng rng(34);
        const Tensor fg = rng.normal_tensor<float>({16, 8}), gl = rng.normal_tensor<float>({16, 8});
        const Tensor m = rng.uniform_tensor<float>({4, 4}, 0.0, 1.0);
        return inject_global(fg, gl, m, 849, 850).bit_equal(fg) ? std::string()
                                                                 : std::string("foreground changed below T_G");
    });
}

void gradients_suite(SuiteRunner& r) {
    r.run("loss-gradients-match-finite-differences", [] {
        GradFixture fx = make_grad_fixture(1);
        const auto e = check_loss_gradients(fx);
        const double worst = std::max({e.noise, e.context, e.layout});
        return worst < 1e-5 ? std::string()
                            : "max relative error noise " + fmt(e.noise) + ", context " + fmt(e.context) +
                                  ", layout " + fmt(e.layout);
    });
}

void irh_suite(SuiteRunner& r, const FaultInjection& faults) {
    const BlendFn blend = blend_for(faults);
    r.run("blend-equals-compositing", [&] {
        Rng rng(51);
        for (int k = 0; k < 100; ++k) {
            const std::size_t n = 1 + static_cast<std::size_t>(k % 4);
            const Tensor bg = rng.uniform_tensor<float>({20, 1}, 0.0, 1.0);
            std::vector<Tensor> fgs, alphas;
            for (std::size_t i = 0; i < n; ++i) {
                fgs.push_back(rng.uniform_tensor<float>({20, 1}, 0.0, 1.0));
                alphas.push_back(rng.uniform_tensor<float>({4, 5}, 0.0, 1.0));
            }
            const Tensor fused = blend(bg, fgs, alphas);
            const Tensor ref = composite_iterative(stack_from_latents(bg, fgs, alphas, 4, 5));
            for (std::size_t p = 0; p < 20; ++p)
                if (std::abs(fused[p] - ref[p * 3]) > 1e-6f) return "pixel off by " + fmt(fused[p] - ref[p * 3]);
        }
        return std::string();
    });
    r.run("foreground-retention", [&] {
        Rng rng(52);
        const NoisePredictor zero = [](const std::vector<Tensor>& z, int) {
            std::vector<Tensor> e;
            for (const auto& l : z) e.emplace_back(l.shape(), 0.0f);
            return e;
        };
        const auto sched = NoiseSchedule::linear();
        const auto grid = sched.ddim_timesteps(50);
        RetainedLatents store(IrhWindow{600, 400});
        for (int t : grid)
            store.record(t, {rng.normal_tensor<float>({16, 4}), rng.normal_tensor<float>({16, 4}),
                             rng.normal_tensor<float>({16, 4})});
        Tensor alpha({4, 4}, 0.0f);
        for (std::size_t p = 0; p < 16; p += 3) alpha[p] = 1.0f;
        const IrhResult res = run_irh(zero, store, HarmonizePlan{{}, {alpha}, 0, 0}, grid, sched, blend);
        for (const auto& [t, fused] : res.fused) {
            const Tensor& fg = store.at(t)[1];
            for (std::size_t p = 0; p < 16; ++p)
                if (alpha[p] == 1.0f)
                    for (std::size_t d = 0; d < 4; ++d)
                        if (fused.at(p, d) != fg.at(p, d)) return "step " + std::to_string(t) + " lost foreground";
        }
        return res.fused.empty() ? std::string("no window steps fused") : std::string();
    });
    r.run("degenerate-window-is-plain-continuation", [&] {
        Rng rng(53);
        const Tensor w = rng.normal_tensor<float>({4, 4}, 0.3);
        const NoisePredictor lin = [w](const std::vector<Tensor>& z, int) {
            std::vector<Tensor> e;
            for (const auto& l : z) e.push_back(matmul(l, w));
            return e;
        };
        const auto sched = NoiseSchedule::linear();
        const auto grid = sched.ddim_timesteps(50);
        RetainedLatents store(IrhWindow{600, 600});
        store.record(600, {rng.normal_tensor<float>({16, 4}), rng.normal_tensor<float>({16, 4})});
        const auto res = run_irh(lin, store, HarmonizePlan{{}, {Tensor({4, 4}, 1.0f)}, 0, 0}, grid, sched, blend);
        const std::vector<int> tail(std::find(grid.begin(), grid.end(), 600), grid.end());
        const auto plain = ddim_sample(lin, {store.at(600)[0]}, tail, sched);
        return res.z0.bit_equal(plain[0]) ? std::string() : std::string("trajectory differs from plain sampling");
    });
}

void pipeline_suite(SuiteRunner& r) {
    r.run("render-decompose-recomposite-exact", [] {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const auto scene = render_scene(random_scene(seed, 1 + seed % 3, 32, 32));
            const auto dec = decompose(scene.image, scene.prompts(), scene);
            const float d = max_abs_diff(composite(dec.stack), scene.image);
            if (d != 0.0f) return "seed " + std::to_string(seed) + " max-abs " + fmt(d);
        }
        return std::string();
    });
    r.run("extraction-order-ascending-depth", [] {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const auto scene = render_scene(random_scene(seed, 1 + seed % 3, 32, 32));
            const auto dec = decompose(scene.image, scene.prompts(), scene);
            for (std::size_t i = 1; i < dec.extraction_order.size(); ++i)
                if (scene.depths[dec.extraction_order[i]] < scene.depths[dec.extraction_order[i - 1]])
                    return "seed " + std::to_string(seed) + " extracted out of depth order";
        }
        return std::string();
    });
    r.run("manifest-hash-recomposites", [] {
        const auto scene = render_scene(random_scene(7, 3, 32, 32));
        const auto m = make_manifest(scene.stack, "oracle", 7);
        return m.recomposite_hash == recomposite_hash(scene.stack) ? std::string() : std::string("hash mismatch");
    });
}

}  // namespace

const std::vector<std::string>& check_suites() {
    static const std::vector<std::string> names = {"numerics", "compositing", "attention", "gradients", "irh", "pipeline"};
    return names;
}

std::vector<CheckResult> run_checks(const std::string& suite, const FaultInjection& faults) {
    const auto& names = check_suites();
    if (suite != "all" && std::find(names.begin(), names.end(), suite) == names.end())
        throw ValidationError("unknown check suite: " + suite);
    std::vector<CheckResult> out;
    for (const auto& name : names) {
        if (suite != "all" && suite != name) continue;
        SuiteRunner r{name, out};
        if (name == "numerics") numerics_suite(r);
        if (name == "compositing") compositing_suite(r);
        if (name == "attention") attention_suite(r);
        if (name == "gradients") gradients_suite(r);
        if (name == "irh") irh_suite(r, faults);
        if (name == "pipeline") pipeline_suite(r);
    }
    return out;
}

// ---- loss-gradient fixture --------------------------------------------------------

ModelConfig grad_check_config() {
    ModelConfig c;
    c.image_h = c.image_w = 8;
    c.latent_h = c.latent_w = 4;
    c.dim = 8;
    c.seq_len = 6;
    c.blocks = 3;
    c.extraction_block = 1;
    c.heads = 2;
    c.alpha_hidden = 4;
    return c;
}

namespace {

bool clear_of_kinks(const Graph<double>& g, const ForwardResult<double>& fwd, double clamp_margin, double gap_margin) {
    for (Var v : fwd.clamp_inputs)
        for (double x : g.value(v).data())
            if (std::abs(x) < clamp_margin || std::abs(x - 1.0) < clamp_margin) return false;
    for (Var v : fwd.normalize_inputs) {
        std::vector<double> x(g.value(v).data().begin(), g.value(v).data().end());
        if (x.size() < 3) continue;
        std::sort(x.begin(), x.end());
        const double range = x.back() - x.front();
        if (!(range > 0)) return false;
        if (x[1] - x[0] < gap_margin * range || x[x.size() - 1] - x[x.size() - 2] < gap_margin * range) return false;
    }
    return true;
}

}  // namespace

GradFixture make_grad_fixture(std::uint64_t seed, double clamp_margin, double gap_margin) {
    const ModelConfig cfg = grad_check_config();
    const auto& vocab = Vocabulary::standard();
    const std::vector<TokenSeq> seqs{tokenize("blue", vocab, cfg.seq_len), tokenize("red circle", vocab, cfg.seq_len),
                                     tokenize("green", vocab, cfg.seq_len)};
    for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng(seed, 1000 + attempt);
        GradFixture fx;
        fx.attempts = attempt;
        fx.model = init_denoiser(cfg, rng.next_u64(), vocab.size()).cast<double>();
        for (std::size_t i = 0; i < fx.model.params.size(); ++i) {
            const std::string& name = fx.model.params.name(i);
            if (name == "layer_assign" || name.find(".head.") != std::string::npos)
                fx.model.params[i] = rng.normal_tensor<double>(fx.model.params[i].shape(), 0.3);
        }
        auto& s = fx.sample;
        s.cond = Conditioning::layered(seqs);
        // alternate between the injection range and the plain range
        s.t = seed % 2 ? static_cast<int>(rng.uniform_int(850, 1000)) : static_cast<int>(rng.uniform_int(1, 849));
        for (int l = 0; l < 4; ++l) {
            s.latents.push_back(rng.normal_tensor<double>({cfg.tokens(), cfg.dim}));
            s.noise.push_back(rng.normal_tensor<double>({cfg.tokens(), cfg.dim}));
        }
        for (int f = 0; f < 2; ++f) s.alphas.push_back(rng.uniform_tensor<double>({cfg.latent_h, cfg.latent_w}, 0.0, 1.0));

        Graph<double> g(false);
        const auto params = bind_parameters(g, fx.model.params);
        std::vector<Var> z;
        for (const auto& l : s.latents) z.push_back(g.constant(l));
        const auto fwd = denoiser_forward(g, fx.model, params, z, s.cond, s.t, fx.hooks);
        if (!clear_of_kinks(g, fwd, clamp_margin, gap_margin)) continue;
        for (Var m : fwd.context_maps) s.layout_targets.push_back(g.value(m));
        return fx;
    }
}

LossGradientErrors check_loss_gradients(GradFixture& fx, double eps) {
    auto& params = fx.model.params;
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < params.size(); ++i)
        if (!is_alpha_head_parameter(params.name(i))) active.push_back(i);

    std::vector<double> x0;
    for (std::size_t i : active) x0.insert(x0.end(), params[i].data().begin(), params[i].data().end());
    const auto assign = [&](std::span<const double> x) {
        std::size_t k = 0;
        for (std::size_t i : active)
            for (auto& v : params[i].storage()) v = x[k++];
    };

    std::vector<std::vector<double>> analytic(3);
    {
        Graph<double> g(true);
        const auto vars = bind_parameters(g, params);
        const auto L = training_losses(g, fx.model, vars, fx.sample, fx.hooks, LossWeights{});
        const Var roots[3] = {L.noise, L.context, L.layout};
        for (int o = 0; o < 3; ++o) {
            g.backward(roots[o]);
            for (std::size_t i : active) {
                const auto gr = g.grad(vars[i]);
                analytic[o].insert(analytic[o].end(), gr.data().begin(), gr.data().end());
            }
        }
    }

    const MultiFunction f = [&](std::span<const double> x) {
        assign(x);
        Graph<double> g(false);
        const auto vars = bind_parameters(g, params);
        const auto L = training_losses(g, fx.model, vars, fx.sample, fx.hooks, LossWeights{});
        return std::vector<double>{g.value(L.noise).item(), g.value(L.context).item(), g.value(L.layout).item()};
    };
    auto numeric = central_difference(f, x0, eps);
    assign(x0);

    // A 64-bit stencil cannot resolve gradients near |f|·ε/eps (≈1e-12 here),
    // so entries it leaves inconclusive are re-differenced in extended
    // precision, which is the same function with ~2000× less round-off.
    std::vector<std::size_t> refine;
    for (std::size_t k = 0; k < x0.size(); ++k)
        for (int o = 0; o < 3; ++o)
            if (max_relative_error(std::span(&analytic[o][k], 1), std::span(&numeric[o][k], 1)) > kRefineAbove) {
                refine.push_back(k);
                break;
            }
    if (!refine.empty()) {
        Denoiser<long double> wide = fx.model.cast<long double>();
        NoisySample<long double> s;
        s.cond = fx.sample.cond;
        s.t = fx.sample.t;
        for (const auto& x : fx.sample.latents) s.latents.push_back(x.cast<long double>());
        for (const auto& x : fx.sample.noise) s.noise.push_back(x.cast<long double>());
        for (const auto& x : fx.sample.alphas) s.alphas.push_back(x.cast<long double>());
        for (const auto& x : fx.sample.layout_targets) s.layout_targets.push_back(x.cast<long double>());
        std::vector<std::pair<std::size_t, std::size_t>> where;  // flat index → (tensor, offset)
        for (std::size_t i : active)
            for (std::size_t j = 0; j < params[i].size(); ++j) where.emplace_back(i, j);
        const auto losses = [&] {
            Graph<long double> g(false);
            const auto vars = bind_parameters(g, wide.params);
            const auto L = training_losses(g, wide, vars, s, fx.hooks, LossWeights{});
            return std::array<long double, 3>{g.value(L.noise).item(), g.value(L.context).item(), g.value(L.layout).item()};
        };
        const long double h = eps;
        for (std::size_t k : refine) {
            long double& p = wide.params[where[k].first][where[k].second];
            const long double base = p;
            std::array<std::array<long double, 3>, 4> v;
            const int offsets[4] = {-2, -1, 1, 2};
            for (int m = 0; m < 4; ++m) {
                p = base + offsets[m] * h;
                v[m] = losses();
            }
            p = base;
            for (int o = 0; o < 3; ++o)
                numeric[o][k] = static_cast<double>(((v[0][o] - v[3][o]) + 8 * (v[2][o] - v[1][o])) / (12 * h));
        }
    }

    LossGradientErrors e;
    e.parameters = x0.size();
    e.refined = refine.size();
    e.noise = max_relative_error(analytic[0], numeric[0]);
    e.context = max_relative_error(analytic[1], numeric[1]);
    e.layout = max_relative_error(analytic[2], numeric[2]);
    return e;
}

}  // namespace layerforge
