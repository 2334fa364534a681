#include "layerforge/diffusion.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "layerforge/numerics.hpp"
#include "layerforge/tensor_io.hpp"

namespace layerforge {

Tensor q_sample(const Tensor& z0, int t, const Tensor& noise, const NoiseSchedule& sched) {
    if (z0.shape() != noise.shape()) throw ShapeError("q_sample: noise shape differs from z0");
    const double a = sched.abar(t);
    const double sa = std::sqrt(a), sn = std::sqrt(1.0 - a);
    Tensor out(z0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(sa * z0[i] + sn * noise[i]);
    return out;
}

Tensor predict_x0(const Tensor& z_t, const Tensor& eps, double abar_t) {
    if (z_t.shape() != eps.shape()) throw ShapeError("predict_x0: shape mismatch");
    if (!(abar_t > 0)) throw ValidationError("predict_x0: alpha_bar must be positive");
    const double sa = std::sqrt(abar_t), sn = std::sqrt(1.0 - abar_t);
    Tensor out(z_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>((z_t[i] - sn * eps[i]) / sa);
    return out;
}

Tensor ddim_update(const Tensor& z_t, const Tensor& eps, double abar_t, double abar_next) {
    if (z_t.shape() != eps.shape()) throw ShapeError("ddim_update: shape mismatch");
    if (abar_t == abar_next) return z_t;
    const double sa = std::sqrt(abar_t), sn = std::sqrt(1.0 - abar_t);
    const double na = std::sqrt(abar_next), nn = std::sqrt(1.0 - abar_next);
    Tensor out(z_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x0 = (z_t[i] - sn * eps[i]) / sa;
        out[i] = static_cast<float>(na * x0 + nn * eps[i]);
    }
    return out;
}

DenoiserOutput run_denoiser(const DenoiserModel& model, const std::vector<Tensor>& latents, const Conditioning& cond,
                            int t, const AttentionHooks& hooks) {
    Graph<float> g(false);
    const auto params = bind_parameters(g, model.params);
    std::vector<Var> z;
    for (const auto& l : latents) z.push_back(g.constant(l));
    const auto fwd = denoiser_forward(g, model, params, z, cond, t, hooks);
    DenoiserOutput out;
    const Shape grid{model.config.latent_h, model.config.latent_w};
    for (Var e : fwd.eps) out.eps.push_back(g.value(e));
    for (Var m : fwd.context_maps) out.context_maps.push_back(g.value(m).reshaped(grid));
    for (Var m : fwd.foreground_maps) out.foreground_maps.push_back(g.value(m).reshaped(grid));
    return out;
}

NoisePredictor make_predictor(const DenoiserModel& model, Conditioning cond, AttentionHooks hooks) {
    return [&model, cond = std::move(cond), hooks](const std::vector<Tensor>& latents, int t) {
        return run_denoiser(model, latents, cond, t, hooks).eps;
    };
}

std::vector<Tensor> ddim_step(const NoisePredictor& predict, const std::vector<Tensor>& z_t, int t, int t_next,
                              const NoiseSchedule& sched) {
    if (t == t_next) return z_t;
    const double a = sched.abar(t), an = sched.abar(t_next);
    const std::vector<Tensor> eps = predict(z_t, t);
    if (eps.size() != z_t.size()) throw ShapeError("ddim_step: predictor returned wrong layer count");
    std::vector<Tensor> out;
    out.reserve(z_t.size());
    for (std::size_t i = 0; i < z_t.size(); ++i) out.push_back(ddim_update(z_t[i], eps[i], a, an));
    return out;
}

std::vector<Tensor> initial_latents(const ModelConfig& config, std::size_t layers, std::uint64_t seed,
                                    bool shared_noise) {
    Rng rng(seed, 0x1a7e);
    std::vector<Tensor> z;
    for (std::size_t l = 0; l < layers; ++l) {
        if (shared_noise && l > 0)
            z.push_back(z.front());
        else
            z.push_back(rng.normal_tensor<float>({config.tokens(), config.dim}));
    }
    return z;
}

std::vector<Tensor> ddim_sample(const NoisePredictor& predict, std::vector<Tensor> z, const std::vector<int>& timesteps,
                                const NoiseSchedule& sched, const StepObserver& observer) {
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
        if (observer) observer(timesteps[i], z);
        if (i + 1 < timesteps.size()) {
            if (timesteps[i + 1] > timesteps[i]) throw ValidationError("ddim_sample: timesteps must descend");
            z = ddim_step(predict, z, timesteps[i], timesteps[i + 1], sched);
        }
    }
    return z;
}

std::vector<std::vector<Tensor>> ddim_invert(const NoisePredictor& predict, const std::vector<Tensor>& z0,
                                             const std::vector<int>& ascending, const NoiseSchedule& sched,
                                             int refine_iterations) {
    if (refine_iterations < 0) throw ValidationError("ddim_invert: refine_iterations must be non-negative");
    std::vector<std::vector<Tensor>> traj{z0};
    for (std::size_t i = 0; i + 1 < ascending.size(); ++i) {
        const int t = ascending[i], t_next = ascending[i + 1];
        if (t_next < t) throw ValidationError("ddim_invert: timesteps must ascend");
        const std::vector<Tensor>& z = traj.back();
        std::vector<Tensor> next = ddim_step(predict, z, t, t_next, sched);
        // Fixed-point refinement: re-estimate ε at the destination so the
        // forward step from t_next lands back on z.
        for (int k = 0; k < refine_iterations; ++k) {
            const auto eps = predict(next, t_next);
            for (std::size_t l = 0; l < z.size(); ++l)
                next[l] = ddim_update(z[l], eps[l], sched.abar(t), sched.abar(t_next));
        }
        traj.push_back(std::move(next));
    }
    return traj;
}

// ---- codec ----------------------------------------------------------------------

Tensor encode_image(const DenoiserModel& model, const Tensor& rgb) {
    const auto& c = model.config;
    if (rgb.rank() != 3 || rgb.dim(0) != c.image_h || rgb.dim(1) != c.image_w || rgb.dim(2) != 3)
        throw ShapeError("encode_image: expected " + std::to_string(c.image_h) + "×" + std::to_string(c.image_w) +
                         "×3, got " + shape_string(rgb.shape()));
    const std::size_t fy = c.image_h / c.latent_h, fx = c.image_w / c.latent_w;
    const double inv = 1.0 / static_cast<double>(fy * fx);
    Tensor x = Tensor::matrix(c.tokens(), 3);
    for (std::size_t y = 0; y < c.latent_h; ++y)
        for (std::size_t xx = 0; xx < c.latent_w; ++xx)
            for (std::size_t ch = 0; ch < 3; ++ch) {
                double s = 0;
                for (std::size_t dy = 0; dy < fy; ++dy)
                    for (std::size_t dx = 0; dx < fx; ++dx) s += rgb.at(y * fy + dy, xx * fx + dx, ch);
                x.at(y * c.latent_w + xx, ch) = static_cast<float>(2.0 * s * inv - 1.0);
            }
    return matmul(x, model.codec);
}

Tensor decode_latent(const DenoiserModel& model, const Tensor& z) {
    const auto& c = model.config;
    if (z.rows() != c.tokens() || z.cols() != c.dim) throw ShapeError("decode_latent: latent must be (h·w)×D");
    Tensor x = matmul_nt(z, model.codec);
    const float s = 3.0f / static_cast<float>(c.dim);
    for (auto& v : x.storage()) v = v * s * 0.5f + 0.5f;
    Tensor img = resize_bilinear(x.reshaped({c.latent_h, c.latent_w, 3}), c.image_h, c.image_w);
    for (auto& v : img.storage()) v = std::clamp(v, 0.0f, 1.0f);
    return img;
}

Tensor decode_alpha_latent(const DenoiserModel& model, const Tensor& z) {
    Graph<float> g(false);
    const auto params = bind_parameters(g, model.params);
    Var a = alpha_head(g, model, params, g.constant(z));
    return g.value(a).reshaped({model.config.latent_h, model.config.latent_w});
}

Tensor decode_alpha(const DenoiserModel& model, const Tensor& z) {
    return resize_bilinear(decode_alpha_latent(model, z), model.config.image_h, model.config.image_w);
}

// ---- training ---------------------------------------------------------------------

TrainingExample make_training_example(const DenoiserModel& model, const LayerStack& stack) {
    stack.validate();
    const auto& c = model.config;
    if (stack.prompts.size() != stack.layer_count()) throw ValidationError("stack needs one prompt per layer");
    if (stack.layer_count() > c.max_layers) throw ValidationError("stack has more layers than the assign table");
    TrainingExample ex;
    std::vector<TokenSeq> seqs;
    for (const auto& p : stack.prompts) seqs.push_back(tokenize(p, Vocabulary::standard(), c.seq_len));
    ex.cond = Conditioning::layered(std::move(seqs));
    ex.latents.push_back(encode_image(model, stack.background.color()));
    for (const auto& fg : stack.foregrounds) {
        Tensor filled = fg.color();
        for (std::size_t y = 0; y < fg.height(); ++y)
            for (std::size_t x = 0; x < fg.width(); ++x) {
                const float a = fg.alpha().at(y, x);
                for (std::size_t ch = 0; ch < 3; ++ch) {
                    float& v = filled.at(y, x, ch);
                    v = 0.5f + a * (v - 0.5f);
                }
            }
        ex.latents.push_back(encode_image(model, filled));
        ex.alphas.push_back(resize_bilinear(fg.alpha(), c.latent_h, c.latent_w));
    }
    ex.latents.push_back(encode_image(model, composite(stack)));
    return ex;
}

Tensor balanced_alpha_weights(const Tensor& alpha) {
    std::size_t covered = 0;
    for (float v : alpha.data()) covered += v > 0.5f;
    Tensor w(alpha.shape(), 1.0f);
    if (covered == 0 || covered == alpha.size()) return w;
    const float n = static_cast<float>(alpha.size());
    const float inside = 0.5f * n / static_cast<float>(covered);
    const float outside = 0.5f * n / static_cast<float>(alpha.size() - covered);
    for (std::size_t i = 0; i < alpha.size(); ++i) w[i] = alpha[i] > 0.5f ? inside : outside;
    return w;
}

NoisySample<float> draw_noisy_sample(const TrainingExample& ex, const NoiseSchedule& sched, std::uint64_t seed,
                                     std::uint64_t step, bool shared_noise) {
    Rng rng = Rng(seed).split(step);
    NoisySample<float> s;
    s.t = static_cast<int>(rng.uniform_int(1, sched.T));
    s.cond = ex.cond;
    for (std::size_t i = 0; i < ex.latents.size(); ++i) {
        Tensor eps = (shared_noise && i > 0) ? s.noise.front() : rng.normal_tensor<float>(ex.latents[i].shape());
        s.latents.push_back(q_sample(ex.latents[i], s.t, eps, sched));
        s.noise.push_back(std::move(eps));
    }
    s.alphas = ex.alphas;
    return s;
}

double noise_loss(const DenoiserModel& model, const TrainingExample& ex, int t, std::uint64_t seed,
                  const NoiseSchedule& sched, const AttentionHooks& hooks) {
    NoisySample<float> s = draw_noisy_sample(ex, sched, seed, 0, false);
    s.t = t;
    for (std::size_t i = 0; i < ex.latents.size(); ++i) s.latents[i] = q_sample(ex.latents[i], t, s.noise[i], sched);
    Graph<float> g(false);
    const auto params = bind_parameters(g, model.params);
    return g.value(training_losses(g, model, params, s, hooks, LossWeights{}).noise).item();
}

namespace {

std::string loss_report(const StepLog& log) {
    std::ostringstream os;
    os << "step " << log.step << " t=" << log.t << " noise=" << log.noise << " context=" << log.context
       << " layout=" << log.layout << " total=" << log.total << " alpha=" << log.alpha;
    return os.str();
}

}  // namespace

StepLog train_step(DenoiserModel& model, const TrainingExample& ex, const NoiseSchedule& sched,
                   const TrainOptions& options, std::uint64_t seed, std::uint64_t step) {
    const NoisySample<float> sample = draw_noisy_sample(ex, sched, seed, step, options.shared_noise);
    StepLog log;
    log.step = step;
    log.t = sample.t;

    Graph<float> g(true);
    const auto params = bind_parameters(g, model.params);
    const LossVars losses = training_losses(g, model, params, sample, options.hooks, options.lambdas);
    log.noise = g.value(losses.noise).item();
    log.context = g.value(losses.context).item();
    log.layout = g.value(losses.layout).item();
    log.total = g.value(losses.total).item();
    g.backward(losses.total);

    Graph<float> ga(true);
    const auto alpha_params = bind_parameters(ga, model.params);
    const bool alpha_step = options.train_alpha_head && !ex.alphas.empty();
    if (alpha_step) {
        Var sum = ga.constant(Tensor::scalar(0.0f));
        for (std::size_t f = 0; f < ex.alphas.size(); ++f) {
            Var pred = alpha_head(ga, model, alpha_params, ga.constant(ex.latents[f + 1]));
            const Tensor& a = ex.alphas[f];
            Var target = ga.constant(a.reshaped({a.size(), 1}));
            Var weight = ga.constant(balanced_alpha_weights(a).reshaped({a.size(), 1}));
            sum = ga.add(sum, ga.mean_abs(ga.mul(weight, ga.sub(pred, target))));
        }
        Var loss = ga.scale(sum, 1.0f / static_cast<float>(ex.alphas.size()));
        log.alpha = ga.value(loss).item();
        ga.backward(loss);
    }

    if (!std::isfinite(log.total) || !std::isfinite(log.alpha))
        throw EvaluationError("non-finite training loss; " + loss_report(log));

    std::vector<Tensor> grads(model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const bool alpha = is_alpha_head_parameter(model.params.name(i));
        grads[i] = alpha ? ga.grad(alpha_params[i]) : g.grad(params[i]);
        if (!all_finite(grads[i]))
            throw EvaluationError("non-finite gradient for " + model.params.name(i) + "; " + loss_report(log));
    }
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const std::string& name = model.params.name(i);
        const bool alpha = is_alpha_head_parameter(name);
        if (alpha && !alpha_step) continue;
        if (!alpha && options.kv_only && !is_cross_kv_parameter(name)) continue;
        const float lr = static_cast<float>(alpha ? options.alpha_learning_rate : options.learning_rate);
        if (lr == 0.0f) continue;
        auto& p = model.params[i];
        for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * grads[i][k];
    }
    return log;
}

std::vector<StepLog> train(DenoiserModel& model, const std::vector<TrainingExample>& examples,
                           const NoiseSchedule& sched, const TrainOptions& options, std::uint64_t seed,
                           std::uint64_t first_step, std::uint64_t steps,
                           const std::function<void(const StepLog&)>& on_step) {
    if (examples.empty() && steps > 0) throw ValidationError("training needs at least one example");
    std::vector<StepLog> logs;
    for (std::uint64_t s = first_step; s < first_step + steps; ++s) {
        logs.push_back(train_step(model, examples[s % examples.size()], sched, options, seed, s));
        if (on_step) on_step(logs.back());
    }
    return logs;
}

// ---- checkpoints --------------------------------------------------------------------

namespace {

using nlohmann::json;

json config_json(const ModelConfig& c) {
    return {{"image_h", c.image_h},     {"image_w", c.image_w},   {"latent_h", c.latent_h},
            {"latent_w", c.latent_w},   {"dim", c.dim},           {"seq_len", c.seq_len},
            {"blocks", c.blocks},       {"heads", c.heads},       {"ffn_mult", c.ffn_mult},
            {"cal_depth", c.cal_depth}, {"alpha_hidden", c.alpha_hidden}, {"max_layers", c.max_layers},
            {"extraction_block", c.extraction_block}, {"timesteps", c.timesteps},
            {"beta_start", c.beta_start}, {"beta_end", c.beta_end}, {"eps_skip", c.eps_skip}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.image_h = j.at("image_h");
    c.image_w = j.at("image_w");
    c.latent_h = j.at("latent_h");
    c.latent_w = j.at("latent_w");
    c.dim = j.at("dim");
    c.seq_len = j.at("seq_len");
    c.blocks = j.at("blocks");
    c.heads = j.at("heads");
    c.ffn_mult = j.at("ffn_mult");
    c.cal_depth = j.at("cal_depth");
    c.alpha_hidden = j.at("alpha_hidden");
    c.max_layers = j.at("max_layers");
    c.extraction_block = j.at("extraction_block");
    c.timesteps = j.at("timesteps");
    c.beta_start = j.at("beta_start");
    c.beta_end = j.at("beta_end");
    c.eps_skip = j.at("eps_skip");
    c.validate();
    return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
    std::filesystem::create_directories(dir);
    json header;
    header["format"] = "layerforge-checkpoint-1";
    header["config"] = config_json(ckpt.model.config);
    header["step"] = ckpt.step;
    header["seed"] = ckpt.seed;
    save_ltens(dir / "token_table.ltens", ckpt.model.token_table);
    save_ltens(dir / "codec.ltens", ckpt.model.codec);
    json tensors = json::array();
    for (std::size_t i = 0; i < ckpt.model.params.size(); ++i) {
        const std::string file = "param_" + std::to_string(i) + ".ltens";
        save_ltens(dir / file, ckpt.model.params[i]);
        tensors.push_back({{"name", ckpt.model.params.name(i)}, {"file", file}, {"shape", ckpt.model.params[i].shape()}});
    }
    header["parameters"] = tensors;
    std::ofstream out(dir / "header.json");
    if (!out) throw IoError("cannot write checkpoint header in " + dir.string());
    out << header.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "header.json");
    if (!in) throw IoError("no checkpoint header in " + dir.string());
    json header;
    try {
        header = json::parse(in);
    } catch (const json::exception& e) {
        throw IoError("malformed checkpoint header: " + std::string(e.what()));
    }
    Checkpoint ckpt;
    ckpt.step = header.at("step");
    ckpt.seed = header.at("seed");
    auto& m = ckpt.model;
    m.config = config_from_json(header.at("config"));
    m.token_table = load_ltens(dir / "token_table.ltens");
    m.codec = load_ltens(dir / "codec.ltens");
    m.positions = positional_embedding<float>(m.config.latent_h, m.config.latent_w, m.config.dim);
    for (const auto& p : header.at("parameters")) {
        Tensor t = load_ltens(dir / p.at("file").get<std::string>());
        if (t.shape() != p.at("shape").get<Shape>()) throw IoError("checkpoint tensor shape mismatch");
        m.params.add(p.at("name").get<std::string>(), std::move(t));
    }
    const DenoiserModel reference = init_denoiser(m.config, 0, m.token_table.rows());
    for (std::size_t i = 0; i < reference.params.size(); ++i)
        if (!m.params.contains(reference.params.name(i)) ||
            m.params[reference.params.name(i)].shape() != reference.params[i].shape())
            throw IoError("checkpoint is missing parameter " + reference.params.name(i));
    return ckpt;
}

}  // namespace layerforge
