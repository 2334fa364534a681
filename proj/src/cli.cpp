#include "layerforge/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "layerforge/scenegen.hpp"
#include "layerforge/tensor_io.hpp"

namespace layerforge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- strict JSON access --------------------------------------------------------

class Fields {
public:
    Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ValidationError(label() + " must be an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    const json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    void boolean(const std::string& key, bool& dst) {
        if (!take(key)) return;
        if (!j_[key].is_boolean()) throw type_error(key, "a boolean");
        dst = j_[key].get<bool>();
    }

    template <typename I>
    void integer(const std::string& key, I& dst) {
        if (!take(key)) return;
        const json& v = j_[key];
        if (!v.is_number_integer()) throw type_error(key, "an integer");
        if constexpr (std::is_unsigned_v<I>) {
            if (!v.is_number_unsigned()) throw type_error(key, "a non-negative integer");
            dst = static_cast<I>(v.get<std::uint64_t>());
        } else {
            dst = static_cast<I>(v.get<std::int64_t>());
        }
    }

    void number(const std::string& key, double& dst) {
        if (!take(key)) return;
        if (!j_[key].is_number()) throw type_error(key, "a number");
        dst = j_[key].get<double>();
    }

    void string(const std::string& key, std::string& dst) {
        if (!take(key)) return;
        if (!j_[key].is_string()) throw type_error(key, "a string");
        dst = j_[key].get<std::string>();
    }

    Fields object(const std::string& key) {
        seen_.insert(key);
        return Fields(j_.at(key), where_.empty() ? key : where_ + "." + key);
    }

    /// Every key must have been consumed.
    void finish() const {
        for (const auto& item : j_.items())
            if (!seen_.count(item.key())) throw ValidationError("unknown key '" + path(item.key()) + "'");
    }

private:
    bool take(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }
    std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }
    std::string label() const { return where_.empty() ? std::string("config") : "'" + where_ + "'"; }
    ValidationError type_error(const std::string& key, const char* what) const {
        return ValidationError("'" + path(key) + "' must be " + what);
    }

    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

json parse_json_text(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(what + " is not valid JSON: " + e.what());
    }
}

std::string read_text(const fs::path& path) {
    if (!fs::exists(path)) throw NotFoundError("no such file: " + path.string());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("short write to " + path.string());
}

json model_json(const ModelConfig& c) {
    return {{"image_h", c.image_h},
            {"image_w", c.image_w},
            {"latent_h", c.latent_h},
            {"latent_w", c.latent_w},
            {"dim", c.dim},
            {"seq_len", c.seq_len},
            {"blocks", c.blocks},
            {"heads", c.heads},
            {"ffn_mult", c.ffn_mult},
            {"cal_depth", c.cal_depth},
            {"alpha_hidden", c.alpha_hidden},
            {"max_layers", c.max_layers},
            {"extraction_block", c.extraction_block},
            {"eps_skip", c.eps_skip}};
}

json edits_json(const std::vector<std::vector<EditOp>>& edits) {
    json out = json::array();
    for (std::size_t i = 0; i < edits.size(); ++i) {
        if (edits[i].empty()) continue;
        json ops = json::array();
        for (const auto& op : edits[i]) {
            json o{{"op", to_string(op.kind)}};
            if (op.kind == EditOp::Kind::move) {
                o["dx"] = op.dx;
                o["dy"] = op.dy;
            } else if (op.kind == EditOp::Kind::resize) {
                o["sx"] = op.sx;
                o["sy"] = op.sy;
            }
            ops.push_back(o);
        }
        out.push_back({{"layer", i + 1}, {"ops", ops}});
    }
    return out;
}

// ---- atomic output directories ----------------------------------------------------

class StagedDir {
public:
    explicit StagedDir(const fs::path& out) : final_(out) {
        if (out.empty()) throw ValidationError("no output directory given");
        if (fs::exists(out)) throw ValidationError("output already exists: " + out.string());
        const fs::path parent = fs::absolute(out).parent_path();
        fs::create_directories(parent);
        tmp_ = parent / ("." + fs::absolute(out).filename().string() + ".partial");
        fs::remove_all(tmp_);
        fs::create_directories(tmp_);
    }
    StagedDir(const StagedDir&) = delete;
    StagedDir& operator=(const StagedDir&) = delete;
    ~StagedDir() {
        if (!committed_) {
            std::error_code ec;
            fs::remove_all(tmp_, ec);
        }
    }

    const fs::path& path() const { return tmp_; }
    fs::path operator/(const std::string& name) const { return tmp_ / name; }

    void commit() {
        fs::rename(tmp_, final_);
        committed_ = true;
    }

private:
    fs::path final_, tmp_;
    bool committed_ = false;
};

// ---- shared helpers -----------------------------------------------------------------

Tensor clamp_unit(Tensor t) {
    for (float& v : t.data()) v = std::clamp(v, 0.0f, 1.0f);
    return t;
}

Checkpoint load_matching_checkpoint(const RunConfig& config, const fs::path& dir) {
    if (dir.empty()) throw ValidationError("no checkpoint given");
    if (!fs::exists(dir / "header.json")) throw NotFoundError("no checkpoint in " + dir.string());
    Checkpoint ckpt = load_checkpoint(dir);
    const auto& c = ckpt.model.config;
    if (model_json(c) != model_json(config.model) || c.timesteps != config.model.timesteps ||
        c.beta_start != config.model.beta_start || c.beta_end != config.model.beta_end)
        throw ValidationError("checkpoint model does not match the run config");
    return ckpt;
}

std::vector<TokenSeq> tokenize_all(const std::vector<std::string>& prompts, std::size_t capacity) {
    std::vector<TokenSeq> seqs;
    for (const auto& p : prompts) {
        seqs.push_back(tokenize(p, Vocabulary::standard(), capacity));
        if (seqs.back().truncated) std::cerr << "warning: prompt truncated to " << capacity << " tokens: " << p << "\n";
    }
    return seqs;
}

void check_layer_budget(const ModelConfig& c, std::size_t foregrounds) {
    if (foregrounds + 1 > c.max_layers)
        throw ValidationError(std::to_string(foregrounds) + " foregrounds exceed the model's " +
                              std::to_string(c.max_layers) + " layers");
}

LayerStack decoded_stack(const DenoiserModel& model, const std::vector<Tensor>& latents, std::size_t foregrounds,
                         const std::vector<std::string>& prompts) {
    LayerStack stack;
    stack.background = Layer::opaque(clamp_unit(decode_latent(model, latents[0])));
    for (std::size_t i = 1; i <= foregrounds; ++i)
        stack.foregrounds.emplace_back(clamp_unit(decode_latent(model, latents[i])),
                                       clamp_unit(decode_alpha(model, latents[i])));
    stack.prompts = prompts;
    return stack;
}

json run_header(const RunConfig& config, const std::string& command) {
    return {{"command", command}, {"version", kVersion}, {"seed", config.seed}};
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

double rms_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("rms_diff: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return a.size() ? std::sqrt(s / static_cast<double>(a.size())) : 0.0;
}

std::vector<Tensor> plan_alphas(const DenoiserModel& model, const std::vector<Tensor>& latents,
                                std::size_t foregrounds) {
    std::vector<Tensor> alphas;
    for (std::size_t i = 1; i <= foregrounds; ++i) alphas.push_back(decode_alpha_latent(model, latents[i]));
    return alphas;
}

}  // namespace

// ---- RunConfig ------------------------------------------------------------------------

RunConfig RunConfig::from_json(const std::string& text) {
    const json j = parse_json_text(text, "config");
    RunConfig c;
    Fields f(j, "");
    f.integer("seed", c.seed);
    f.integer("T", c.model.timesteps);
    f.number("beta_start", c.model.beta_start);
    f.number("beta_end", c.model.beta_end);
    f.integer("ddim_steps", c.ddim_steps);
    f.integer("inversion_refine", c.inversion_refine);
    f.integer("T_G", c.T_G);
    f.integer("T_H", c.T_H);
    f.integer("T_H_prime", c.T_H_prime);
    if (f.has("lambdas")) {
        Fields l = f.object("lambdas");
        l.number("noise", c.lambdas.noise);
        l.number("context", c.lambdas.context);
        l.number("layout", c.lambdas.layout);
        l.finish();
    }
    f.number("learning_rate", c.learning_rate);
    f.number("alpha_learning_rate", c.alpha_learning_rate);
    f.boolean("kv_only", c.kv_only);
    f.boolean("train_alpha_head", c.train_alpha_head);
    f.boolean("shared_noise", c.shared_noise);
    f.integer("train_steps", c.train_steps);
    f.boolean("share_layers", c.share_layers);
    f.boolean("inject_global", c.inject_global);
    std::string mask = to_string(c.mask_mode);
    f.string("mask_mode", mask);
    try {
        c.mask_mode = mask_mode_from_string(mask);
    } catch (const Error&) {
        throw ValidationError("'mask_mode' must be \"none\" or \"global_only\"");
    }
    f.boolean("mask_global_rows_only", c.mask_global_rows_only);
    if (f.has("model")) {
        Fields m = f.object("model");
        m.integer("image_h", c.model.image_h);
        m.integer("image_w", c.model.image_w);
        m.integer("latent_h", c.model.latent_h);
        m.integer("latent_w", c.model.latent_w);
        m.integer("dim", c.model.dim);
        m.integer("seq_len", c.model.seq_len);
        m.integer("blocks", c.model.blocks);
        m.integer("heads", c.model.heads);
        m.integer("ffn_mult", c.model.ffn_mult);
        m.integer("cal_depth", c.model.cal_depth);
        m.integer("alpha_hidden", c.model.alpha_hidden);
        m.integer("max_layers", c.model.max_layers);
        m.integer("extraction_block", c.model.extraction_block);
        m.boolean("eps_skip", c.model.eps_skip);
        m.finish();
    }
    if (f.has("data")) {
        Fields d = f.object("data");
        d.integer("count", c.data_count);
        d.integer("layers", c.data_layers);
        d.finish();
    }
    if (f.has("paths")) {
        Fields p = f.object("paths");
        p.string("data", c.paths.data);
        p.string("checkpoint", c.paths.checkpoint);
        p.string("prompts", c.paths.prompts);
        p.string("image", c.paths.image);
        p.string("run", c.paths.run);
        p.string("edits", c.paths.edits);
        p.finish();
    }
    f.finish();
    c.validate();
    return c;
}

std::string RunConfig::to_json() const {
    json j{{"seed", seed},
           {"T", model.timesteps},
           {"beta_start", model.beta_start},
           {"beta_end", model.beta_end},
           {"ddim_steps", ddim_steps},
           {"inversion_refine", inversion_refine},
           {"T_G", T_G},
           {"T_H", T_H},
           {"T_H_prime", T_H_prime},
           {"lambdas", {{"noise", lambdas.noise}, {"context", lambdas.context}, {"layout", lambdas.layout}}},
           {"learning_rate", learning_rate},
           {"alpha_learning_rate", alpha_learning_rate},
           {"kv_only", kv_only},
           {"train_alpha_head", train_alpha_head},
           {"shared_noise", shared_noise},
           {"train_steps", train_steps},
           {"share_layers", share_layers},
           {"inject_global", inject_global},
           {"mask_mode", to_string(mask_mode)},
           {"mask_global_rows_only", mask_global_rows_only},
           {"model", model_json(model)},
           {"data", {{"count", data_count}, {"layers", data_layers}}},
           {"paths",
            {{"data", paths.data},
             {"checkpoint", paths.checkpoint},
             {"prompts", paths.prompts},
             {"image", paths.image},
             {"run", paths.run},
             {"edits", paths.edits}}}};
    return j.dump(2) + "\n";
}

void RunConfig::validate() const {
    try {
        model.validate();
    } catch (const Error& e) {
        throw ValidationError(std::string("model: ") + e.what());
    }
    const int T = model.timesteps;
    if (ddim_steps < 1 || ddim_steps > T) throw ValidationError("ddim_steps must lie in [1, T]");
    if (inversion_refine < 0) throw ValidationError("inversion_refine must be ≥ 0");
    if (T_G < 0 || T_G > T) throw ValidationError("T_G must lie in [0, T]");
    window().validate(T);
    const auto grid = schedule().ddim_timesteps(ddim_steps);
    for (int t : {T_H, T_H_prime})
        if (std::find(grid.begin(), grid.end(), t) == grid.end())
            throw ValidationError("window bound " + std::to_string(t) + " is not on the " +
                                  std::to_string(ddim_steps) + "-step sampling grid");
    for (double l : {lambdas.noise, lambdas.context, lambdas.layout})
        if (!std::isfinite(l) || l < 0) throw ValidationError("lambdas must be finite and ≥ 0");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ValidationError("learning_rate must be > 0");
    if (!(alpha_learning_rate >= 0) || !std::isfinite(alpha_learning_rate))
        throw ValidationError("alpha_learning_rate must be ≥ 0");
    if (data_layers < 1 || data_layers > model.max_layers)
        throw ValidationError("data.layers must lie in [1, model.max_layers]");
}

AttentionHooks RunConfig::sampling_hooks() const {
    AttentionHooks h;
    h.share_layers = share_layers;
    h.inject_global = inject_global;
    h.inject_from = T_G;
    h.mask = MaskMode::none;
    return h;
}

AttentionHooks RunConfig::decompose_hooks() const {
    AttentionHooks h = sampling_hooks();
    h.mask = mask_mode;
    h.mask_global_rows_only = mask_global_rows_only;
    return h;
}

TrainOptions RunConfig::train_options() const {
    TrainOptions o;
    o.learning_rate = learning_rate;
    o.alpha_learning_rate = alpha_learning_rate;
    o.lambdas = lambdas;
    o.kv_only = kv_only;
    o.shared_noise = shared_noise;
    o.train_alpha_head = train_alpha_head;
    o.hooks = sampling_hooks();
    return o;
}

RunConfig load_run_config(const fs::path& path) { return RunConfig::from_json(read_text(path)); }

// ---- prompt and edit files ------------------------------------------------------------

std::vector<std::string> PromptSet::all() const {
    std::vector<std::string> out{background};
    out.insert(out.end(), foregrounds.begin(), foregrounds.end());
    return out;
}

PromptSet PromptSet::load(const fs::path& path) {
    const json j = parse_json_text(read_text(path), "prompts file");
    PromptSet p;
    Fields f(j, "");
    if (!f.has("background")) throw ValidationError("prompts file needs a 'background' string");
    f.string("background", p.background);
    if (f.has("foregrounds")) {
        const json& fg = f.raw("foregrounds");
        if (!fg.is_array()) throw ValidationError("'foregrounds' must be an array of strings");
        for (const auto& s : fg) {
            if (!s.is_string()) throw ValidationError("'foregrounds' must be an array of strings");
            p.foregrounds.push_back(s.get<std::string>());
        }
    }
    f.finish();
    return p;
}

std::vector<std::vector<EditOp>> load_edits(const fs::path& path, std::size_t foregrounds) {
    const json j = parse_json_text(read_text(path), "edits file");
    Fields f(j, "");
    if (!f.has("edits")) throw ValidationError("edits file needs an 'edits' array");
    const json& list = f.raw("edits");
    f.finish();
    if (!list.is_array()) throw ValidationError("'edits' must be an array");
    std::vector<std::vector<EditOp>> edits(foregrounds);
    for (std::size_t e = 0; e < list.size(); ++e) {
        Fields entry(list[e], "edits[" + std::to_string(e) + "]");
        std::int64_t layer = -1;
        if (!entry.has("layer")) throw ValidationError("edit entry needs a 'layer'");
        entry.integer("layer", layer);
        if (layer < 1 || static_cast<std::size_t>(layer) > foregrounds)
            throw ValidationError("edit target layer " + std::to_string(layer) + " is not a foreground (1.." +
                                  std::to_string(foregrounds) + ")");
        if (!entry.has("ops")) throw ValidationError("edit entry needs 'ops'");
        const json& ops = entry.raw("ops");
        entry.finish();
        if (!ops.is_array()) throw ValidationError("'ops' must be an array");
        for (std::size_t o = 0; o < ops.size(); ++o) {
            Fields op(ops[o], "edits[" + std::to_string(e) + "].ops[" + std::to_string(o) + "]");
            std::string name;
            op.string("op", name);
            const EditOp::Kind kind = edit_kind_from_string(name);
            EditOp parsed;
            if (kind == EditOp::Kind::move) {
                int dx = 0, dy = 0;
                op.integer("dx", dx);
                op.integer("dy", dy);
                parsed = EditOp::move(dx, dy);
            } else if (kind == EditOp::Kind::resize) {
                double sx = 1.0, sy = 1.0;
                op.number("sx", sx);
                op.number("sy", sy);
                parsed = EditOp::resize(sx, sy);
            } else {
                parsed = kind == EditOp::Kind::flip_h ? EditOp::flip_h() : EditOp::flip_v();
            }
            op.finish();
            edits[static_cast<std::size_t>(layer - 1)].push_back(parsed);
        }
    }
    return edits;
}

std::string format_step_log(const StepLog& log) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%llu\t%d\t%.9e\t%.9e\t%.9e\t%.9e\t%.9e", static_cast<unsigned long long>(log.step),
                  log.t, log.noise, log.context, log.layout, log.total, log.alpha);
    return buf;
}

std::size_t thread_cap() {
    const char* env = std::getenv("LAYERFORGE_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ValidationError("LAYERFORGE_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
}

// ---- commands -----------------------------------------------------------------------

void cmd_make_data(const RunConfig& config, std::size_t count, std::size_t layers, const fs::path& out) {
    config.validate();
    if (count == 0) throw ValidationError("count must be ≥ 1");
    if (layers < 1 || layers > config.model.max_layers)
        throw ValidationError("layers must lie in [1, " + std::to_string(config.model.max_layers) + "]");
    StagedDir stage(out);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t seed = config.seed + i;
        const RenderedScene scene =
            render_scene(random_scene(seed, layers - 1, config.model.image_w, config.model.image_h));
        write_scene_dir(stage / ("scene_" + std::to_string(seed)), scene.stack,
                        make_manifest(scene.stack, "oracle", seed));
    }
    json info = run_header(config, "make-data");
    info["count"] = count;
    info["layers"] = layers;
    write_json(stage / "dataset.json", info);
    stage.commit();
}

void cmd_train(const RunConfig& config, const fs::path& data_dir, std::uint64_t steps, const fs::path& out,
               const fs::path& resume) {
    config.validate();
    if (data_dir.empty()) throw ValidationError("no data directory given");
    if (!fs::is_directory(data_dir)) throw NotFoundError("no data directory " + data_dir.string());

    Checkpoint ckpt;
    std::string previous_log;
    if (resume.empty()) {
        ckpt.model = init_denoiser(config.model, config.seed, Vocabulary::standard().size());
        ckpt.seed = config.seed;
    } else {
        ckpt = load_matching_checkpoint(config, resume);
        if (ckpt.seed != config.seed) throw ValidationError("resume checkpoint was trained with another seed");
        if (fs::exists(resume / "loss_log.tsv")) previous_log = read_text(resume / "loss_log.tsv");
    }

    std::vector<fs::path> scenes;
    for (const auto& entry : fs::directory_iterator(data_dir))
        if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) scenes.push_back(entry.path());
    std::sort(scenes.begin(), scenes.end());
    if (scenes.empty()) throw ValidationError("no scene directories in " + data_dir.string());
    std::vector<TrainingExample> examples;
    for (const auto& dir : scenes) {
        const LayerStack stack = read_scene_dir(dir);
        if (stack.height() != config.model.image_h || stack.width() != config.model.image_w)
            throw ValidationError("scene " + dir.string() + " does not match the model's image size");
        examples.push_back(make_training_example(ckpt.model, stack));
    }

    std::string log = previous_log.empty() ? std::string("step\tt\tnoise\tcontext\tlayout\ttotal\talpha\n")
                                           : previous_log;
    train(ckpt.model, examples, config.schedule(), config.train_options(), ckpt.seed, ckpt.step, steps,
          [&](const StepLog& s) { log += format_step_log(s) + "\n"; });
    ckpt.step += steps;

    StagedDir stage(out);
    save_checkpoint(stage.path(), ckpt);
    write_text(stage / "loss_log.tsv", log);
    write_text(stage / "config.json", config.to_json());
    json info = run_header(config, "train");
    info["steps"] = ckpt.step;
    info["examples"] = examples.size();
    write_json(stage / "run.json", info);
    stage.commit();
}

void cmd_generate(const RunConfig& config, const fs::path& checkpoint, const fs::path& prompts_file,
                  const fs::path& out) {
    config.validate();
    const Checkpoint ckpt = load_matching_checkpoint(config, checkpoint);
    const DenoiserModel& model = ckpt.model;
    const PromptSet prompts = PromptSet::load(prompts_file);
    const std::size_t k = prompts.foregrounds.size();
    check_layer_budget(model.config, k);
    const auto seqs = tokenize_all(prompts.all(), model.config.seq_len);
    const NoiseSchedule sched = config.schedule();
    const auto grid = sched.ddim_timesteps(config.ddim_steps);
    const AttentionHooks hooks = config.sampling_hooks();

    json report = run_header(config, "generate");
    report["checkpoint_step"] = ckpt.step;
    report["foregrounds"] = k;

    if (k == 0) {
        const auto z = ddim_sample(make_predictor(model, Conditioning::single(seqs[0]), hooks),
                                   initial_latents(model.config, 1, config.seed), grid, sched);
        const LayerStack stack = decoded_stack(model, z, 0, prompts.all());
        report["window"] = nullptr;
        report["edits"] = json::array();
        report["background_change_norm"] = 0.0;

        StagedDir stage(out);
        write_scene_dir(stage / "layers", stack, make_manifest(stack, "decoded", config.seed));
        write_ppm(stage / "composite.ppm", composite(stack));
        fs::create_directories(stage / "latents");
        save_ltens(stage / "latents" / "layer0.ltens", z[0]);
        write_text(stage / "prompts.json", json{{"background", prompts.background}, {"foregrounds", json::array()}}.dump(2) + "\n");
        write_text(stage / "config.json", config.to_json());
        write_json(stage / "report.json", report);
        stage.commit();
        return;
    }

    const Conditioning cond = Conditioning::layered(seqs);
    const auto z_T = initial_latents(model.config, k + 2, config.seed, config.shared_noise);
    const DenoiserOutput first = run_denoiser(model, z_T, cond, sched.T, hooks);
    RetainedLatents retained(config.window());
    const auto z0 = ddim_sample(make_predictor(model, cond, hooks), z_T, grid, sched, retained.observer());

    const LayerStack stack = decoded_stack(model, z0, k, prompts.all());
    HarmonizePlan plan;
    plan.alphas = plan_alphas(model, z0, k);
    plan.image_h = model.config.image_h;
    plan.image_w = model.config.image_w;
    const IrhResult irh =
        run_irh(make_predictor(model, Conditioning{{}, seqs, false}, hooks), retained, plan, grid, sched);
    report["window"] = {{"start", config.T_H}, {"end", config.T_H_prime}};
    report["edits"] = json::array();
    report["background_change_norm"] = background_change_norm(irh.z0, z0[0], plan.alphas);

    StagedDir stage(out);
    write_scene_dir(stage / "layers", stack, make_manifest(stack, "decoded", config.seed));
    write_ppm(stage / "global.ppm", clamp_unit(decode_latent(model, z0[k + 1])));
    write_ppm(stage / "composite.ppm", clamp_unit(decode_latent(model, irh.z0)));
    for (std::size_t i = 0; i < k; ++i)
        write_pgm(stage / ("context_map_fg" + std::to_string(i + 1) + ".pgm"),
                  clamp_unit(resize_bilinear(first.context_maps[i].reshaped({model.config.latent_h, model.config.latent_w}),
                                             model.config.image_h, model.config.image_w)));
    fs::create_directories(stage / "latents");
    for (std::size_t i = 0; i < z0.size(); ++i)
        save_ltens(stage / "latents" / ("layer" + std::to_string(i) + ".ltens"), z0[i]);
    retained.spill(stage / "retained");
    write_text(stage / "prompts.json",
               json{{"background", prompts.background}, {"foregrounds", prompts.foregrounds}}.dump(2) + "\n");
    write_text(stage / "config.json", config.to_json());
    write_json(stage / "report.json", report);
    stage.commit();
}

void cmd_edit(const RunConfig& config, const fs::path& checkpoint, const fs::path& run_dir, const fs::path& edits_file,
              const fs::path& out) {
    config.validate();
    if (run_dir.empty() || !fs::exists(run_dir / "prompts.json")) throw NotFoundError("not a run directory: " + run_dir.string());
    const Checkpoint ckpt = load_matching_checkpoint(config, checkpoint);
    const DenoiserModel& model = ckpt.model;
    const PromptSet prompts = PromptSet::load(run_dir / "prompts.json");
    const std::size_t k = prompts.foregrounds.size();
    if (k == 0) throw ValidationError("run has no foreground layers to edit");
    const auto edits = load_edits(edits_file, k);
    if (!fs::exists(run_dir / "retained" / "window.json"))
        throw NotFoundError("run directory has no retained latents: " + run_dir.string());

    std::vector<Tensor> z0;
    for (std::size_t i = 0; i < k + 2; ++i) z0.push_back(load_ltens(run_dir / "latents" / ("layer" + std::to_string(i) + ".ltens")));
    const RetainedLatents retained = RetainedLatents::load(run_dir / "retained");
    const auto seqs = tokenize_all(prompts.all(), model.config.seq_len);
    const NoiseSchedule sched = config.schedule();
    const auto grid = sched.ddim_timesteps(config.ddim_steps);

    HarmonizePlan plan;
    plan.edits = edits;
    plan.alphas = plan_alphas(model, z0, k);
    plan.image_h = model.config.image_h;
    plan.image_w = model.config.image_w;
    plan.validate(k);
    const IrhResult irh = run_irh(make_predictor(model, Conditioning{{}, seqs, false}, config.sampling_hooks()),
                                  retained, plan, grid, sched);

    json report = run_header(config, "edit");
    report["window"] = {{"start", retained.window().start}, {"end", retained.window().end}};
    report["edits"] = edits_json(edits);
    report["background_change_norm"] = background_change_norm(irh.z0, z0[0], effective_alphas(plan));

    StagedDir stage(out);
    write_ppm(stage / "composite.ppm", clamp_unit(decode_latent(model, irh.z0)));
    save_ltens(stage / "composite.ltens", irh.z0);
    write_text(stage / "edits.json", json{{"edits", edits_json(edits)}}.dump(2) + "\n");
    write_text(stage / "config.json", config.to_json());
    write_json(stage / "report.json", report);
    stage.commit();
}

void cmd_decompose(const RunConfig& config, const fs::path& checkpoint, const fs::path& image,
                   const fs::path& prompts_file, const fs::path& out) {
    config.validate();
    const Checkpoint ckpt = load_matching_checkpoint(config, checkpoint);
    const DenoiserModel& model = ckpt.model;
    if (!fs::exists(image)) throw NotFoundError("no such image: " + image.string());
    const Tensor rgb = read_ppm(image);
    if (rgb.dim(0) != model.config.image_h || rgb.dim(1) != model.config.image_w)
        throw ValidationError("image size differs from the model's " + std::to_string(model.config.image_h) + "×" +
                              std::to_string(model.config.image_w));
    const PromptSet prompts = PromptSet::load(prompts_file);
    const std::size_t k = prompts.foregrounds.size();
    check_layer_budget(model.config, k);
    const auto seqs = tokenize_all(prompts.all(), model.config.seq_len);
    const NoiseSchedule sched = config.schedule();
    const auto grid = sched.ddim_timesteps(config.ddim_steps);
    const std::vector<int> ascending(grid.rbegin(), grid.rend());

    const Tensor z_img = encode_image(model, rgb);
    const NoisePredictor global = make_predictor(model, Conditioning{{}, seqs, false}, config.sampling_hooks());
    const auto inverted = ddim_invert(global, {z_img}, ascending, sched, config.inversion_refine);
    const Tensor z_T = inverted.back().front();
    const Tensor round_trip = ddim_sample(global, {z_T}, grid, sched).front();

    const auto z0 = ddim_sample(make_predictor(model, Conditioning::layered(seqs), config.decompose_hooks()),
                                std::vector<Tensor>(k + 2, z_T), grid, sched);
    const LayerStack stack = decoded_stack(model, z0, k, prompts.all());

    json report = run_header(config, "decompose");
    report["foregrounds"] = k;
    report["mask_mode"] = to_string(config.mask_mode);
    report["inversion_refine"] = config.inversion_refine;
    report["inversion_roundtrip_max_abs"] = max_abs_diff(round_trip, z_img);
    report["global_reconstruction_max_abs"] = max_abs_diff(z0[k + 1], z_img);
    report["global_reconstruction_rms"] = rms_diff(z0[k + 1], z_img);

    StagedDir stage(out);
    write_scene_dir(stage / "layers", stack, make_manifest(stack, "decoded", config.seed));
    write_ppm(stage / "global.ppm", clamp_unit(decode_latent(model, z0[k + 1])));
    fs::create_directories(stage / "latents");
    save_ltens(stage / "latents" / "inverted.ltens", z_T);
    for (std::size_t i = 0; i < z0.size(); ++i)
        save_ltens(stage / "latents" / ("layer" + std::to_string(i) + ".ltens"), z0[i]);
    write_text(stage / "config.json", config.to_json());
    write_json(stage / "report.json", report);
    stage.commit();
}

std::vector<CheckResult> cmd_check(const std::string& suite, const FaultInjection& faults) {
    return run_checks(suite, faults);
}

// ---- front end ------------------------------------------------------------------------

int run_cli(int argc, char** argv) {
    CLI::App app{"layerforge: toy multi-layer generation, decomposition and harmonization"};
    app.require_subcommand(1);
    std::string config_path, out;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config_path, "run config JSON (defaults when omitted)");
    app.add_option("--seed", seed, "overrides the config seed");
    app.add_option("--out", out, "output directory (must not exist)");

    auto* make_data = app.add_subcommand("make-data", "render a synthetic layered dataset");
    std::optional<std::size_t> count, layers;
    make_data->add_option("--count", count, "number of scenes");
    make_data->add_option("--layers", layers, "layers per scene, background included");

    auto* train_cmd = app.add_subcommand("train", "train the toy denoiser");
    std::string data_dir, resume;
    std::optional<std::uint64_t> steps;
    train_cmd->add_option("--data", data_dir, "dataset directory");
    train_cmd->add_option("--steps", steps, "gradient steps");
    train_cmd->add_option("--resume", resume, "checkpoint directory to continue from");

    std::string checkpoint, prompts, image, run_dir, edits;
    auto* generate = app.add_subcommand("generate", "text-to-layers sampling with harmonization");
    generate->add_option("--checkpoint", checkpoint, "checkpoint directory");
    generate->add_option("--prompts", prompts, "prompts JSON");

    auto* decompose = app.add_subcommand("decompose", "image-to-layers via inversion");
    decompose->add_option("--checkpoint", checkpoint, "checkpoint directory");
    decompose->add_option("--image", image, "input PPM");
    decompose->add_option("--prompts", prompts, "prompts JSON");

    auto* edit = app.add_subcommand("edit", "edit foreground layers of a run and re-harmonize");
    edit->add_option("--checkpoint", checkpoint, "checkpoint directory");
    edit->add_option("--run", run_dir, "run directory written by generate");
    edit->add_option("--edits", edits, "edits JSON");

    auto* check = app.add_subcommand("check", "run the built-in invariant suites");
    std::string suite = "all", fault;
    check->add_option("--suite", suite, "numerics|compositing|attention|gradients|irh|pipeline|all");
    check->add_option("--inject-fault", fault, "deliberate bug for mutation testing (irh-sign)")
        ->check(CLI::IsMember({"irh-sign"}));

    for (auto* sub : {make_data, train_cmd, generate, decompose, edit, check}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    auto pick = [](const std::string& flag, const std::string& configured) { return flag.empty() ? configured : flag; };
    try {
        thread_cap();
        RunConfig config = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        if (seed) config.seed = *seed;
        config.validate();

        if (check->parsed()) {
            FaultInjection faults;
            faults.irh_flipped_sign = fault == "irh-sign";
            const auto results = cmd_check(suite, faults);
            bool ok = true;
            for (const auto& r : results) {
                std::cout << (r.passed ? "PASS " : "FAIL ") << r.suite << "/" << r.name;
                if (!r.detail.empty()) std::cout << ": " << r.detail;
                std::cout << "\n";
                ok = ok && r.passed;
            }
            std::cout << (ok ? "all checks passed" : "checks failed") << "\n";
            return ok ? 0 : 3;
        }
        if (out.empty()) throw ValidationError("--out is required");
        if (make_data->parsed()) {
            cmd_make_data(config, count.value_or(config.data_count), layers.value_or(config.data_layers), out);
        } else if (train_cmd->parsed()) {
            cmd_train(config, pick(data_dir, config.paths.data), steps.value_or(config.train_steps), out, resume);
        } else if (generate->parsed()) {
            cmd_generate(config, pick(checkpoint, config.paths.checkpoint), pick(prompts, config.paths.prompts), out);
        } else if (decompose->parsed()) {
            cmd_decompose(config, pick(checkpoint, config.paths.checkpoint), pick(image, config.paths.image),
                          pick(prompts, config.paths.prompts), out);
        } else if (edit->parsed()) {
            cmd_edit(config, pick(checkpoint, config.paths.checkpoint), pick(run_dir, config.paths.run),
                     pick(edits, config.paths.edits), out);
        }
        return 0;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IndexError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NotFoundError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace layerforge
