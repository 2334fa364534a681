#include "layerforge/harmonize.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "layerforge/tensor_io.hpp"

namespace layerforge {

void IrhWindow::validate(int T) const {
    if (end < 0 || start < end || start > T)
        throw ValidationError("harmonization window must satisfy 0 ≤ end ≤ start ≤ T (got [" + std::to_string(end) +
                              ", " + std::to_string(start) + "])");
}

void RetainedLatents::record(int t, const std::vector<Tensor>& latents) {
    if (!window_.retains(t)) return;
    if (latents.empty()) throw ValidationError("retained batch is empty");
    if (layers_ == 0) layers_ = latents.size();
    if (latents.size() != layers_)
        throw ValidationError("retained step " + std::to_string(t) + " has " + std::to_string(latents.size()) +
                              " layers, expected " + std::to_string(layers_));
    store_[t] = latents;
}

StepObserver RetainedLatents::observer() {
    return [this](int t, const std::vector<Tensor>& latents) { record(t, latents); };
}

const std::vector<Tensor>& RetainedLatents::at(int t) const {
    auto it = store_.find(t);
    if (it == store_.end()) throw StoreIncompleteError("no retained latents for step " + std::to_string(t));
    return it->second;
}

void RetainedLatents::spill(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json j{{"start", window_.start}, {"end", window_.end}, {"layers", layers_}, {"steps", nlohmann::json::array()}};
    for (const auto& [t, latents] : store_) {
        j["steps"].push_back(t);
        for (std::size_t i = 0; i < latents.size(); ++i)
            save_ltens(dir / ("step" + std::to_string(t) + "_layer" + std::to_string(i) + ".ltens"), latents[i]);
    }
    std::ofstream out(dir / "window.json");
    if (!out) throw IoError("cannot write " + (dir / "window.json").string());
    out << j.dump(2) << "\n";
}

RetainedLatents RetainedLatents::load(const std::filesystem::path& dir) {
    std::ifstream in(dir / "window.json");
    if (!in) throw IoError("missing " + (dir / "window.json").string());
    const auto j = nlohmann::json::parse(in);
    RetainedLatents r(IrhWindow{j.at("start").get<int>(), j.at("end").get<int>()});
    const auto layers = j.at("layers").get<std::size_t>();
    for (int t : j.at("steps")) {
        std::vector<Tensor> latents;
        for (std::size_t i = 0; i < layers; ++i)
            latents.push_back(load_ltens(dir / ("step" + std::to_string(t) + "_layer" + std::to_string(i) + ".ltens")));
        r.record(t, latents);
    }
    return r;
}

bool HarmonizePlan::has_edits() const {
    return std::any_of(edits.begin(), edits.end(), [](const auto& e) { return !e.empty(); });
}

void HarmonizePlan::validate(std::size_t foregrounds) const {
    if (alphas.size() != foregrounds)
        throw ValidationError("plan has " + std::to_string(alphas.size()) + " alphas for " +
                              std::to_string(foregrounds) + " foregrounds");
    if (edits.size() > foregrounds) throw ValidationError("edit targets a foreground that does not exist");
    for (const auto& a : alphas) {
        a.require_rank(2);
        for (float v : a.data())
            if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("plan alphas must lie in [0, 1]");
    }
    for (const auto& ops : edits)
        for (const auto& op : ops)
            if (op.kind == EditOp::Kind::resize && (!(op.sx > 0.0) || !(op.sy > 0.0)))
                throw ValidationError("resize factors must be positive");
}

Tensor irh_blend(const Tensor& bg, const std::vector<Tensor>& fgs, const std::vector<Tensor>& alphas) {
    if (fgs.size() != alphas.size())
        throw ValidationError("irh_blend: " + std::to_string(fgs.size()) + " foregrounds but " +
                              std::to_string(alphas.size()) + " alphas");
    bg.require_rank(2);
    const std::size_t N = bg.rows(), D = bg.cols();
    for (std::size_t i = 0; i < fgs.size(); ++i) {
        if (fgs[i].shape() != bg.shape()) throw ShapeError("irh_blend: foreground latent shape differs from background");
        if (alphas[i].size() != N) throw ShapeError("irh_blend: alpha is not on the latent grid");
    }
    Tensor out(bg.shape());
    for (std::size_t p = 0; p < N; ++p) {
        for (std::size_t d = 0; d < D; ++d) {
            double acc = 0.0, above = 1.0;  // Π (1 - α_f) over the layers already visited
            for (std::size_t i = fgs.size(); i-- > 0;) {
                const double a = alphas[i][p];
                acc += static_cast<double>(fgs[i][p * D + d]) * a * above;
                above *= 1.0 - a;
            }
            acc += static_cast<double>(bg[p * D + d]) * above;
            out[p * D + d] = static_cast<float>(acc);
        }
    }
    return out;
}

std::pair<Tensor, Tensor> edit_foreground(const Tensor& alpha, const Tensor& latent, const std::vector<EditOp>& ops,
                                          std::size_t image_h, std::size_t image_w) {
    alpha.require_rank(2);
    const std::size_t h = alpha.dim(0), w = alpha.dim(1);
    if (latent.rank() != 2 || latent.rows() != h * w) throw ShapeError("edit_foreground: latent is not (h·w)×D");
    const double sx = image_w ? static_cast<double>(w) / static_cast<double>(image_w) : 1.0;
    const double sy = image_h ? static_cast<double>(h) / static_cast<double>(image_h) : 1.0;
    Tensor a = alpha;
    Tensor z = latent.reshaped({h, w, latent.cols()});
    for (const auto& op : ops) {
        if (op.kind == EditOp::Kind::resize && (!(op.sx > 0.0) || !(op.sy > 0.0)))
            throw ValidationError("resize factors must be positive");
        a = apply_edit_grid(a, op, sx, sy);
        z = apply_edit_grid(z, op, sx, sy);
    }
    return {std::move(a), z.reshaped(latent.shape())};
}

std::vector<Tensor> effective_alphas(const HarmonizePlan& plan) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < plan.alphas.size(); ++i) {
        if (i < plan.edits.size() && !plan.edits[i].empty()) {
            const Tensor& a = plan.alphas[i];
            Tensor dummy({a.size(), 1}, 0.0f);
            out.push_back(edit_foreground(a, dummy, plan.edits[i], plan.image_h, plan.image_w).first);
        } else {
            out.push_back(plan.alphas[i]);
        }
    }
    return out;
}

Tensor irh_blend_edited(const Tensor& bg, const std::vector<Tensor>& fgs, const HarmonizePlan& plan) {
    plan.validate(fgs.size());
    if (!plan.has_edits()) return irh_blend(bg, fgs, plan.alphas);
    std::vector<Tensor> zs, as;
    for (std::size_t i = 0; i < fgs.size(); ++i) {
        if (i < plan.edits.size() && !plan.edits[i].empty()) {
            auto [a, z] = edit_foreground(plan.alphas[i], fgs[i], plan.edits[i], plan.image_h, plan.image_w);
            as.push_back(std::move(a));
            zs.push_back(std::move(z));
        } else {
            as.push_back(plan.alphas[i]);
            zs.push_back(fgs[i]);
        }
    }
    return irh_blend(bg, zs, as);
}

IrhResult run_irh(const NoisePredictor& predict, const RetainedLatents& retained, const HarmonizePlan& plan,
                  const std::vector<int>& timesteps, const NoiseSchedule& sched, const BlendFn& blend) {
    const IrhWindow& window = retained.window();
    window.validate(sched.T);
    const std::size_t n_fg = plan.alphas.size();
    plan.validate(n_fg);
    if (retained.layer_count() != 0 && retained.layer_count() < n_fg + 1)
        throw ValidationError("retained steps hold fewer layers than the plan's foregrounds");

    auto it = std::find(timesteps.begin(), timesteps.end(), window.start);
    if (it == timesteps.end())
        throw ValidationError("window start " + std::to_string(window.start) + " is not on the sampling grid");
    if (timesteps.back() != 0) throw ValidationError("sampling grid must end at 0");

    IrhResult result;
    Tensor z = retained.at(window.start).front();
    for (auto cur = it; cur != timesteps.end(); ++cur) {
        const int t = *cur;
        if (window.fuses(t)) {
            const auto& step = retained.at(t);
            const std::vector<Tensor> fgs(step.begin() + 1, step.begin() + 1 + static_cast<std::ptrdiff_t>(n_fg));
            if (plan.has_edits())
                z = irh_blend_edited(z, fgs, plan);
            else
                z = blend ? blend(z, fgs, plan.alphas) : irh_blend(z, fgs, plan.alphas);
            result.fused.emplace(t, z);
        }
        result.trajectory.emplace_back(t, z);
        if (std::next(cur) != timesteps.end()) z = ddim_step(predict, {z}, t, *std::next(cur), sched).front();
    }
    result.z0 = std::move(z);
    return result;
}

double background_change_norm(const Tensor& z0, const Tensor& first_bg, const std::vector<Tensor>& alphas) {
    if (z0.shape() != first_bg.shape()) throw ShapeError("background_change_norm: shape mismatch");
    const std::size_t N = z0.rows(), D = z0.cols();
    double sum = 0.0;
    for (std::size_t p = 0; p < N; ++p) {
        double w = 1.0;
        for (const auto& a : alphas) w *= 1.0 - static_cast<double>(a[p]);
        for (std::size_t d = 0; d < D; ++d) {
            const double diff = (static_cast<double>(z0[p * D + d]) - first_bg[p * D + d]) * w;
            sum += diff * diff;
        }
    }
    return std::sqrt(sum);
}

}  // namespace layerforge
