#pragma once

// Information-retained harmonization: the first sampling pass keeps its
// latents inside a step window; a second pass re-denoises the background from
// the window start and, at every window step, fuses the retained foreground
// latents over it with the decoded alphas.

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "layerforge/diffusion.hpp"
#include "layerforge/layers.hpp"

namespace layerforge {

/// Closed step interval [end, start] on the T→0 axis. start == end is the
/// degenerate window: the second pass still begins at `start` but nothing is
/// fused.
struct IrhWindow {
    int start = 600;
    int end = 400;

    bool empty() const { return start == end; }
    bool fuses(int t) const { return !empty() && t >= end && t <= start; }
    bool retains(int t) const { return t >= end && t <= start; }
    void validate(int T) const;
};

class RetainedLatents {
public:
    RetainedLatents() = default;
    explicit RetainedLatents(IrhWindow window) : window_(window) {}

    const IrhWindow& window() const { return window_; }

    /// Stores the batch if t lies in the window; all steps must carry the
    /// same number of layers.
    void record(int t, const std::vector<Tensor>& latents);

    /// Observer for ddim_sample that records the window.
    StepObserver observer();

    bool contains(int t) const { return store_.count(t) != 0; }
    /// StoreIncompleteError when the step is missing.
    const std::vector<Tensor>& at(int t) const;
    std::size_t layer_count() const { return layers_; }
    const std::map<int, std::vector<Tensor>>& steps() const { return store_; }

    /// window.json plus step<t>_layer<i>.ltens
    void spill(const std::filesystem::path& dir) const;
    static RetainedLatents load(const std::filesystem::path& dir);

private:
    IrhWindow window_;
    std::size_t layers_ = 0;
    std::map<int, std::vector<Tensor>> store_;
};

struct HarmonizePlan {
    std::vector<std::vector<EditOp>> edits;  // per foreground; may be empty or shorter than alphas
    std::vector<Tensor> alphas;              // per foreground, h×w on the latent grid
    std::size_t image_h = 0, image_w = 0;    // pixel grid that edit offsets refer to; 0 = latent grid

    bool has_edits() const;
    void validate(std::size_t foregrounds) const;
};

/// ẑ_m = ẑ_bg·Π(1-α_i) + Σ_i z_i·α_i·Π_{f>i}(1-α_f); latents are (h·w)×D and
/// alphas h×w.
Tensor irh_blend(const Tensor& bg, const std::vector<Tensor>& fgs, const std::vector<Tensor>& alphas);

/// The blend with every foreground latent and alpha passed through its edits.
Tensor irh_blend_edited(const Tensor& bg, const std::vector<Tensor>& fgs, const HarmonizePlan& plan);

/// Edited (alpha, latent) pair on the latent grid.
std::pair<Tensor, Tensor> edit_foreground(const Tensor& alpha, const Tensor& latent, const std::vector<EditOp>& ops,
                                          std::size_t image_h, std::size_t image_w);

/// Alphas as seen by the fusion: the plan's alphas after their edits.
std::vector<Tensor> effective_alphas(const HarmonizePlan& plan);

using BlendFn = std::function<Tensor(const Tensor& bg, const std::vector<Tensor>& fgs,
                                     const std::vector<Tensor>& alphas)>;

struct IrhResult {
    Tensor z0;
    std::map<int, Tensor> fused;                  // window steps → fused latent fed to the step
    std::vector<std::pair<int, Tensor>> trajectory;  // latent at each grid step from start down to 0
};

/// Re-denoises from the window start. `predict` acts on a single latent;
/// retained steps hold [bg, fg_1..fg_n, ...]. `blend` replaces irh_blend (the
/// edited path ignores it).
IrhResult run_irh(const NoisePredictor& predict, const RetainedLatents& retained, const HarmonizePlan& plan,
                  const std::vector<int>& timesteps, const NoiseSchedule& sched, const BlendFn& blend = {});

/// ‖(z0 - first_bg) ⊙ Π(1-α_i)‖₂: change of the background region.
double background_change_norm(const Tensor& z0, const Tensor& first_bg, const std::vector<Tensor>& alphas);

}  // namespace layerforge
