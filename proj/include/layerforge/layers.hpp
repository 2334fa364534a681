#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "layerforge/tensor.hpp"

namespace layerforge {

/// One RGBA layer: color is H×W×3, alpha is H×W, both in [0, 1].
class Layer {
public:
    Layer() = default;
    Layer(Tensor color, Tensor alpha);

    /// Opaque layer (alpha ≡ 1).
    static Layer opaque(Tensor color);

    const Tensor& color() const { return color_; }
    const Tensor& alpha() const { return alpha_; }
    std::size_t height() const { return alpha_.dim(0); }
    std::size_t width() const { return alpha_.dim(1); }

private:
    Tensor color_;
    Tensor alpha_;
};

/// Background plus foregrounds ordered back to front. Layer index i of the
/// compositing sum is 1 for the background and 2..k for foregrounds.
struct LayerStack {
    Layer background;
    std::vector<Layer> foregrounds;
    std::vector<std::string> prompts;  // background first, then foregrounds

    std::size_t layer_count() const { return 1 + foregrounds.size(); }
    std::size_t height() const { return background.height(); }
    std::size_t width() const { return background.width(); }
    const Layer& layer(std::size_t i) const { return i == 0 ? background : foregrounds.at(i - 1); }

    /// Throws ShapeError / ValidationError when the invariants do not hold.
    void validate() const;
};

/// Σ_i α_i c_i Π_{f>i} (1 - α_f), clamped to [0, 1]. Returns H×W×3.
Tensor composite(const LayerStack& stack);

/// Back-to-front "over" recursion; reference for composite().
Tensor composite_iterative(const LayerStack& stack);

struct EditOp {
    enum class Kind { move, flip_h, flip_v, resize };

    Kind kind = Kind::move;
    int dx = 0;  // pixels, move only
    int dy = 0;
    double sx = 1.0;  // resize factors about the canvas centre
    double sy = 1.0;

    static EditOp move(int dx, int dy) { return {Kind::move, dx, dy, 1.0, 1.0}; }
    static EditOp flip_h() { return {Kind::flip_h, 0, 0, 1.0, 1.0}; }
    static EditOp flip_v() { return {Kind::flip_v, 0, 0, 1.0, 1.0}; }
    static EditOp resize(double sx, double sy);
};

std::string to_string(EditOp::Kind kind);
EditOp::Kind edit_kind_from_string(const std::string& name);

/// Applies ops left to right to an alpha map on the pixel grid (H×W) and the
/// matching latent (h×w×D). Moves shift the latent by the pixel offset scaled
/// to the latent grid and rounded to the nearest cell; vacated cells become
/// alpha 0 / latent 0.
std::pair<Tensor, Tensor> apply_edit(const Tensor& alpha, const Tensor& latent, const std::vector<EditOp>& ops);

/// Single-grid variant used for both alpha (H×W×1 viewed as C=1) and latents.
Tensor apply_edit_grid(const Tensor& grid, const EditOp& op, double offset_scale_x, double offset_scale_y);

// ---- image files -----------------------------------------------------------

void write_ppm(const std::filesystem::path& path, const Tensor& rgb);
Tensor read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Tensor& gray);
Tensor read_pgm(const std::filesystem::path& path);

/// 8-bit quantisation used by the file writers: round(clamp(v, 0, 1) · 255).
std::uint8_t quantize_unit(float v);

/// Writes color/alpha files plus a JSON manifest
/// {width, height, layers: [{color_path, alpha_path, prompt, z_order}]}.
void save_stack(const std::filesystem::path& dir, const LayerStack& stack);
LayerStack load_stack(const std::filesystem::path& dir);

}  // namespace layerforge
