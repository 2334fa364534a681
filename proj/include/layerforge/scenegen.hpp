#pragma once

// Synthetic layered scenes and an oracle-driven layer decomposition:
// detection, depth, and inpainting are answered from the scene's ground
// truth instead of learned models.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "layerforge/layers.hpp"
#include "layerforge/prompts.hpp"
#include "layerforge/random.hpp"

namespace layerforge {

struct ShapeSpec {
    std::string kind;   // circle | rect | triangle
    std::string color;  // a color word
    double cx = 0, cy = 0;
    double rx = 1, ry = 1;  // radius for circles (rx); half extents otherwise
    double depth = 0.5;     // smaller is nearer, in (0, 1)

    std::string prompt() const { return color + " " + kind; }
};

struct SceneSpec {
    std::size_t width = 64, height = 64;
    std::string background = "solid";  // solid | gradient | stripes | checker
    std::string bg_color = "blue";
    std::string bg_color2 = "white";
    std::vector<ShapeSpec> shapes;  // any order; depths must be distinct
    std::uint64_t seed = 0;

    std::string background_prompt() const { return bg_color + " " + background; }
    void validate() const;
};

/// Random spec with `foregrounds` shapes fully inside the canvas.
SceneSpec random_scene(std::uint64_t seed, std::size_t foregrounds, std::size_t width = 64, std::size_t height = 64);

/// RGB of a color word; throws ValidationError for unknown words.
std::array<float, 3> color_rgb(const std::string& word);

/// Binary amodal alpha of a shape, clipped to the canvas. A pixel (x, y)
/// belongs to a circle when (x - cx)² + (y - cy)² ≤ r².
Tensor shape_alpha(const ShapeSpec& shape, std::size_t height, std::size_t width);

struct RenderedScene {
    SceneSpec spec;
    Tensor image;                // H×W×3
    LayerStack stack;            // foregrounds back to front (descending depth)
    std::vector<double> depths;  // per foreground, stack order
    std::vector<std::string> prompts() const { return stack.prompts; }
};

RenderedScene render_scene(const SceneSpec& spec);

/// Per-foreground visible masks α_i Π_{f>i} (1 - α_f), stack order.
std::vector<Tensor> visible_masks(const LayerStack& stack);

/// Half-open pixel box [x0, x1) × [y0, y1).
struct DetectionBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    std::string label;
    double score = 1.0;

    int area() const { return (x1 - x0) * (y1 - y0); }
};

struct DetectOptions {
    int jitter = 0;  // max pixels each edge may move
    std::uint64_t seed = 0;
};

/// Tight box of the visible alpha of the front-most shape whose prompt
/// contains every word of `query`. NotFoundError when nothing is visible.
DetectionBox detect(const Tensor& image, const std::string& query, const RenderedScene& oracle,
                    const DetectOptions& options = {});

/// Depth of the front-most visible shape per pixel; background is 1.0.
Tensor depth_map(const Tensor& image, const RenderedScene& oracle);

struct IouMatch {
    std::size_t index = 0;
    double iou = 0.0;
};

/// Best candidate by IoU against the box; ties go to the lower index.
IouMatch match_iou(const DetectionBox& box, const std::vector<Tensor>& masks);

enum class InpaintMode { oracle, mean_fill };

struct DecomposeOptions {
    InpaintMode inpaint = InpaintMode::oracle;
    std::size_t k_max = 4;  // total layers including the background
    DetectOptions detect;
};

struct ManifestLayer {
    std::string color_path;
    std::string alpha_path;  // empty for the background
    std::string prompt;
    std::size_t z_order = 0;
    std::string provenance;  // "oracle" or "decoded"
};

struct Manifest {
    std::size_t width = 0, height = 0;
    std::vector<ManifestLayer> layers;
    std::string recomposite_hash;
    std::uint64_t seed = 0;
};

struct Decomposition {
    LayerStack stack;
    Manifest manifest;
    std::vector<std::size_t> extraction_order;  // ground-truth foreground indices, front first
    bool truncated = false;
};

/// Repeatedly takes the nearest remaining entity, links it to its prompt via
/// detection + IoU, lifts its alpha and color into a layer, and inpaints the
/// hole. `prompts` lists the background prompt first, then foregrounds.
Decomposition decompose(const Tensor& image, const std::vector<std::string>& prompts, const RenderedScene& oracle,
                        const DecomposeOptions& options = {});

/// FNV-1a of the 8-bit recomposite of the stack as it is stored on disk.
std::string recomposite_hash(const LayerStack& stack);

Manifest make_manifest(const LayerStack& stack, const std::string& provenance, std::uint64_t seed);

/// scene directory: manifest.json, bg.ppm, fg<i>.ppm, fg<i>_alpha.pgm, composite.ppm
void write_scene_dir(const std::filesystem::path& dir, const LayerStack& stack, const Manifest& manifest);

/// Reads a scene directory back; ValidationError if the stored hash does not
/// match the files.
LayerStack read_scene_dir(const std::filesystem::path& dir, Manifest* manifest = nullptr);

}  // namespace layerforge
