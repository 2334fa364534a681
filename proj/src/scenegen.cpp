#include "layerforge/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "layerforge/prompts.hpp"
#include "layerforge/tensor_io.hpp"

namespace layerforge {

namespace {

const std::map<std::string, std::array<float, 3>>& palette() {
    static const std::map<std::string, std::array<float, 3>> colors = {
        {"red", {0.9f, 0.1f, 0.1f}},     {"green", {0.1f, 0.75f, 0.2f}}, {"blue", {0.15f, 0.25f, 0.9f}},
        {"yellow", {0.95f, 0.9f, 0.1f}}, {"cyan", {0.1f, 0.85f, 0.9f}},  {"magenta", {0.85f, 0.1f, 0.8f}},
        {"orange", {0.95f, 0.55f, 0.1f}}, {"purple", {0.5f, 0.15f, 0.7f}}, {"white", {0.97f, 0.97f, 0.97f}},
        {"black", {0.05f, 0.05f, 0.05f}}, {"pink", {0.95f, 0.6f, 0.75f}}, {"brown", {0.5f, 0.3f, 0.1f}},
    };
    return colors;
}

std::vector<std::string> split_words(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

bool prompt_matches(const std::string& prompt, const std::string& query) {
    const auto have = split_words(prompt);
    const auto want = split_words(query);
    if (want.empty()) return false;
    return std::all_of(want.begin(), want.end(),
                       [&](const std::string& w) { return std::find(have.begin(), have.end(), w) != have.end(); });
}

Tensor background_image(const SceneSpec& spec) {
    const auto c1 = color_rgb(spec.bg_color);
    const auto c2 = color_rgb(spec.bg_color2);
    Tensor img({spec.height, spec.width, 3});
    for (std::size_t y = 0; y < spec.height; ++y) {
        for (std::size_t x = 0; x < spec.width; ++x) {
            float w = 0.0f;  // weight of the second color
            if (spec.background == "gradient") {
                w = spec.height > 1 ? static_cast<float>(y) / static_cast<float>(spec.height - 1) : 0.0f;
            } else if (spec.background == "stripes") {
                w = (y / 4) % 2 ? 1.0f : 0.0f;
            } else if (spec.background == "checker") {
                w = ((x / 8) + (y / 8)) % 2 ? 1.0f : 0.0f;
            }
            for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = c1[c] + w * (c2[c] - c1[c]);
        }
    }
    return img;
}

Layer shape_layer(const ShapeSpec& s, std::size_t h, std::size_t w) {
    Tensor alpha = shape_alpha(s, h, w);
    const auto rgb = color_rgb(s.color);
    Tensor color({h, w, 3}, 0.5f);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            if (alpha.at(y, x) > 0.0f)
                for (std::size_t c = 0; c < 3; ++c) color.at(y, x, c) = rgb[c];
    return Layer(std::move(color), std::move(alpha));
}

/// Scene with the foregrounds at `keep` (ground-truth stack indices) only.
RenderedScene subscene(const RenderedScene& full, const std::vector<std::size_t>& keep) {
    RenderedScene out;
    out.spec = full.spec;
    out.stack.background = full.stack.background;
    out.stack.prompts.push_back(full.stack.prompts.front());
    for (std::size_t i : keep) {
        out.stack.foregrounds.push_back(full.stack.foregrounds[i]);
        out.stack.prompts.push_back(full.stack.prompts[i + 1]);
        out.depths.push_back(full.depths[i]);
    }
    out.image = composite(out.stack);
    return out;
}

}  // namespace

std::array<float, 3> color_rgb(const std::string& word) {
    auto it = palette().find(word);
    if (it == palette().end()) throw ValidationError("unknown color word: " + word);
    return it->second;
}

void SceneSpec::validate() const {
    if (width == 0 || height == 0) throw ValidationError("scene canvas must be non-empty");
    const auto& bgw = background_words();
    if (std::find(bgw.begin(), bgw.end(), background) == bgw.end())
        throw ValidationError("unknown background kind: " + background);
    color_rgb(bg_color);
    color_rgb(bg_color2);
    std::set<double> depths;
    const auto& kinds = shape_words();
    for (const auto& s : shapes) {
        if (std::find(kinds.begin(), kinds.end(), s.kind) == kinds.end())
            throw ValidationError("unknown shape kind: " + s.kind);
        color_rgb(s.color);
        if (!(s.rx > 0 && s.ry > 0)) throw ValidationError("shape extents must be positive");
        if (!(s.depth > 0 && s.depth < 1)) throw ValidationError("shape depth must lie in (0, 1)");
        if (!depths.insert(s.depth).second) throw ValidationError("shape depths must be distinct");
    }
}

SceneSpec random_scene(std::uint64_t seed, std::size_t foregrounds, std::size_t width, std::size_t height) {
    Rng rng(seed, 0x5ce11e);
    const auto& colors = color_words();
    const auto& kinds = shape_words();
    const auto& bgs = background_words();
    auto pick = [&](const std::vector<std::string>& v) { return v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(v.size()) - 1))]; };

    SceneSpec spec;
    spec.width = width;
    spec.height = height;
    spec.seed = seed;
    spec.background = pick(bgs);
    spec.bg_color = pick(colors);
    do spec.bg_color2 = pick(colors);
    while (spec.bg_color2 == spec.bg_color);
    const double small = static_cast<double>(std::min(width, height));
    std::set<double> used;
    for (std::size_t i = 0; i < foregrounds; ++i) {
        ShapeSpec s;
        s.kind = pick(kinds);
        do s.color = pick(colors);
        while (s.color == spec.bg_color);
        s.rx = std::round(rng.uniform(0.1, 0.22) * small);
        s.ry = s.kind == "circle" ? s.rx : std::round(rng.uniform(0.1, 0.22) * small);
        s.cx = std::round(rng.uniform(s.rx, static_cast<double>(width) - 1 - s.rx));
        s.cy = std::round(rng.uniform(s.ry, static_cast<double>(height) - 1 - s.ry));
        do s.depth = std::round(rng.uniform(0.05, 0.95) * 1000.0) / 1000.0;
        while (!used.insert(s.depth).second);
        spec.shapes.push_back(s);
    }
    return spec;
}

Tensor shape_alpha(const ShapeSpec& s, std::size_t height, std::size_t width) {
    Tensor alpha({height, width}, 0.0f);
    for (std::size_t yi = 0; yi < height; ++yi) {
        for (std::size_t xi = 0; xi < width; ++xi) {
            const double x = static_cast<double>(xi), y = static_cast<double>(yi);
            bool inside = false;
            if (s.kind == "circle") {
                inside = (x - s.cx) * (x - s.cx) + (y - s.cy) * (y - s.cy) <= s.rx * s.rx;
            } else if (s.kind == "rect") {
                inside = std::abs(x - s.cx) <= s.rx && std::abs(y - s.cy) <= s.ry;
            } else if (s.kind == "triangle") {
                const double top = s.cy - s.ry;
                inside = y >= top && y <= s.cy + s.ry && std::abs(x - s.cx) <= s.rx * (y - top) / (2 * s.ry);
            } else {
                throw ValidationError("unknown shape kind: " + s.kind);
            }
            if (inside) alpha.at(yi, xi) = 1.0f;
        }
    }
    return alpha;
}

RenderedScene render_scene(const SceneSpec& spec) {
    spec.validate();
    RenderedScene out;
    out.spec = spec;
    out.stack.background = Layer::opaque(background_image(spec));
    out.stack.prompts.push_back(spec.background_prompt());
    std::vector<ShapeSpec> order = spec.shapes;
    std::stable_sort(order.begin(), order.end(), [](const ShapeSpec& a, const ShapeSpec& b) { return a.depth > b.depth; });
    for (const auto& s : order) {
        out.stack.foregrounds.push_back(shape_layer(s, spec.height, spec.width));
        out.stack.prompts.push_back(s.prompt());
        out.depths.push_back(s.depth);
    }
    out.image = composite(out.stack);
    return out;
}

std::vector<Tensor> visible_masks(const LayerStack& stack) {
    const std::size_t n = stack.foregrounds.size();
    std::vector<Tensor> out(n);
    Tensor cover({stack.height(), stack.width()}, 0.0f);  // Π (1 - α_f) over layers above, as 1 - cover
    Tensor above({stack.height(), stack.width()}, 1.0f);
    for (std::size_t k = n; k-- > 0;) {
        const Tensor& a = stack.foregrounds[k].alpha();
        out[k] = Tensor(a.shape());
        for (std::size_t p = 0; p < a.size(); ++p) {
            out[k][p] = a[p] * above[p];
            above[p] *= 1.0f - a[p];
        }
    }
    return out;
}

DetectionBox detect(const Tensor& image, const std::string& query, const RenderedScene& oracle,
                    const DetectOptions& options) {
    if (image.rank() != 3 || image.dim(0) != oracle.stack.height() || image.dim(1) != oracle.stack.width())
        throw ShapeError("detect: image does not match the scene");
    const auto masks = visible_masks(oracle.stack);
    std::size_t best = masks.size();
    for (std::size_t i = 0; i < masks.size(); ++i) {
        if (!prompt_matches(oracle.stack.prompts[i + 1], query)) continue;
        if (std::none_of(masks[i].data().begin(), masks[i].data().end(), [](float v) { return v > 0.0f; })) continue;
        if (best == masks.size() || oracle.depths[i] < oracle.depths[best]) best = i;
    }
    if (best == masks.size()) throw NotFoundError("detect: no visible shape matches '" + query + "'");
    const Tensor& m = masks[best];
    const int H = static_cast<int>(m.dim(0)), W = static_cast<int>(m.dim(1));
    DetectionBox box{W, H, 0, 0, query, 1.0};
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (m.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) > 0.0f) {
                box.x0 = std::min(box.x0, x);
                box.y0 = std::min(box.y0, y);
                box.x1 = std::max(box.x1, x + 1);
                box.y1 = std::max(box.y1, y + 1);
            }
    if (options.jitter > 0) {
        Rng rng(options.seed, std::hash<std::string>{}(query));
        auto j = [&] { return static_cast<int>(rng.uniform_int(-options.jitter, options.jitter)); };
        box.x0 = std::clamp(box.x0 + j(), 0, W - 1);
        box.y0 = std::clamp(box.y0 + j(), 0, H - 1);
        box.x1 = std::clamp(box.x1 + j(), box.x0 + 1, W);
        box.y1 = std::clamp(box.y1 + j(), box.y0 + 1, H);
        box.score = 0.9;
    }
    return box;
}

Tensor depth_map(const Tensor& image, const RenderedScene& oracle) {
    if (image.rank() != 3 || image.dim(0) != oracle.stack.height() || image.dim(1) != oracle.stack.width())
        throw ShapeError("depth_map: image does not match the scene");
    Tensor depth({oracle.stack.height(), oracle.stack.width()}, 1.0f);
    const auto masks = visible_masks(oracle.stack);
    for (std::size_t i = 0; i < masks.size(); ++i)
        for (std::size_t p = 0; p < depth.size(); ++p)
            if (masks[i][p] > 0.0f) depth[p] = std::min(depth[p], static_cast<float>(oracle.depths[i]));
    return depth;
}

IouMatch match_iou(const DetectionBox& box, const std::vector<Tensor>& masks) {
    if (masks.empty()) throw ValidationError("match_iou: no candidates");
    IouMatch best{0, 0.0};
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const Tensor& m = masks[i];
        std::size_t inter = 0, in_mask = 0;
        for (std::size_t y = 0; y < m.dim(0); ++y)
            for (std::size_t x = 0; x < m.dim(1); ++x) {
                if (!(m.at(y, x) > 0.0f)) continue;
                ++in_mask;
                const int xi = static_cast<int>(x), yi = static_cast<int>(y);
                if (xi >= box.x0 && xi < box.x1 && yi >= box.y0 && yi < box.y1) ++inter;
            }
        const double uni = static_cast<double>(box.area()) + static_cast<double>(in_mask) - static_cast<double>(inter);
        const double iou = uni > 0 ? static_cast<double>(inter) / uni : 0.0;
        if (iou > best.iou) best = {i, iou};
    }
    if (best.iou == 0.0) throw NotFoundError("match_iou: box overlaps no candidate");
    return best;
}

Decomposition decompose(const Tensor& image, const std::vector<std::string>& prompts, const RenderedScene& oracle,
                        const DecomposeOptions& options) {
    if (prompts.empty()) throw ValidationError("decompose: need at least the background prompt");
    if (options.k_max < 1) throw ValidationError("decompose: k_max must be at least 1");
    if (image.shape() != oracle.image.shape()) throw ShapeError("decompose: image does not match the scene");

    std::vector<std::size_t> remaining(oracle.stack.foregrounds.size());
    for (std::size_t i = 0; i < remaining.size(); ++i) remaining[i] = i;
    std::vector<std::string> open_prompts(prompts.begin() + 1, prompts.end());
    Tensor current = image;
    const std::size_t H = image.dim(0), W = image.dim(1);

    Decomposition out;
    std::vector<Layer> extracted;
    std::vector<std::string> extracted_prompts;
    while (!remaining.empty()) {
        if (extracted.size() + 1 >= options.k_max) {
            out.truncated = true;
            break;
        }
        const RenderedScene view = subscene(oracle, remaining);
        const auto masks = visible_masks(view.stack);
        const Tensor depth = depth_map(current, view);

        // nearest entity: the one owning the minimum-depth pixel
        std::size_t entity = masks.size();
        float nearest = 2.0f;
        for (std::size_t i = 0; i < masks.size(); ++i)
            for (std::size_t p = 0; p < depth.size(); ++p)
                if (masks[i][p] > 0.0f && depth[p] < nearest) {
                    nearest = depth[p];
                    entity = i;
                }
        if (entity == masks.size()) break;  // nothing visible is left

        std::size_t prompt_index = open_prompts.size();
        double best_iou = 0.0;
        for (std::size_t q = 0; q < open_prompts.size(); ++q) {
            try {
                const IouMatch m = match_iou(detect(current, open_prompts[q], view, options.detect), masks);
                if (m.index == entity && m.iou > best_iou) {
                    best_iou = m.iou;
                    prompt_index = q;
                }
            } catch (const NotFoundError&) {
            }
        }
        const std::string prompt = prompt_index < open_prompts.size() ? open_prompts[prompt_index] : view.stack.prompts[entity + 1];
        if (prompt_index < open_prompts.size()) open_prompts.erase(open_prompts.begin() + static_cast<std::ptrdiff_t>(prompt_index));

        Tensor alpha = masks[entity];
        Tensor color({H, W, 3}, 0.5f);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                if (alpha.at(y, x) > 0.0f)
                    for (std::size_t c = 0; c < 3; ++c) color.at(y, x, c) = current.at(y, x, c);
        extracted.emplace_back(std::move(color), alpha);
        extracted_prompts.push_back(prompt);
        out.extraction_order.push_back(remaining[entity]);
        remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(entity));

        if (options.inpaint == InpaintMode::oracle) {
            current = subscene(oracle, remaining).image;
        } else {
            double sum[3] = {0, 0, 0};
            std::size_t n = 0;
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    if (!(alpha.at(y, x) > 0.0f)) {
                        ++n;
                        for (std::size_t c = 0; c < 3; ++c) sum[c] += current.at(y, x, c);
                    }
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    if (alpha.at(y, x) > 0.0f)
                        for (std::size_t c = 0; c < 3; ++c)
                            current.at(y, x, c) = n ? static_cast<float>(sum[c] / static_cast<double>(n)) : 0.5f;
        }
    }

    out.stack.background = Layer::opaque(current);
    out.stack.prompts.push_back(prompts.front());
    for (std::size_t k = extracted.size(); k-- > 0;) {
        out.stack.foregrounds.push_back(extracted[k]);
        out.stack.prompts.push_back(extracted_prompts[k]);
    }
    out.manifest = make_manifest(out.stack, "oracle", oracle.spec.seed);
    return out;
}

namespace {

LayerStack quantized(const LayerStack& stack) {
    auto q = [](const Tensor& t) {
        Tensor out = t;
        for (auto& v : out.storage()) v = static_cast<float>(quantize_unit(v)) / 255.0f;
        return out;
    };
    LayerStack out;
    out.background = Layer::opaque(q(stack.background.color()));
    for (const auto& fg : stack.foregrounds) out.foregrounds.emplace_back(q(fg.color()), q(fg.alpha()));
    out.prompts = stack.prompts;
    return out;
}

}  // namespace

std::string recomposite_hash(const LayerStack& stack) {
    const Tensor img = composite(quantized(stack));
    std::vector<std::uint8_t> bytes(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) bytes[i] = quantize_unit(img[i]);
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

Manifest make_manifest(const LayerStack& stack, const std::string& provenance, std::uint64_t seed) {
    stack.validate();
    Manifest m;
    m.width = stack.width();
    m.height = stack.height();
    m.seed = seed;
    for (std::size_t i = 0; i < stack.layer_count(); ++i) {
        ManifestLayer l;
        const std::string base = i == 0 ? "bg" : "fg" + std::to_string(i);
        l.color_path = base + ".ppm";
        l.alpha_path = i == 0 ? "" : base + "_alpha.pgm";
        l.prompt = i < stack.prompts.size() ? stack.prompts[i] : "";
        l.z_order = i;
        l.provenance = provenance;
        m.layers.push_back(l);
    }
    m.recomposite_hash = recomposite_hash(stack);
    return m;
}

void write_scene_dir(const std::filesystem::path& dir, const LayerStack& stack, const Manifest& manifest) {
    stack.validate();
    if (manifest.layers.size() != stack.layer_count()) throw ValidationError("manifest/stack layer count differs");
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["width"] = manifest.width;
    j["height"] = manifest.height;
    j["seed"] = manifest.seed;
    j["recomposite_hash"] = manifest.recomposite_hash;
    j["layers"] = nlohmann::json::array();
    for (std::size_t i = 0; i < stack.layer_count(); ++i) {
        const auto& ml = manifest.layers[i];
        const Layer& layer = stack.layer(i);
        write_ppm(dir / ml.color_path, layer.color());
        nlohmann::json e{{"color_path", ml.color_path},
                         {"prompt", ml.prompt},
                         {"z_order", ml.z_order},
                         {"provenance", ml.provenance}};
        if (ml.alpha_path.empty()) {
            e["alpha_path"] = nullptr;
        } else {
            e["alpha_path"] = ml.alpha_path;
            write_pgm(dir / ml.alpha_path, layer.alpha());
        }
        j["layers"].push_back(e);
    }
    write_ppm(dir / "composite.ppm", composite(stack));
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write manifest in " + dir.string());
    out << j.dump(2) << "\n";
}

LayerStack read_scene_dir(const std::filesystem::path& dir, Manifest* manifest) {
    LayerStack stack = load_stack(dir);
    std::ifstream in(dir / "manifest.json");
    nlohmann::json j = nlohmann::json::parse(in);
    const std::string stored = j.value("recomposite_hash", "");
    if (!stored.empty() && stored != recomposite_hash(stack))
        throw ValidationError("recomposite hash mismatch in " + dir.string());
    if (manifest) {
        manifest->width = j.at("width");
        manifest->height = j.at("height");
        manifest->seed = j.value("seed", std::uint64_t{0});
        manifest->recomposite_hash = stored;
        manifest->layers.clear();
        for (const auto& e : j.at("layers")) {
            ManifestLayer l;
            l.color_path = e.at("color_path");
            l.alpha_path = e.at("alpha_path").is_null() ? "" : e.at("alpha_path").get<std::string>();
            l.prompt = e.value("prompt", "");
            l.z_order = e.at("z_order");
            l.provenance = e.value("provenance", "oracle");
            manifest->layers.push_back(l);
        }
        std::sort(manifest->layers.begin(), manifest->layers.end(),
                  [](const ManifestLayer& a, const ManifestLayer& b) { return a.z_order < b.z_order; });
    }
    return stack;
}

}  // namespace layerforge
