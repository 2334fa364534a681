#include "layerforge/layers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace layerforge {

namespace {

void require_unit_range(const Tensor& t, const char* what) {
    for (float v : t.data()) {
        if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError(std::string(what) + " value outside [0, 1]");
    }
}

}  // namespace

Layer::Layer(Tensor color, Tensor alpha) : color_(std::move(color)), alpha_(std::move(alpha)) {
    color_.require_rank(3);
    alpha_.require_rank(2);
    if (color_.dim(2) != 3) throw ShapeError("layer color must have 3 channels");
    if (color_.dim(0) != alpha_.dim(0) || color_.dim(1) != alpha_.dim(1)) {
        throw ShapeError("layer color " + shape_string(color_.shape()) + " and alpha " +
                         shape_string(alpha_.shape()) + " differ in H×W");
    }
    require_unit_range(color_, "color");
    require_unit_range(alpha_, "alpha");
}

Layer Layer::opaque(Tensor color) {
    color.require_rank(3);
    Tensor alpha({color.dim(0), color.dim(1)}, 1.0f);
    return Layer(std::move(color), std::move(alpha));
}

void LayerStack::validate() const {
    for (float a : background.alpha().data()) {
        if (a != 1.0f) throw ValidationError("background alpha must be 1 everywhere");
    }
    for (const auto& fg : foregrounds) {
        if (fg.height() != height() || fg.width() != width()) {
            throw ShapeError("layer stack dims differ: " + shape_string(fg.alpha().shape()) + " vs " +
                             shape_string(background.alpha().shape()));
        }
    }
}

Tensor composite(const LayerStack& stack) {
    stack.validate();
    const std::size_t H = stack.height(), W = stack.width(), k = stack.layer_count();
    Tensor out({H, W, 3});
    for (std::size_t p = 0; p < H * W; ++p) {
        float sum[3] = {0.0f, 0.0f, 0.0f};
        float occlusion = 1.0f;  // Π_{f>i} (1 - α_f)
        for (std::size_t i = k; i-- > 0;) {
            const Layer& layer = stack.layer(i);
            const float a = layer.alpha()[p];
            for (int c = 0; c < 3; ++c) sum[c] += a * layer.color()[p * 3 + c] * occlusion;
            occlusion *= 1.0f - a;
        }
        for (int c = 0; c < 3; ++c) out[p * 3 + c] = std::clamp(sum[c], 0.0f, 1.0f);
    }
    return out;
}

Tensor composite_iterative(const LayerStack& stack) {
    stack.validate();
    Tensor out = stack.background.color();
    for (const auto& fg : stack.foregrounds) {
        for (std::size_t p = 0; p < fg.alpha().size(); ++p) {
            const float a = fg.alpha()[p];
            for (int c = 0; c < 3; ++c) out[p * 3 + c] = a * fg.color()[p * 3 + c] + (1.0f - a) * out[p * 3 + c];
        }
    }
    return out;
}

EditOp EditOp::resize(double sx, double sy) {
    if (!(sx > 0.0) || !(sy > 0.0)) throw ValidationError("resize factors must be positive");
    return {Kind::resize, 0, 0, sx, sy};
}

std::string to_string(EditOp::Kind kind) {
    switch (kind) {
        case EditOp::Kind::move: return "move";
        case EditOp::Kind::flip_h: return "flip_h";
        case EditOp::Kind::flip_v: return "flip_v";
        case EditOp::Kind::resize: return "resize";
    }
    return "?";
}

EditOp::Kind edit_kind_from_string(const std::string& name) {
    if (name == "move") return EditOp::Kind::move;
    if (name == "flip_h") return EditOp::Kind::flip_h;
    if (name == "flip_v") return EditOp::Kind::flip_v;
    if (name == "resize") return EditOp::Kind::resize;
    throw ValidationError("unknown edit kind: " + name);
}

Tensor apply_edit_grid(const Tensor& grid, const EditOp& op, double offset_scale_x, double offset_scale_y) {
    const std::size_t H = grid.dim(0), W = grid.dim(1);
    const std::size_t C = grid.rank() == 3 ? grid.dim(2) : 1;
    Tensor out(grid.shape());
    auto cell = [&](const Tensor& t, std::size_t y, std::size_t x, std::size_t c) -> float {
        return t[(y * W + x) * C + c];
    };
    switch (op.kind) {
        case EditOp::Kind::move: {
            const long sx = std::lround(op.dx * offset_scale_x);
            const long sy = std::lround(op.dy * offset_scale_y);
            for (std::size_t y = 0; y < H; ++y) {
                const long src_y = static_cast<long>(y) - sy;
                if (src_y < 0 || src_y >= static_cast<long>(H)) continue;
                for (std::size_t x = 0; x < W; ++x) {
                    const long src_x = static_cast<long>(x) - sx;
                    if (src_x < 0 || src_x >= static_cast<long>(W)) continue;
                    for (std::size_t c = 0; c < C; ++c)
                        out[(y * W + x) * C + c] = cell(grid, static_cast<std::size_t>(src_y),
                                                        static_cast<std::size_t>(src_x), c);
                }
            }
            break;
        }
        case EditOp::Kind::flip_h:
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    for (std::size_t c = 0; c < C; ++c) out[(y * W + x) * C + c] = cell(grid, y, W - 1 - x, c);
            break;
        case EditOp::Kind::flip_v:
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    for (std::size_t c = 0; c < C; ++c) out[(y * W + x) * C + c] = cell(grid, H - 1 - y, x, c);
            break;
        case EditOp::Kind::resize: {
            const double cy = (static_cast<double>(H) - 1.0) / 2.0;
            const double cx = (static_cast<double>(W) - 1.0) / 2.0;
            for (std::size_t y = 0; y < H; ++y) {
                const double fy = cy + (static_cast<double>(y) - cy) / op.sy;
                if (fy < 0.0 || fy > static_cast<double>(H - 1)) continue;
                const auto y0 = static_cast<std::size_t>(fy);
                const std::size_t y1 = std::min(y0 + 1, H - 1);
                const float ty = static_cast<float>(fy - static_cast<double>(y0));
                for (std::size_t x = 0; x < W; ++x) {
                    const double fx = cx + (static_cast<double>(x) - cx) / op.sx;
                    if (fx < 0.0 || fx > static_cast<double>(W - 1)) continue;
                    const auto x0 = static_cast<std::size_t>(fx);
                    const std::size_t x1 = std::min(x0 + 1, W - 1);
                    const float tx = static_cast<float>(fx - static_cast<double>(x0));
                    for (std::size_t c = 0; c < C; ++c) {
                        const float top = cell(grid, y0, x0, c) + tx * (cell(grid, y0, x1, c) - cell(grid, y0, x0, c));
                        const float bot = cell(grid, y1, x0, c) + tx * (cell(grid, y1, x1, c) - cell(grid, y1, x0, c));
                        out[(y * W + x) * C + c] = top + ty * (bot - top);
                    }
                }
            }
            break;
        }
    }
    return out;
}

std::pair<Tensor, Tensor> apply_edit(const Tensor& alpha, const Tensor& latent, const std::vector<EditOp>& ops) {
    alpha.require_rank(2);
    latent.require_rank(3);
    const double scale_x = static_cast<double>(latent.dim(1)) / static_cast<double>(alpha.dim(1));
    const double scale_y = static_cast<double>(latent.dim(0)) / static_cast<double>(alpha.dim(0));
    Tensor a = alpha, z = latent;
    for (const auto& op : ops) {
        if (op.kind == EditOp::Kind::resize && (!(op.sx > 0.0) || !(op.sy > 0.0))) {
            throw ValidationError("resize factors must be positive");
        }
        a = apply_edit_grid(a, op, 1.0, 1.0);
        z = apply_edit_grid(z, op, scale_x, scale_y);
    }
    return {std::move(a), std::move(z)};
}

// ---- image files -------------------------------------------------------------

std::uint8_t quantize_unit(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

namespace {

void write_netpbm(const std::filesystem::path& path, const char* magic, std::size_t w, std::size_t h,
                  const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << magic << "\n" << w << " " << h << "\n255\n";
    std::vector<char> bytes(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) bytes[i] = static_cast<char>(quantize_unit(t[i]));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

std::string next_token(std::istream& in) {
    std::string tok;
    while (in) {
        int c = in.peek();
        if (c == '#') {
            std::string comment;
            std::getline(in, comment);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    in >> tok;
    return tok;
}

Tensor read_netpbm(const std::filesystem::path& path, const std::string& magic, std::size_t channels) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    if (next_token(in) != magic) throw IoError(path.string() + ": expected " + magic);
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(next_token(in));
        h = std::stoul(next_token(in));
        maxval = std::stoul(next_token(in));
    } catch (const std::exception&) {
        throw IoError(path.string() + ": malformed header");
    }
    if (maxval != 255 || w == 0 || h == 0) throw IoError(path.string() + ": unsupported image header");
    in.get();
    std::vector<unsigned char> bytes(w * h * channels);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw IoError(path.string() + ": truncated pixel data");
    Shape shape = channels == 1 ? Shape{h, w} : Shape{h, w, channels};
    Tensor t(shape);
    for (std::size_t i = 0; i < bytes.size(); ++i) t[i] = static_cast<float>(bytes[i]) / 255.0f;
    return t;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor& rgb) {
    rgb.require_rank(3);
    if (rgb.dim(2) != 3) throw ShapeError("write_ppm: expected 3 channels");
    write_netpbm(path, "P6", rgb.dim(1), rgb.dim(0), rgb);
}

Tensor read_ppm(const std::filesystem::path& path) { return read_netpbm(path, "P6", 3); }

void write_pgm(const std::filesystem::path& path, const Tensor& gray) {
    gray.require_rank(2);
    write_netpbm(path, "P5", gray.dim(1), gray.dim(0), gray);
}

Tensor read_pgm(const std::filesystem::path& path) { return read_netpbm(path, "P5", 1); }

void save_stack(const std::filesystem::path& dir, const LayerStack& stack) {
    stack.validate();
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["width"] = stack.width();
    manifest["height"] = stack.height();
    manifest["layers"] = nlohmann::json::array();
    for (std::size_t i = 0; i < stack.layer_count(); ++i) {
        const Layer& layer = stack.layer(i);
        nlohmann::json entry;
        const std::string base = i == 0 ? "bg" : "fg" + std::to_string(i);
        entry["color_path"] = base + ".ppm";
        write_ppm(dir / (base + ".ppm"), layer.color());
        if (i == 0) {
            entry["alpha_path"] = nullptr;
        } else {
            entry["alpha_path"] = base + "_alpha.pgm";
            write_pgm(dir / (base + "_alpha.pgm"), layer.alpha());
        }
        entry["prompt"] = i < stack.prompts.size() ? stack.prompts[i] : "";
        entry["z_order"] = i;
        manifest["layers"].push_back(entry);
    }
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump(2) << "\n";
}

LayerStack load_stack(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw IoError("missing manifest in " + dir.string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad manifest JSON: " + std::string(e.what()));
    }
    auto entries = manifest.at("layers");
    std::vector<nlohmann::json> ordered(entries.begin(), entries.end());
    std::sort(ordered.begin(), ordered.end(),
              [](const auto& a, const auto& b) { return a.at("z_order").template get<int>() < b.at("z_order").template get<int>(); });
    LayerStack stack;
    for (std::size_t i = 0; i < ordered.size(); ++i) {
        const auto& e = ordered[i];
        Tensor color = read_ppm(dir / e.at("color_path").get<std::string>());
        Layer layer = e.at("alpha_path").is_null()
                          ? Layer::opaque(std::move(color))
                          : Layer(std::move(color), read_pgm(dir / e.at("alpha_path").get<std::string>()));
        if (i == 0) {
            stack.background = std::move(layer);
        } else {
            stack.foregrounds.push_back(std::move(layer));
        }
        stack.prompts.push_back(e.value("prompt", ""));
    }
    stack.validate();
    if (stack.width() != manifest.at("width").get<std::size_t>() ||
        stack.height() != manifest.at("height").get<std::size_t>()) {
        throw ShapeError("manifest dims do not match layer files");
    }
    return stack;
}

}  // namespace layerforge
