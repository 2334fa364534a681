#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "doctest.h"
#include "layerforge/cli.hpp"
#include "layerforge/errors.hpp"
#include "layerforge/prompts.hpp"
#include "layerforge/scenegen.hpp"

using namespace layerforge;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig = R"({"seed": 3, "ddim_steps": 10,
  "model": {"image_h": 16, "image_w": 16, "latent_h": 4, "latent_w": 4, "dim": 8, "seq_len": 8,
            "blocks": 1, "heads": 2, "alpha_hidden": 4},
  "data": {"count": 2, "layers": 3}})";

struct Workspace {
    fs::path root;
    explicit Workspace(const std::string& name) : root(fs::temp_directory_path() / ("layerforge_unit_" + name)) {
        fs::remove_all(root);
        fs::create_directories(root);
        write("config.json", kSmallConfig);
        write("prompts.json", R"({"background": "blue solid", "foregrounds": ["red circle", "green rect"]})");
        write("bg_only.json", R"({"background": "blue solid"})");
    }
    ~Workspace() { fs::remove_all(root); }

    void write(const std::string& name, const std::string& text) const { std::ofstream(root / name) << text; }
    std::string path(const std::string& name) const { return (root / name).string(); }

    int run(std::vector<std::string> args) const {
        args.insert(args.begin(), "layerforge");
        std::vector<char*> argv;
        for (auto& a : args) argv.push_back(a.data());
        return run_cli(static_cast<int>(argv.size()), argv.data());
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

bool same_tree(const fs::path& a, const fs::path& b) {
    std::vector<fs::path> fa, fb;
    for (const auto& e : fs::recursive_directory_iterator(a)) fa.push_back(fs::relative(e.path(), a));
    for (const auto& e : fs::recursive_directory_iterator(b)) fb.push_back(fs::relative(e.path(), b));
    std::sort(fa.begin(), fa.end());
    std::sort(fb.begin(), fb.end());
    if (fa != fb) return false;
    for (const auto& rel : fa)
        if (fs::is_regular_file(a / rel) && slurp(a / rel) != slurp(b / rel)) return false;
    return true;
}

}  // namespace

TEST_SUITE("cli") {
    TEST_CASE("config parsing is strict") {
        CHECK_THROWS_AS(RunConfig::from_json(R"({"sed": 1})"), ValidationError);
        CHECK_THROWS_AS(RunConfig::from_json(R"({"model": {"dims": 2}})"), ValidationError);
        CHECK_THROWS_AS(RunConfig::from_json(R"({"seed": "one"})"), ValidationError);
        CHECK_THROWS_AS(RunConfig::from_json(R"({"mask_mode": "sometimes"})"), ValidationError);
        CHECK_THROWS_AS(RunConfig::from_json(R"({"T_H": 300, "T_H_prime": 400})"), ValidationError);
        CHECK_THROWS_AS(RunConfig::from_json("{"), ValidationError);

        const RunConfig c = RunConfig::from_json(kSmallConfig);
        CHECK(c.seed == 3);
        CHECK(c.model.dim == 8);
        CHECK(RunConfig::from_json(c.to_json()).to_json() == c.to_json());
    }

    TEST_CASE("exit codes") {
        Workspace w("exit");
        CHECK(w.run({}) == 1);
        CHECK(w.run({"make-data", "--bogus"}) == 1);
        w.write("bad.json", R"({"model": {"dims": 2}})");
        CHECK(w.run({"--config", w.path("bad.json"), "--out", w.path("d"), "make-data"}) == 2);
        CHECK_FALSE(fs::exists(w.root / "d"));
        CHECK(w.run({"--config", w.path("config.json"), "--out", w.path("d"), "make-data"}) == 0);
        CHECK(w.run({"--config", w.path("config.json"), "--out", w.path("d"), "make-data"}) == 2);
        CHECK(w.run({"check", "--suite", "nonsense"}) == 2);
        CHECK(w.run({"check", "--suite", "numerics"}) == 0);
    }

    TEST_CASE("make-data is deterministic and complete") {
        Workspace w("data");
        REQUIRE(w.run({"--config", w.path("config.json"), "--out", w.path("a"), "make-data", "--count", "3",
                       "--layers", "4"}) == 0);
        REQUIRE(w.run({"--config", w.path("config.json"), "--out", w.path("b"), "make-data", "--count", "3",
                       "--layers", "4"}) == 0);
        CHECK(same_tree(w.root / "a", w.root / "b"));
        std::size_t scenes = 0;
        for (const auto& e : fs::directory_iterator(w.root / "a")) {
            if (!e.is_directory()) continue;
            ++scenes;
            Manifest m;
            read_scene_dir(e.path(), &m);
            CHECK(m.layers.size() == 4);
        }
        CHECK(scenes == 3);
    }

    TEST_CASE("train, resume, generate and edit") {
        Workspace w("pipeline");
        const std::string cfg = w.path("config.json");
        REQUIRE(w.run({"--config", cfg, "--out", w.path("data"), "make-data"}) == 0);

        REQUIRE(w.run({"--config", cfg, "--out", w.path("ck0"), "train", "--data", w.path("data"), "--steps", "0"}) == 0);
        const Checkpoint zero = load_checkpoint(w.root / "ck0");
        const RunConfig config = RunConfig::from_json(kSmallConfig);
        const DenoiserModel init = init_denoiser(config.model, config.seed, Vocabulary::standard().size());
        for (std::size_t i = 0; i < init.params.size(); ++i) CHECK(zero.model.params[i].bit_equal(init.params[i]));

        REQUIRE(w.run({"--config", cfg, "--out", w.path("ck10"), "train", "--data", w.path("data"), "--steps", "10"}) ==
                0);
        REQUIRE(w.run({"--config", cfg, "--out", w.path("ck5"), "train", "--data", w.path("data"), "--steps", "5"}) == 0);
        REQUIRE(w.run({"--config", cfg, "--out", w.path("ck5r"), "train", "--data", w.path("data"), "--steps", "5",
                       "--resume", w.path("ck5")}) == 0);
        CHECK(slurp(w.root / "ck10" / "loss_log.tsv") == slurp(w.root / "ck5r" / "loss_log.tsv"));
        const Checkpoint full = load_checkpoint(w.root / "ck10"), resumed = load_checkpoint(w.root / "ck5r");
        CHECK(resumed.step == 10);
        for (std::size_t i = 0; i < full.model.params.size(); ++i)
            CHECK(full.model.params[i].bit_equal(resumed.model.params[i]));

        const std::string ck = w.path("ck10");
        REQUIRE(w.run({"--config", cfg, "--out", w.path("run"), "generate", "--checkpoint", ck, "--prompts",
                       w.path("prompts.json")}) == 0);
        REQUIRE(w.run({"--config", cfg, "--out", w.path("run2"), "generate", "--checkpoint", ck, "--prompts",
                       w.path("prompts.json")}) == 0);
        CHECK(same_tree(w.root / "run", w.root / "run2"));
        for (const char* f : {"composite.ppm", "global.ppm", "context_map_fg1.pgm", "context_map_fg2.pgm", "report.json"})
            CHECK(fs::exists(w.root / "run" / f));
        Manifest layers;
        read_scene_dir(w.root / "run" / "layers", &layers);
        CHECK(layers.layers.size() == 3);

        REQUIRE(w.run({"--config", cfg, "--out", w.path("bg"), "generate", "--checkpoint", ck, "--prompts",
                       w.path("bg_only.json")}) == 0);
        CHECK_FALSE(fs::exists(w.root / "bg" / "retained"));

        w.write("none.json", R"({"edits": []})");
        REQUIRE(w.run({"--config", cfg, "--out", w.path("ed0"), "edit", "--checkpoint", ck, "--run", w.path("run"),
                       "--edits", w.path("none.json")}) == 0);
        CHECK(slurp(w.root / "ed0" / "composite.ppm") == slurp(w.root / "run" / "composite.ppm"));

        w.write("bad_target.json", R"({"edits": [{"layer": 7, "ops": [{"op": "flip_h"}]}]})");
        CHECK(w.run({"--config", cfg, "--out", w.path("ed_bad"), "edit", "--checkpoint", ck, "--run", w.path("run"),
                     "--edits", w.path("bad_target.json")}) == 2);
        CHECK_FALSE(fs::exists(w.root / "ed_bad"));
        for (const auto& e : fs::directory_iterator(w.root))
            CHECK(e.path().filename().string().find(".partial") == std::string::npos);
    }

    TEST_CASE("thread cap validation") {
        ::setenv("LAYERFORGE_THREADS", "0", 1);
        CHECK_THROWS_AS(thread_cap(), ValidationError);
        ::setenv("LAYERFORGE_THREADS", "2", 1);
        CHECK(thread_cap() == 2);
        ::unsetenv("LAYERFORGE_THREADS");
        CHECK(thread_cap() == 1);
    }
}

// Measures the layered sampler itself; see README "Known gaps".
TEST_SUITE("decompose_quality") {
    TEST_CASE("decompose recovers foreground alphas of a rendered scene") {
        Workspace w("decompose_quality");
        w.write("toy.json", R"({"seed": 1, "model": {"image_h": 32, "image_w": 32, "latent_h": 8, "latent_w": 8,
          "dim": 16, "seq_len": 8, "blocks": 2, "heads": 2, "alpha_hidden": 8}, "data": {"count": 8, "layers": 3}})");
        const std::string cfg = w.path("toy.json");
        REQUIRE(w.run({"--config", cfg, "--out", w.path("data"), "make-data"}) == 0);
        REQUIRE(w.run({"--config", cfg, "--out", w.path("ck"), "train", "--data", w.path("data"), "--steps", "200"}) == 0);
        double iou_sum = 0;
        std::size_t layers = 0;
        for (std::uint64_t seed = 900; seed < 903; ++seed) {
            const RenderedScene scene = render_scene(random_scene(seed, 2, 32, 32));
            const std::string tag = std::to_string(seed);
            write_ppm(w.root / ("scene" + tag + ".ppm"), scene.image);
            w.write("p" + tag + ".json", "{\"background\": \"" + scene.stack.prompts[0] + "\", \"foregrounds\": [\"" +
                                             scene.stack.prompts[1] + "\", \"" + scene.stack.prompts[2] + "\"]}");
            REQUIRE(w.run({"--config", cfg, "--out", w.path("d" + tag), "decompose", "--checkpoint", w.path("ck"),
                           "--image", w.path("scene" + tag + ".ppm"), "--prompts", w.path("p" + tag + ".json")}) == 0);
            const LayerStack got = read_scene_dir(w.root / ("d" + tag) / "layers");
            for (std::size_t f = 0; f < 2; ++f, ++layers) {
                const Tensor& a = got.foregrounds[f].alpha();
                const Tensor& g = scene.stack.foregrounds[f].alpha();
                std::size_t inter = 0, uni = 0;
                for (std::size_t i = 0; i < a.size(); ++i) {
                    inter += a[i] > 0.5f && g[i] > 0.5f;
                    uni += a[i] > 0.5f || g[i] > 0.5f;
                }
                iou_sum += uni ? static_cast<double>(inter) / uni : 1.0;
            }
        }
        const double mean_iou = iou_sum / static_cast<double>(layers);
        INFO("mean per-layer alpha IoU " << mean_iou);
        CHECK(mean_iou > 0.5);
    }
}
