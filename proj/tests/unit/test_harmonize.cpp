#include <vector>

#include "doctest.h"
#include "layerforge/errors.hpp"
#include "layerforge/harmonize.hpp"
#include "layerforge/numerics.hpp"

using namespace layerforge;

namespace {

// ε̂ = 0.1·z on a single latent.
NoisePredictor linear_predictor() {
    return [](const std::vector<Tensor>& z, int) {
        std::vector<Tensor> out;
        for (const auto& l : z) out.push_back(scale(l, 0.1f));
        return out;
    };
}

struct Fixture {
    NoiseSchedule sched = NoiseSchedule::linear();
    std::vector<int> grid = sched.ddim_timesteps(10);
    std::vector<Tensor> first_pass_start;
    RetainedLatents store;
};

Fixture make_fixture(IrhWindow window) {
    Fixture f;
    Rng rng(51);
    f.first_pass_start = {rng.normal_tensor<float>({9, 2}), rng.normal_tensor<float>({9, 2}),
                          rng.normal_tensor<float>({9, 2})};
    f.store = RetainedLatents(window);
    ddim_sample(linear_predictor(), f.first_pass_start, f.grid, f.sched, f.store.observer());
    return f;
}

std::vector<int> grid_from(const std::vector<int>& grid, int start) {
    std::vector<int> out;
    for (int t : grid)
        if (t <= start) out.push_back(t);
    return out;
}

}  // namespace

TEST_SUITE("harmonize") {
    TEST_CASE("irh_blend examples") {
        Rng rng(52);
        const Tensor bg = rng.normal_tensor<float>({4, 3}), fg = rng.normal_tensor<float>({4, 3});
        CHECK(irh_blend(bg, {fg}, {Tensor({2, 2}, 0.0f)}).bit_equal(bg));
        CHECK(irh_blend(bg, {fg}, {Tensor({2, 2}, 1.0f)}).bit_equal(fg));

        const Tensor out = irh_blend(Tensor({1, 1}, 0.0f), {Tensor({1, 1}, 1.0f), Tensor({1, 1}, 0.0f)},
                                     {Tensor({1, 1}, 0.5f), Tensor({1, 1}, 0.5f)});
        CHECK(out[0] == doctest::Approx(0.25));
    }

    TEST_CASE("irh_blend agrees with layer compositing") {
        Rng rng(53);
        LayerStack s;
        Tensor bgc({2, 2, 3});
        for (auto& v : bgc.data()) v = static_cast<float>(rng.uniform());
        s.background = Layer::opaque(bgc);
        s.prompts = {"a"};
        std::vector<Tensor> fgs, alphas;
        for (int i = 0; i < 2; ++i) {
            Tensor c({2, 2, 3}), a({2, 2});
            for (auto& v : c.data()) v = static_cast<float>(rng.uniform());
            for (auto& v : a.data()) v = static_cast<float>(rng.uniform());
            s.foregrounds.emplace_back(c, a);
            s.prompts.push_back("b");
            fgs.push_back(c.reshaped({4, 3}));
            alphas.push_back(a);
        }
        CHECK(max_abs_diff(irh_blend(bgc.reshaped({4, 3}), fgs, alphas), composite_iterative(s).reshaped({4, 3})) <=
              1e-6f);
    }

    TEST_CASE("irh_blend_edited examples") {
        Rng rng(54);
        const Tensor bg = rng.normal_tensor<float>({64, 2});
        Tensor fg({64, 2}), a({8, 8});
        for (std::size_t y = 3; y < 5; ++y)
            for (std::size_t x = 1; x < 3; ++x) {
                a.at(y, x) = 1;
                fg.at(y * 8 + x, 0) = fg.at(y * 8 + x, 1) = 2;
            }
        HarmonizePlan plan;
        plan.alphas = {a};
        CHECK(irh_blend_edited(bg, {fg}, plan).bit_equal(irh_blend(bg, {fg}, {a})));

        plan.edits = {{EditOp::move(3, 0)}};
        const Tensor moved = irh_blend_edited(bg, {fg}, plan), still = irh_blend(bg, {fg}, {a});
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 0; x < 8; ++x) {
                const bool footprint = y >= 3 && y < 5 && ((x >= 1 && x < 3) || (x >= 4 && x < 6));
                if (!footprint) CHECK(moved.at(y * 8 + x, 0) == still.at(y * 8 + x, 0));
            }

        Tensor sym({8, 8}), sym_fg({64, 2});
        for (std::size_t y = 2; y < 6; ++y)
            for (std::size_t x = 2; x < 6; ++x) {
                sym.at(y, x) = 1;
                sym_fg.at(y * 8 + x, 0) = 1.5f;
            }
        HarmonizePlan flip;
        flip.alphas = {sym};
        flip.edits = {{EditOp::flip_h()}};
        CHECK(max_abs_diff(irh_blend_edited(bg, {sym_fg}, flip), irh_blend(bg, {sym_fg}, {sym})) <= 1e-6f);
    }

    TEST_CASE("retained store spill and load") {
        const Fixture f = make_fixture({600, 400});
        CHECK(f.store.contains(600));
        CHECK(f.store.contains(400));
        CHECK_FALSE(f.store.contains(700));
        CHECK_THROWS_AS(f.store.at(700), StoreIncompleteError);
        const auto dir = std::filesystem::temp_directory_path() / "layerforge_unit_retained";
        std::filesystem::remove_all(dir);
        f.store.spill(dir);
        const RetainedLatents back = RetainedLatents::load(dir);
        CHECK(back.steps().size() == f.store.steps().size());
        CHECK(back.at(500)[1].bit_equal(f.store.at(500)[1]));
        std::filesystem::remove_all(dir);
    }

    TEST_CASE("empty window equals plain continuation") {
        const Fixture f = make_fixture({600, 600});
        HarmonizePlan plan;
        plan.alphas = {Tensor({3, 3}, 0.7f), Tensor({3, 3}, 0.2f)};
        const IrhResult r = run_irh(linear_predictor(), f.store, plan, f.grid, f.sched);
        const auto plain = ddim_sample(linear_predictor(), {f.store.at(600)[0]}, grid_from(f.grid, 600), f.sched);
        CHECK(r.z0.bit_equal(plain[0]));
        CHECK(r.fused.empty());
    }

    TEST_CASE("zero alphas re-denoise the background alone") {
        const Fixture f = make_fixture({600, 400});
        HarmonizePlan plan;
        plan.alphas = {Tensor({3, 3}, 0.0f), Tensor({3, 3}, 0.0f)};
        const IrhResult r = run_irh(linear_predictor(), f.store, plan, f.grid, f.sched);
        const auto plain = ddim_sample(linear_predictor(), {f.store.at(600)[0]}, grid_from(f.grid, 600), f.sched);
        CHECK(max_abs_diff(r.z0, plain[0]) <= 1e-6f);
    }

    TEST_CASE("binary alpha retains the foreground exactly in the window") {
        const Fixture f = make_fixture({600, 400});
        Tensor a({3, 3});
        a.at(1, 1) = a.at(0, 2) = 1;
        HarmonizePlan plan;
        plan.alphas = {a, Tensor({3, 3}, 0.0f)};
        const IrhResult r = run_irh(linear_predictor(), f.store, plan, f.grid, f.sched);
        CHECK_FALSE(r.fused.empty());
        for (const auto& [t, fused] : r.fused)
            for (std::size_t p : {4u, 2u})
                for (std::size_t c = 0; c < 2; ++c) CHECK(fused.at(p, c) == f.store.at(t)[1].at(p, c));
    }

    TEST_CASE("opaque foreground with an oracle denoiser keeps its clean latent") {
        // ε̂ from the known z0 makes every step land on the closed-form trajectory.
        Rng rng(55);
        const NoiseSchedule s = NoiseSchedule::linear();
        const auto grid = s.ddim_timesteps(10);
        const Tensor bg0 = rng.normal_tensor<float>({9, 2}), fg0 = rng.normal_tensor<float>({9, 2});
        const Tensor noise = rng.normal_tensor<float>({9, 2});
        const NoisePredictor oracle = [&](const std::vector<Tensor>& z, int t) {
            std::vector<Tensor> out;
            const double ab = s.abar(t);
            for (const auto& l : z) {
                Tensor e = l;
                if (ab < 1) {
                    for (std::size_t i = 0; i < e.size(); ++i)
                        e[i] = static_cast<float>((l[i] - std::sqrt(ab) * fg0[i]) / std::sqrt(1 - ab));
                }
                out.push_back(e);
            }
            return out;
        };
        RetainedLatents store({600, 400});
        for (int t : grid)
            if (store.window().retains(t)) store.record(t, {q_sample(bg0, t, noise, s), q_sample(fg0, t, noise, s)});
        HarmonizePlan plan;
        plan.alphas = {Tensor({3, 3}, 1.0f)};
        const IrhResult r = run_irh(oracle, store, plan, grid, s);
        CHECK(max_abs_diff(r.z0, fg0) <= 1e-4f);
    }

    TEST_CASE("missing retained step is an error") {
        const NoiseSchedule s = NoiseSchedule::linear();
        RetainedLatents store({600, 400});
        store.record(600, {Tensor({9, 2}), Tensor({9, 2})});
        HarmonizePlan plan;
        plan.alphas = {Tensor({3, 3}, 1.0f)};
        CHECK_THROWS_AS(run_irh(linear_predictor(), store, plan, s.ddim_timesteps(10), s), StoreIncompleteError);
    }
}
