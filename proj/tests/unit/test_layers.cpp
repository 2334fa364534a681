#include <vector>

#include "doctest.h"
#include "layerforge/numerics.hpp"
#include "layerforge/layers.hpp"
#include "layerforge/random.hpp"

using namespace layerforge;

namespace {

Tensor solid(std::size_t h, std::size_t w, float r, float g, float b) {
    Tensor c({h, w, 3});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            c.at(y, x, 0) = r;
            c.at(y, x, 1) = g;
            c.at(y, x, 2) = b;
        }
    return c;
}

LayerStack random_stack(Rng& rng, std::size_t k, std::size_t h, std::size_t w) {
    LayerStack s;
    Tensor bg({h, w, 3});
    for (auto& v : bg.data()) v = static_cast<float>(rng.uniform());
    s.background = Layer::opaque(bg);
    s.prompts.push_back("blue solid");
    for (std::size_t i = 1; i < k; ++i) {
        Tensor c({h, w, 3}), a({h, w});
        for (auto& v : c.data()) v = static_cast<float>(rng.uniform());
        for (auto& v : a.data()) v = static_cast<float>(rng.uniform());
        s.foregrounds.emplace_back(c, a);
        s.prompts.push_back("red circle");
    }
    return s;
}

}  // namespace

TEST_SUITE("layers") {
    TEST_CASE("composite with only a background returns it") {
        LayerStack s;
        s.background = Layer::opaque(solid(3, 4, 0.2f, 0.4f, 0.6f));
        s.prompts = {"blue solid"};
        CHECK(composite(s).bit_equal(s.background.color()));
        CHECK(composite_iterative(s).bit_equal(s.background.color()));
    }

    TEST_CASE("opaque foreground region shows the foreground color") {
        LayerStack s;
        s.background = Layer::opaque(solid(4, 4, 0, 0, 1));
        Tensor a({4, 4});
        a.at(1, 1) = a.at(1, 2) = 1;
        s.foregrounds.emplace_back(solid(4, 4, 1, 0, 0), a);
        s.prompts = {"blue solid", "red rect"};
        const Tensor out = composite(s);
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x) {
                const bool inside = a.at(y, x) == 1;
                CHECK(out.at(y, x, 0) == (inside ? 1.0f : 0.0f));
                CHECK(out.at(y, x, 2) == (inside ? 0.0f : 1.0f));
            }
    }

    TEST_CASE("hand-evaluated pixel") {
        LayerStack s;
        s.background = Layer::opaque(solid(1, 1, 0, 0, 0));
        s.foregrounds.emplace_back(solid(1, 1, 1, 1, 1), Tensor({1, 1}, 0.5f));
        s.foregrounds.emplace_back(solid(1, 1, 0, 0, 0), Tensor({1, 1}, 0.5f));
        s.prompts = {"a", "b", "c"};
        CHECK(composite(s).at(0, 0, 0) == doctest::Approx(0.25));
    }

    TEST_CASE("composite matches the over recursion on random stacks") {
        Rng rng(21);
        for (int trial = 0; trial < 1000; ++trial) {
            const LayerStack s = random_stack(rng, 1 + trial % 4, 3, 3);
            CHECK(max_abs_diff(composite(s), composite_iterative(s)) <= 1e-6f);
        }
    }

    TEST_CASE("transparent foregrounds leave the background") {
        Rng rng(22);
        LayerStack s = random_stack(rng, 3, 4, 4);
        for (auto& fg : s.foregrounds) fg = Layer(fg.color(), Tensor({4, 4}));
        CHECK(max_abs_diff(composite(s), s.background.color()) <= 1e-7f);
    }

    TEST_CASE("composite is affine in one layer's color") {
        Rng rng(23);
        LayerStack s = random_stack(rng, 3, 3, 3);
        const Tensor c0 = s.foregrounds[0].color();
        Tensor c1 = c0;
        for (auto& v : c1.data()) v = static_cast<float>(rng.uniform());
        Tensor mid = c0;
        for (std::size_t i = 0; i < mid.size(); ++i) mid.data()[i] = 0.5f * (c0.data()[i] + c1.data()[i]);
        const Tensor a = s.foregrounds[0].alpha();
        auto with = [&](const Tensor& c) {
            s.foregrounds[0] = Layer(c, a);
            return composite(s);
        };
        const Tensor o0 = with(c0), o1 = with(c1), om = with(mid);
        for (std::size_t i = 0; i < om.size(); ++i)
            CHECK(om.data()[i] == doctest::Approx(0.5 * (o0.data()[i] + o1.data()[i])).epsilon(1e-6));
    }

    TEST_CASE("apply_edit examples") {
        Tensor alpha({4, 8}), latent({4, 8, 2});
        for (std::size_t y = 0; y < 4; ++y) {
            alpha.at(y, 3) = alpha.at(y, 4) = 1;
            latent.at(y, 3, 0) = latent.at(y, 4, 1) = 1;
        }
        auto [a0, l0] = apply_edit(alpha, latent, {});
        CHECK(a0.bit_equal(alpha));
        CHECK(l0.bit_equal(latent));

        auto [a2, l2] = apply_edit(alpha, latent, {EditOp::flip_h(), EditOp::flip_h()});
        CHECK(max_abs_diff(a2, alpha) <= 1e-6f);
        CHECK(max_abs_diff(l2, latent) <= 1e-6f);

        auto [am, lm] = apply_edit(alpha, latent, {EditOp::move(2, 0)});
        for (std::size_t y = 0; y < 4; ++y) {
            CHECK(am.at(y, 3) == 0.0f);
            CHECK(am.at(y, 4) == 0.0f);
            CHECK(am.at(y, 5) == 1.0f);
            CHECK(am.at(y, 6) == 1.0f);
            CHECK(lm.at(y, 5, 0) == 1.0f);
            CHECK(lm.at(y, 6, 1) == 1.0f);
        }

        auto [af, lf] = apply_edit(alpha, latent, {EditOp::move(100, 0)});
        CHECK(max_abs(af) == 0.0f);
        CHECK(max_abs(lf) == 0.0f);
    }
}
