#include <cmath>
#include <vector>

#include "doctest.h"
#include "layerforge/attention.hpp"
#include "layerforge/errors.hpp"
#include "layerforge/numerics.hpp"

using namespace layerforge;

namespace {

Tensor randn(Rng& rng, std::size_t r, std::size_t c, double s = 1.0) { return rng.normal_tensor<float>({r, c}, s); }

// Straight-line double-precision reference of one context-aware block.
using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
    Mat m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
    return m;
}

Mat mul(const Mat& a, const Mat& b) {
    Mat o(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < b.size(); ++k)
            for (std::size_t j = 0; j < b[0].size(); ++j) o[i][j] += a[i][k] * b[k][j];
    return o;
}

Mat layer_norm(const Mat& x, const Tensor& gain, const Tensor& bias) {
    Mat o = x;
    for (std::size_t r = 0; r < x.size(); ++r) {
        double mean = 0, var = 0;
        for (double v : x[r]) mean += v;
        mean /= x[r].size();
        for (double v : x[r]) var += (v - mean) * (v - mean);
        var /= x[r].size();
        for (std::size_t c = 0; c < x[r].size(); ++c)
            o[r][c] = (x[r][c] - mean) / std::sqrt(var + 1e-5) * gain.at(0, c) + bias.at(0, c);
    }
    return o;
}

Mat reference_block(const Mat& map, const Mat& feats, const Mat& pos, const ContextBlockWeights<Tensor>& w,
                    std::size_t heads) {
    const std::size_t L = map.size(), D = pos[0].size(), hd = D / heads;
    Mat e(L, std::vector<double>(D));
    for (std::size_t r = 0; r < L; ++r)
        for (std::size_t c = 0; c < D; ++c) e[r][c] = map[r][0] * w.embed_w.at(0, c) + w.embed_b.at(0, c) + pos[r][c];
    const Mat q = mul(layer_norm(e, w.norm_q.gain, w.norm_q.bias), to_mat(w.attn.wq));
    const Mat kvn = layer_norm(feats, w.norm_kv.gain, w.norm_kv.bias);
    const Mat k = mul(kvn, to_mat(w.attn.wk)), v = mul(kvn, to_mat(w.attn.wv));
    Mat att(L, std::vector<double>(D, 0.0));
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t r = 0; r < L; ++r) {
            std::vector<double> logits(k.size());
            double mx = -1e300;
            for (std::size_t j = 0; j < k.size(); ++j) {
                double s = 0;
                for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) s += q[r][c] * k[j][c];
                logits[j] = s / std::sqrt(static_cast<double>(hd));
                mx = std::max(mx, logits[j]);
            }
            double z = 0;
            for (double& l : logits) z += (l = std::exp(l - mx));
            for (std::size_t j = 0; j < k.size(); ++j)
                for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) att[r][c] += logits[j] / z * v[j][c];
        }
    const Mat proj = mul(att, to_mat(w.attn.wo));
    for (std::size_t r = 0; r < L; ++r)
        for (std::size_t c = 0; c < D; ++c) e[r][c] += proj[r][c];
    Mat hidden = mul(layer_norm(e, w.norm_ff.gain, w.norm_ff.bias), to_mat(w.ff.w1));
    for (auto& row : hidden)
        for (std::size_t c = 0; c < row.size(); ++c) {
            const double x = row[c] + w.ff.b1.at(0, c);
            row[c] = 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
        }
    const Mat ff = mul(hidden, to_mat(w.ff.w2));
    for (std::size_t r = 0; r < L; ++r)
        for (std::size_t c = 0; c < D; ++c) e[r][c] += ff[r][c] + w.ff.b2.at(0, c);
    const Mat delta = mul(e, to_mat(w.head_w));
    Mat out(L, std::vector<double>(1));
    for (std::size_t r = 0; r < L; ++r) out[r][0] = std::clamp(map[r][0] + delta[r][0] + w.head_b.at(0, 0), 0.0, 1.0);
    return out;
}

}  // namespace

TEST_SUITE("attention") {
    TEST_CASE("cross_attn_map examples") {
        Rng rng(31);
        const Tensor z = randn(rng, 6, 4), wq = randn(rng, 4, 4), wk = randn(rng, 4, 4);
        const CrossAttnMap one = cross_attn_map(z, randn(rng, 1, 4), wq, wk);
        for (float v : one.map.data()) CHECK(v == doctest::Approx(1.0));

        const CrossAttnMap flat = cross_attn_map(z, randn(rng, 5, 4), Tensor::matrix(4, 4), wk);
        for (float v : flat.map.data()) CHECK(v == doctest::Approx(0.2));

        // 2×2 hand case: wq = wk = I, so logits are z·condᵀ / √2.
        const Tensor z2({2, 2}, std::vector<float>{1, 0, 0, 2});
        const Tensor c2({2, 2}, std::vector<float>{1, 0, 0, 1});
        const Tensor eye({2, 2}, std::vector<float>{1, 0, 0, 1});
        const Tensor m = cross_attn_map(z2, c2, eye, eye).map;
        const double s = 1 / std::sqrt(2.0);
        CHECK(m.at(0, 0) == doctest::Approx(std::exp(s) / (std::exp(s) + 1)));
        CHECK(m.at(1, 1) == doctest::Approx(std::exp(2 * s) / (std::exp(2 * s) + 1)));

        const CrossAttnMap any = cross_attn_map(z, randn(rng, 7, 4), wq, wk);
        for (std::size_t r = 0; r < any.map.rows(); ++r) {
            double sum = 0;
            for (std::size_t c = 0; c < any.map.cols(); ++c) sum += any.map.at(r, c);
            CHECK(std::abs(sum - 1) < 1e-6);
        }
    }

    TEST_CASE("aggregate_global_maps examples") {
        Rng rng(32);
        Tensor m = Tensor::matrix(9, 5);
        for (auto& v : m.data()) v = static_cast<float>(rng.uniform());
        const GlobalContextMap one = aggregate_global_maps({{m, 0}}, {{2, 1}}, 3, 3);
        Tensor col = Tensor::matrix(9, 1);
        for (std::size_t r = 0; r < 9; ++r) col.at(r, 0) = m.at(r, 2);
        CHECK(max_abs_diff(one.maps[0].reshaped({9, 1}), minmax_norm(col)) <= 1e-6f);

        const GlobalContextMap two = aggregate_global_maps({{m, 0}, {m, 1}}, {{2, 1}}, 3, 3);
        CHECK(max_abs_diff(two.maps[0], one.maps[0]) <= 1e-6f);

        Tensor scaled = m;
        for (auto& v : scaled.data()) v *= 3.5f;
        const GlobalContextMap sc = aggregate_global_maps({{scaled, 0}}, {{1, 3}}, 3, 3);
        const GlobalContextMap base = aggregate_global_maps({{m, 0}}, {{1, 3}}, 3, 3);
        CHECK(max_abs_diff(sc.maps[0], base.maps[0]) <= 1e-6f);

        Tensor hot = Tensor::matrix(9, 4, 0.01f);
        for (std::size_t r : {0u, 1u, 3u}) hot.at(r, 1) = hot.at(r, 2) = 0.9f;
        const Tensor region = aggregate_global_maps({{hot, 0}}, {{1, 2}}, 3, 3).maps[0];
        for (std::size_t p = 0; p < 9; ++p) CHECK(region[p] == ((p == 0 || p == 1 || p == 3) ? 1.0f : 0.0f));

        const Tensor empty = aggregate_global_maps({{m, 0}}, {{3, 0}}, 3, 3).maps[0];
        CHECK(max_abs(empty) == 0.0f);
    }

    TEST_CASE("refine_context examples") {
        Rng rng(33);
        GlobalContextMap init;
        Tensor m({4, 4});
        for (auto& v : m.data()) v = static_cast<float>(rng.uniform(0.1, 0.9));
        init.maps = {m};
        const Tensor feats = randn(rng, 16, 8);

        const GlobalContextMap none = refine_context(init, feats, ContextAwareLayerParams::create(0, 8, 2, rng));
        CHECK(none.maps[0].bit_equal(m));

        const auto zero_head = ContextAwareLayerParams::create(2, 8, 2, rng);
        CHECK(max_abs_diff(refine_context(init, feats, zero_head).maps[0], m) == 0.0f);

        auto one = ContextAwareLayerParams::create(1, 8, 2, rng);
        one.blocks[0].head_w = randn(rng, 8, 1, 0.05);
        one.blocks[0].head_b = Tensor({1, 1}, 0.02f);
        const Tensor got = refine_context(init, feats, one).maps[0];
        const Mat ref = reference_block(to_mat(m.reshaped({16, 1})), to_mat(feats),
                                        to_mat(positional_embedding<float>(4, 4, 8)), one.blocks[0], 2);
        for (std::size_t p = 0; p < 16; ++p) CHECK(got[p] == doctest::Approx(ref[p][0]).epsilon(1e-4));
        CHECK(max_abs_diff(got, m) > 0.0f);
    }

    TEST_CASE("context_loss examples") {
        GlobalContextMap maps;
        Tensor a({3, 3});
        a.at(0, 0) = a.at(1, 1) = a.at(2, 2) = a.at(0, 2) = 1;
        maps.maps = {a};
        CHECK(context_loss(maps, {a}) == 0.0f);

        maps.maps = {Tensor({3, 3})};
        CHECK(context_loss(maps, {a}) == doctest::Approx(2.0));

        maps.maps = {Tensor({3, 3}), Tensor({3, 3})};
        CHECK(context_loss(maps, {a, a}) == doctest::Approx(4.0));
        CHECK_THROWS_AS(context_loss(maps, {a}), ShapeError);
    }

    TEST_CASE("layout_loss examples") {
        Rng rng(34);
        Tensor g1({3, 3}), g2({3, 3});
        for (auto& v : g1.data()) v = static_cast<float>(rng.uniform());
        for (auto& v : g2.data()) v = static_cast<float>(rng.uniform());
        GlobalContextMap gm;
        gm.maps = {g1, g2};
        CHECK(layout_loss(gm, {g1, g2}) == 0.0f);

        Tensor d = g1;
        d.at(1, 2) += 0.3f;
        gm.maps = {g1};
        CHECK(layout_loss(gm, {d}) == doctest::Approx(0.3).epsilon(1e-5));

        Tensor f1 = g2, f2 = g1;
        gm.maps = {g1, g2};
        GlobalContextMap swapped;
        swapped.maps = {g2, g1};
        CHECK(layout_loss(gm, {f2, f1}) == doctest::Approx(layout_loss(swapped, {f1, f2})));
        CHECK_THROWS_AS(layout_loss(gm, {g1}), ShapeError);
    }

    TEST_CASE("inject_global examples") {
        Rng rng(35);
        const Tensor fg = randn(rng, 4, 3), gl = randn(rng, 4, 3);
        CHECK(inject_global(fg, gl, Tensor({2, 2}, 1.0f), 900, 850).bit_equal(gl));
        CHECK(inject_global(fg, gl, Tensor({2, 2}, 0.0f), 900, 850).bit_equal(fg));
        const Tensor half = inject_global(fg, gl, Tensor({2, 2}, 0.5f), 850, 850);
        for (std::size_t i = 0; i < half.size(); ++i) CHECK(half[i] == doctest::Approx(0.5 * (fg[i] + gl[i])));
        CHECK(inject_global(fg, gl, Tensor({2, 2}, 1.0f), 849, 850).bit_equal(fg));
    }

    TEST_CASE("layer_shared_attention examples") {
        Rng rng(36);
        const AttentionWeights<Tensor> w{randn(rng, 4, 4, 0.5), randn(rng, 4, 4, 0.5), randn(rng, 4, 4, 0.5),
                                         randn(rng, 4, 4, 0.5)};
        auto plain = [&](const Tensor& x) {
            return matmul(attention(matmul(x, w.wq), matmul(x, w.wk), matmul(x, w.wv)), w.wo);
        };
        const Tensor x = randn(rng, 5, 4);
        const LatentBatch single = layer_shared_attention({{x}, 0}, w, 1, MaskMode::none);
        CHECK(max_abs_diff(single.layers[0], plain(x)) <= 1e-6f);

        const LatentBatch dup = layer_shared_attention({{x, x}, 0}, w, 1, MaskMode::none);
        CHECK(max_abs_diff(dup.layers[0], plain(x)) <= 1e-6f);
        CHECK(max_abs_diff(dup.layers[1], plain(x)) <= 1e-6f);

        const Tensor bg = randn(rng, 5, 4), fg = randn(rng, 5, 4), gl = randn(rng, 5, 4);
        const LatentBatch a = layer_shared_attention({{bg, fg, gl}, 0}, w, 2, MaskMode::global_only);
        for (int trial = 0; trial < 10; ++trial) {
            const LatentBatch b =
                layer_shared_attention({{randn(rng, 5, 4), randn(rng, 5, 4), gl}, 0}, w, 2, MaskMode::global_only);
            CHECK(max_abs_diff(a.layers[2], b.layers[2]) <= 1e-6f);
        }
    }
}
