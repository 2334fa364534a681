#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "layerforge/errors.hpp"
#include "layerforge/gradcheck.hpp"
#include "layerforge/numerics.hpp"
#include "layerforge/random.hpp"

using namespace layerforge;

namespace {

Tensor row(std::vector<float> v) {
    const std::size_t n = v.size();
    return Tensor({1, n}, std::move(v));
}

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    Tensor m = Tensor::matrix(r, c);
    for (auto& x : m.data()) x = static_cast<float>(scale * rng.normal());
    return m;
}

}  // namespace

TEST_SUITE("numerics") {
    TEST_CASE("softmax_rows examples") {
        const Tensor u = softmax_rows(row({0, 0, 0}));
        for (std::size_t c = 0; c < 3; ++c) CHECK(u.at(0, c) == doctest::Approx(1.0 / 3).epsilon(1e-7));

        const Tensor two = softmax_rows(row({static_cast<float>(std::log(2.0)), 0}));
        CHECK(two.at(0, 0) == doctest::Approx(2.0 / 3).epsilon(1e-6));
        CHECK(two.at(0, 1) == doctest::Approx(1.0 / 3).epsilon(1e-6));

        const Tensor big = softmax_rows(row({1000, 0}));
        CHECK(std::abs(big.at(0, 0) - 1.0f) < 1e-6);
        CHECK(std::abs(big.at(0, 1)) < 1e-6);
    }

    TEST_CASE("softmax rows sum to one") {
        Rng rng(11);
        for (int trial = 0; trial < 50; ++trial) {
            const Tensor s = softmax_rows(random_matrix(7, 9, rng, 20.0));
            for (std::size_t r = 0; r < s.rows(); ++r) {
                double sum = 0;
                for (std::size_t c = 0; c < s.cols(); ++c) sum += s.at(r, c);
                CHECK(std::abs(sum - 1.0) < 1e-6);
            }
        }
    }

    TEST_CASE("minmax_norm examples") {
        const Tensor a = minmax_norm(row({2, 4, 6}));
        CHECK(a.at(0, 0) == 0.0f);
        CHECK(a.at(0, 1) == doctest::Approx(0.5));
        CHECK(a.at(0, 2) == 1.0f);

        const Tensor c = minmax_norm(row({5, 5}));
        CHECK(c.at(0, 0) == 0.0f);
        CHECK(c.at(0, 1) == 0.0f);

        const Tensor id = minmax_norm(row({0, 1}));
        CHECK(id.at(0, 0) == 0.0f);
        CHECK(id.at(0, 1) == 1.0f);
    }

    TEST_CASE("minmax_norm is idempotent") {
        Rng rng(12);
        for (int trial = 0; trial < 20; ++trial) {
            const Tensor once = minmax_norm(random_matrix(5, 6, rng));
            CHECK(max_abs_diff(minmax_norm(once), once) <= 1e-7f);
        }
    }

    TEST_CASE("resize_bilinear examples") {
        const Tensor k = resize_bilinear(Tensor::matrix(4, 4, 0.7f), 2, 2);
        for (float v : k.data()) CHECK(v == doctest::Approx(0.7f));

        Rng rng(13);
        const Tensor m = random_matrix(5, 3, rng);
        CHECK(resize_bilinear(m, 5, 3).bit_equal(m));

        const Tensor up = resize_bilinear(Tensor({2, 1}, std::vector<float>{0, 1}), 4, 1);
        CHECK(up.at(0, 0) == doctest::Approx(0.0));
        CHECK(up.at(1, 0) == doctest::Approx(1.0 / 3));
        CHECK(up.at(2, 0) == doctest::Approx(2.0 / 3));
        CHECK(up.at(3, 0) == doctest::Approx(1.0));

        CHECK_THROWS_AS(resize_bilinear(m, 0, 3), ShapeError);
    }

    TEST_CASE("attention examples") {
        Rng rng(14);
        const Tensor q = random_matrix(3, 4, rng);
        const Tensor k = random_matrix(1, 4, rng);
        const Tensor v = random_matrix(1, 4, rng);
        const Tensor single = attention(q, k, v);
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t c = 0; c < 4; ++c) CHECK(single.at(r, c) == doctest::Approx(v.at(0, c)));

        const Tensor k3 = random_matrix(3, 4, rng);
        const Tensor v3 = random_matrix(3, 4, rng);
        const float inf = std::numeric_limits<float>::infinity();
        Tensor mask = Tensor::matrix(3, 3, -inf);
        for (std::size_t r = 0; r < 3; ++r) mask.at(r, 2) = 0;
        const Tensor sel = attention(q, k3, v3, &mask);
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t c = 0; c < 4; ++c) CHECK(sel.at(r, c) == doctest::Approx(v3.at(2, c)));

        // q = k = v = I with d = 1 per column pair: row 0 attends softmax([1, 0]).
        const Tensor eye({2, 2}, std::vector<float>{1, 0, 0, 1});
        const Tensor out = attention(eye, eye, eye);
        const double s = 1.0 / std::sqrt(2.0);
        const double w = std::exp(s) / (std::exp(s) + 1.0);
        CHECK(out.at(0, 0) == doctest::Approx(w));
        CHECK(out.at(0, 1) == doctest::Approx(1 - w));
        CHECK(out.at(1, 1) == doctest::Approx(w));
    }

    TEST_CASE("attention with zero mask equals unmasked") {
        Rng rng(15);
        const Tensor q = random_matrix(4, 3, rng), k = random_matrix(5, 3, rng), v = random_matrix(5, 3, rng);
        const Tensor zero = Tensor::matrix(4, 5);
        CHECK(attention(q, k, v, &zero).bit_equal(attention(q, k, v)));
    }

    TEST_CASE("fully masked query row is a degenerate-mask error") {
        Rng rng(16);
        const Tensor q = random_matrix(2, 3, rng), k = random_matrix(2, 3, rng), v = random_matrix(2, 3, rng);
        Tensor mask = Tensor::matrix(2, 2);
        mask.at(1, 0) = mask.at(1, 1) = -std::numeric_limits<float>::infinity();
        CHECK_THROWS_AS(attention(q, k, v, &mask), DegenerateMaskError);
    }

    TEST_CASE("grad_check examples") {
        const GradFunction square = [](std::span<const double> x, std::span<double> g) {
            if (!g.empty()) g[0] = 2 * x[0];
            return x[0] * x[0];
        };
        const std::vector<double> three{3.0};
        CHECK(grad_check(square, three, 1e-4) < 1e-9);

        const GradFunction softmax_sum = [](std::span<const double> x, std::span<double> g) {
            double z = 0;
            for (double v : x) z += std::exp(v);
            double s = 0;
            for (double v : x) s += std::exp(v) / z;
            for (auto& d : g) d = 0;
            return s;
        };
        const std::vector<double> xs{0.3, -1.2, 2.0};
        const auto fd = central_difference([&](std::span<const double> x) { return softmax_sum(x, {}); }, xs, 1e-4);
        for (double d : fd) CHECK(std::abs(d) < 1e-9);

        const ScalarFunction bad = [](std::span<const double>) { return std::nan(""); };
        CHECK_THROWS_AS(central_difference(bad, three, 1e-4), EvaluationError);
    }

    TEST_CASE("grad_check on a 4-parameter linear denoiser") {
        // L(w) = mean((eps - (w0 z0 + w1 z1 + w2 z2 + w3))²) over fixed draws.
        Rng rng(17);
        std::vector<std::array<double, 4>> rows;
        for (int i = 0; i < 16; ++i) rows.push_back({rng.normal(), rng.normal(), rng.normal(), rng.normal()});
        const GradFunction loss = [&](std::span<const double> w, std::span<double> g) {
            double total = 0;
            if (!g.empty()) std::fill(g.begin(), g.end(), 0.0);
            for (const auto& r : rows) {
                const double pred = w[0] * r[0] + w[1] * r[1] + w[2] * r[2] + w[3];
                const double e = r[3] - pred;
                total += e * e / rows.size();
                if (!g.empty()) {
                    for (int j = 0; j < 3; ++j) g[j] += -2 * e * r[j] / rows.size();
                    g[3] += -2 * e / rows.size();
                }
            }
            return total;
        };
        const std::vector<double> w{0.1, -0.4, 0.7, 0.2};
        CHECK(grad_check(loss, w, 1e-4) < 1e-6);
    }
}
