#include "layerforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "layerforge/errors.hpp"

namespace layerforge {

namespace {

double checked(double v) {
    if (!std::isfinite(v)) throw EvaluationError("gradient check: non-finite function value");
    return v;
}

}  // namespace

std::vector<double> central_difference(const ScalarFunction& f, std::span<const double> x, double eps) {
    MultiFunction wrapped = [&f](std::span<const double> p) { return std::vector<double>{f(p)}; };
    return central_difference(wrapped, x, eps).front();
}

std::vector<std::vector<double>> central_difference(const MultiFunction& f, std::span<const double> x,
                                                    double eps) {
    if (!(eps > 0.0)) throw EvaluationError("gradient check: eps must be positive");
    std::vector<double> p(x.begin(), x.end());
    std::vector<std::vector<double>> out;
    auto eval = [&](std::size_t i, double offset) {
        p[i] = x[i] + offset;
        auto values = f(p);
        for (double v : values) checked(v);
        return values;
    };
    for (std::size_t i = 0; i < x.size(); ++i) {
        const auto fp2 = eval(i, 2 * eps);
        const auto fp1 = eval(i, eps);
        const auto fm1 = eval(i, -eps);
        const auto fm2 = eval(i, -2 * eps);
        p[i] = x[i];
        if (out.empty()) out.assign(fp1.size(), std::vector<double>(x.size()));
        for (std::size_t o = 0; o < fp1.size(); ++o) {
            out[o][i] = ((fm2[o] - fp2[o]) + 8.0 * (fp1[o] - fm1[o])) / (12.0 * eps);
        }
    }
    if (out.empty()) out.assign(f(p).size(), {});
    return out;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
    if (analytic.size() != numeric.size()) throw EvaluationError("gradient check: size mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], n = numeric[i];
        const double denom = std::max({std::abs(a), std::abs(n), 1e-12});
        worst = std::max(worst, std::abs(a - n) / denom);
    }
    return worst;
}

double grad_check(const GradFunction& f, std::span<const double> x, double eps) {
    std::vector<double> analytic(x.size());
    checked(f(x, analytic));
    for (double g : analytic) checked(g);
    const ScalarFunction value_only = [&f](std::span<const double> p) { return f(p, {}); };
    const auto numeric = central_difference(value_only, x, eps);
    return max_relative_error(analytic, numeric);
}

}  // namespace layerforge
