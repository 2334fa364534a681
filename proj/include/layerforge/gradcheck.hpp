#pragma once

#include <functional>
#include <span>
#include <vector>

namespace layerforge {

/// Evaluates f(x); when `grad` is non-empty it also receives ∂f/∂x.
using GradFunction = std::function<double(std::span<const double> x, std::span<double> grad)>;

using ScalarFunction = std::function<double(std::span<const double> x)>;

/// Several scalars sharing one evaluation (e.g. the three training losses).
using MultiFunction = std::function<std::vector<double>(std::span<const double> x)>;

/// Fourth-order central difference, [-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)] / 12h.
/// Throws EvaluationError if any evaluation is non-finite.
std::vector<double> central_difference(const ScalarFunction& f, std::span<const double> x, double eps);

/// central_difference for every output of f; result[o][i] = ∂f_o/∂x_i.
std::vector<std::vector<double>> central_difference(const MultiFunction& f, std::span<const double> x, double eps);

/// max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-12)
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric);

/// Compares f's analytic gradient against central differences at x.
double grad_check(const GradFunction& f, std::span<const double> x, double eps);

}  // namespace layerforge
