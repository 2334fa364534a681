#pragma once

// Built-in invariant suites behind `layerforge check`, plus the seeded
// fixture used to finite-difference the three training losses.

#include <cstdint>
#include <string>
#include <vector>

#include "layerforge/denoiser.hpp"

namespace layerforge {

struct CheckResult {
    std::string suite;
    std::string name;
    bool passed = false;
    std::string detail;
};

/// Deliberate bugs for mutation testing of the suites.
struct FaultInjection {
    bool irh_flipped_sign = false;  // Π(1 + α) instead of Π(1 - α) in the IRH blend
};

const std::vector<std::string>& check_suites();  // numerics ... pipeline

/// Runs one suite or "all". ValidationError for an unknown name.
std::vector<CheckResult> run_checks(const std::string& suite, const FaultInjection& faults = {});

// ---- loss-gradient fixture --------------------------------------------------------

/// ≤5k-parameter 64-bit denoiser with a random noisy sample.
struct GradFixture {
    Denoiser<double> model;
    NoisySample<double> sample;
    AttentionHooks hooks;
    std::uint64_t attempts = 0;  // redraws needed to clear the kink margins
};

ModelConfig grad_check_config();

/// Deterministic in `seed`. Zero-initialised heads and layer-assign rows are
/// randomised so every path carries gradient, and the draw is repeated until
/// every clamp input sits at least `clamp_margin` away from 0 and 1 and every
/// min-max input has its two smallest and two largest entries separated by at
/// least `gap_margin` of its range, so the losses are differentiable there.
GradFixture make_grad_fixture(std::uint64_t seed, double clamp_margin = 1e-2, double gap_margin = 1e-2);

struct LossGradientErrors {
    double noise = 0, context = 0, layout = 0;
    std::size_t parameters = 0;
    std::size_t refined = 0;  // entries re-differenced in extended precision
};

/// Entries whose 64-bit stencil disagrees with backprop by more than this
/// relative error are re-differenced in long double before the verdict.
inline constexpr double kRefineAbove = 1e-7;

/// Max relative error between 64-bit backprop and 4th-order central
/// differences for L_noise, L_c and L_layout, over all non-alpha-head
/// parameters.
LossGradientErrors check_loss_gradients(GradFixture& fixture, double eps = 1e-3);

}  // namespace layerforge
