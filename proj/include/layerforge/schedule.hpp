#pragma once

#include <vector>

namespace layerforge {

/// Linear-β schedule. alpha_bar[0] = 1 is the clean latent; t runs 1..T.
struct NoiseSchedule {
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    std::vector<double> alpha_bar;

    static NoiseSchedule linear(int T = 1000, double beta_start = 1e-4, double beta_end = 2e-2);

    double abar(int t) const;

    /// round(i·T/steps) for i = steps..0, i.e. descending from T to 0.
    std::vector<int> ddim_timesteps(int steps) const;
};

}  // namespace layerforge
