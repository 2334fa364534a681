#include "layerforge/schedule.hpp"

#include <cmath>
#include <string>

#include "layerforge/errors.hpp"

namespace layerforge {

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
    if (T < 1) throw ValidationError("schedule needs T >= 1");
    if (!(beta_start > 0 && beta_end >= beta_start && beta_end < 1))
        throw ValidationError("schedule needs 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
    s.alpha_bar[0] = 1.0;
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double beta = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
        prod *= 1.0 - beta;
        s.alpha_bar[static_cast<std::size_t>(t)] = prod;
    }
    return s;
}

double NoiseSchedule::abar(int t) const {
    if (t < 0 || t > T) throw IndexError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    return alpha_bar[static_cast<std::size_t>(t)];
}

std::vector<int> NoiseSchedule::ddim_timesteps(int steps) const {
    if (steps < 1 || steps > T) throw ValidationError("DDIM step count must lie in [1, T]");
    std::vector<int> ts;
    for (int i = steps; i >= 0; --i)
        ts.push_back(static_cast<int>(std::lround(static_cast<double>(i) * T / steps)));
    return ts;
}

}  // namespace layerforge
