#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "layerforge/tensor.hpp"

namespace layerforge {

/// Counter-based generator: the n-th draw of a stream is a pure function of
/// (key, n), so streams can be split without sharing state and results do
/// not depend on the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) : key_(mix(seed ^ mix(stream + 0x632be59bd9b4e019ULL))) {}

    /// Independent child stream.
    Rng split(std::uint64_t stream) const { return Rng(key_, stream + 1); }

    std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }

    /// Standard normal via Box-Muller (one value per two uniforms).
    double normal() {
        double u1 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <typename T = float>
    BasicTensor<T> normal_tensor(Shape shape, double stddev = 1.0) {
        BasicTensor<T> out(std::move(shape));
        for (auto& x : out.storage()) x = static_cast<T>(stddev * normal());
        return out;
    }

    template <typename T = float>
    BasicTensor<T> uniform_tensor(Shape shape, double lo, double hi) {
        BasicTensor<T> out(std::move(shape));
        for (auto& x : out.storage()) x = static_cast<T>(uniform(lo, hi));
        return out;
    }

    std::uint64_t counter() const { return counter_; }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace layerforge
