#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mdt {

// Deterministic RNG built on mt19937_64 with hand-rolled transforms, so that
// draws are reproducible regardless of standard-library distribution
// implementations. Every consumer takes an Rng& explicitly; independent
// streams are derived with Rng::derive so consumption order in one stream
// never perturbs another.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller. Two uniforms per draw, no cached spare,
    // so the draw count per call is fixed.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Uniform index in [0, n).
    size_t index(size_t n) {
        return static_cast<size_t>(uniform() * static_cast<double>(n)) % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // splitmix64-style mixing, used to derive independent child streams from
    // (seed, label...) tuples.
    static uint64_t mix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    static uint64_t derive(uint64_t seed, uint64_t a, uint64_t b = 0) {
        return mix(mix(seed ^ 0x243f6a8885a308d3ull) + mix(a) + 3 * mix(b));
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace mdt
