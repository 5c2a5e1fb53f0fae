#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace sonogen {

// Deterministic RNG wrapper. std::mt19937 output is pinned by the standard;
// the float conversions below avoid std::uniform_real_distribution, whose
// exact sequence is implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(static_cast<std::uint32_t>(seed ^ (seed >> 32))) {}

    std::uint32_t next_u32() { return engine_(); }

    // Uniform in [0, 1) with 24 bits of mantissa.
    float uniform() { return static_cast<float>(engine_() >> 8) * (1.0f / 16777216.0f); }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint32_t below(std::uint32_t n) {
        // Rejection sampling keeps the draw unbiased.
        const std::uint32_t limit = UINT32_MAX - UINT32_MAX % n;
        std::uint32_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    // Box-Muller; consumes two draws per pair, caches the second.
    float normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        float u1 = 0.0f;
        while (u1 <= 1e-12f) u1 = uniform();
        const float u2 = uniform();
        const float r = std::sqrt(-2.0f * std::log(u1));
        const float theta = 6.2831853071795864f * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Derives an independent stream, e.g. per-sample from a master seed.
    static std::uint64_t derive(std::uint64_t master, std::uint64_t stream) {
        // splitmix64 finalizer over the combined key.
        std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937 engine_;
    bool has_spare_ = false;
    float spare_ = 0.0f;
};

}  // namespace sonogen
