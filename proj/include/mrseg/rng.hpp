#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace mrseg {

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 14695981039346656037ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

// Stable per-purpose stream derivation so that adding a consumer of
// randomness never shifts the draws of existing ones.
inline uint64_t derive_seed(uint64_t base, std::string_view purpose) {
    uint64_t h = fnv1a64(purpose.data(), purpose.size());
    h ^= base + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
}

// mt19937_64 with hand-rolled draw mappings. std::*_distribution call
// patterns vary between standard libraries; these do not.
struct Rng {
    std::mt19937_64 gen;

    explicit Rng(uint64_t seed) : gen(seed) {}

    // [0, 1)
    double uniform() { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(gen() % range);
    }

    // Box-Muller, two draws per call, no cached second value.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }
};

}  // namespace mrseg
