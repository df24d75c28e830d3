#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace deltashift {

// Portable seeded generator: mt19937_64 output is fixed by the standard, and the
// derived distributions below are written out so results do not depend on the
// standard library's distribution implementations.
class rng {
public:
    explicit rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // [0, n), multiply-shift reduction
    uint64_t below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<unsigned __int128>(engine_()) * n) >> 64);
    }

    // Box-Muller; the second variate is discarded to keep the stream simple
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::mt19937_64 engine_;
};

// Derives an independent stream seed from a parent seed and a label.
inline uint64_t derive_seed(uint64_t parent, uint64_t label) {
    uint64_t x = parent ^ (label * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL);
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

} // namespace deltashift
