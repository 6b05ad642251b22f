#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "echolab/common.hpp"

namespace echolab {

// Deterministic counter-free generator (xoshiro-style splitmix core).
// Every random draw in the project flows from one of these, derived from a
// root seed plus a stream label, so worker scheduling can never reorder draws.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ull) {
        // warm up so that small seeds do not produce correlated first draws
        next_u64();
        next_u64();
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double uniform() {
        return (next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    // standard normal via Box-Muller (stdlib-independent for reproducibility)
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Stable child-seed derivation: hash of (seed, label, index).
inline uint64_t derive_seed(uint64_t seed, const std::string& label, uint64_t index = 0) {
    uint64_t h = fnv1a(&seed, sizeof(seed));
    h = fnv1a(label.data(), label.size(), h);
    h = fnv1a(&index, sizeof(index), h);
    return h;
}

inline Rng derive_rng(uint64_t seed, const std::string& label, uint64_t index = 0) {
    return Rng(derive_seed(seed, label, index));
}

}  // namespace echolab
