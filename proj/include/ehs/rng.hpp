#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace ehs {

// Deterministic 64-bit generator (splitmix64 core). The standard library
// engines are portable but its distributions are not, so all draws are
// derived here from raw bits. Identical seed => identical sequence on any
// platform.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be > 0.
    uint64_t below(uint64_t n) {
        // 128-bit multiply trick; bias is < 2^-64 per draw, fine for this use.
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller, one spare cached.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double gaussian(double mean, double std) { return mean + std * gaussian(); }

    // Independent child stream; tag keeps streams for different purposes
    // from colliding even with related seeds.
    Rng fork(uint64_t tag) {
        Rng r(next_u64() ^ (0xA0761D6478BD642FULL * (tag + 1)));
        return r;
    }

    // Derive a stream from a seed and a purpose label without consuming
    // state. fnv1a over the label keeps it stable across builds.
    static Rng derive(uint64_t seed, const std::string& purpose) {
        uint64_t h = 0xCBF29CE484222325ULL;
        for (char c : purpose) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001B3ULL;
        }
        Rng mix(seed ^ h);
        mix.next_u64();
        return Rng(mix.next_u64());
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace ehs
