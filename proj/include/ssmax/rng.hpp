#pragma once

#include <cmath>
#include <cstdint>

namespace ssx {

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Mixes an arbitrary number of keys into one stream seed. Used to derive
// independent substreams, e.g. from (seed, step, slot) or (seed, size, depth,
// trial), so parallel evaluation order never changes results.
inline uint64_t mix_seed(uint64_t a, uint64_t b = 0, uint64_t c = 0, uint64_t d = 0) {
    uint64_t x = a;
    uint64_t h = splitmix64(x);
    x ^= b + 0x632be59bd9b4e019ULL;
    h ^= splitmix64(x);
    x ^= c + 0x9e6c63d0876a9f77ULL;
    h ^= splitmix64(x);
    x ^= d + 0xc2b2ae3d27d4eb4fULL;
    h ^= splitmix64(x);
    return h;
}

// xoshiro256** with explicit distributions, so streams are reproducible
// independent of the standard library implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
        has_spare_ = false;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

    int range(int lo, int hi) { return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo))); }

    // Box-Muller
    double gauss(double mean = 0.0, double stddev = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + spare_ * stddev;
        }
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return mean + r * std::cos(a) * stddev;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4];
    double spare_ = 0.0;
    bool has_spare_;
};

}  // namespace ssx
