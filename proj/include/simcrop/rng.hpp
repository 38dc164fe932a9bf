#pragma once

// PCG32 (XSH-RR 64/32), O'Neill 2014. Integer draws are platform independent; normal() goes
// through libm (log, cos) and so is only guaranteed identical for a fixed toolchain.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace simcrop {

class Rng {
public:
    struct State {
        std::uint64_t state = 0;
        std::uint64_t inc = 0;
        bool operator==(const State&) const = default;
    };

    explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0) { reseed(seed, stream); }

    void reseed(std::uint64_t seed, std::uint64_t stream) {
        s_.state = 0;
        s_.inc = (stream << 1u) | 1u;
        next_u32();
        s_.state += seed;
        next_u32();
    }

    std::uint32_t next_u32() {
        std::uint64_t old = s_.state;
        s_.state = old * 6364136223846793005ULL + s_.inc;
        auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        auto rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    /// 53-bit uniform in [0, 1).
    double uniform() {
        std::uint64_t hi = next_u32() >> 5;  // 27 bits
        std::uint64_t lo = next_u32() >> 6;  // 26 bits
        return static_cast<double>((hi << 26) | lo) * 0x1.0p-53;
    }

    /// Unbiased integer in [0, bound).
    std::uint32_t below(std::uint32_t bound) {
        if (bound <= 1) return 0;
        std::uint32_t threshold = (0u - bound) % bound;
        for (;;) {
            std::uint32_t r = next_u32();
            if (r >= threshold) return r % bound;
        }
    }

    /// Standard normal via Box-Muller (one value per call, no caching so state stays simple).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    State state() const { return s_; }
    void set_state(State s) { s_ = s; }

private:
    State s_;
};

inline std::vector<double> rng_uniform(Rng& rng, std::size_t n) {
    std::vector<double> out(n);
    for (auto& v : out) v = rng.uniform();
    return out;
}

/// Fisher-Yates shuffle driven by Rng (std::shuffle is implementation-defined).
template <class Vec>
void shuffle(Vec& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = rng.below(static_cast<std::uint32_t>(i));
        std::swap(v[i - 1], v[j]);
    }
}

} // namespace simcrop
