#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace capmod {

// Counter-based 64-bit PRNG (splitmix64). Every random draw in the project
// goes through this generator so that a run is a pure function of its seed,
// independent of platform or standard-library distribution internals.
class SplitMix64 {
  public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Box-Muller. Draws two uniforms per call; no cached spare, so the
    // stream position is a simple function of the call count.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586477 * u2);
    }

    // Unbiased-enough integer in [0, n) via 128-bit multiply-shift.
    std::uint64_t next_below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    bool bernoulli(double p) { return next_double() < p; }

  private:
    std::uint64_t state_;
};

// FNV-1a, used to derive named substreams and to fingerprint vocabularies.
inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Independent per-purpose stream: fold a label into the run seed so that
// adding one consumer does not shift every other consumer's draws.
inline SplitMix64 substream(std::uint64_t seed, std::string_view label) {
    std::uint64_t h = fnv1a64(label);
    return SplitMix64(seed ^ (h | 1ULL));
}

}  // namespace capmod
