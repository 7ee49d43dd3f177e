#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace cdt {

// Deterministic splitmix64 stream. Self-contained so results do not depend on
// the standard library's distribution implementations.
class RngStream {
  public:
    explicit RngStream(std::uint64_t seed) : state_(seed) {}

    std::uint64_t u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = ~0ULL - (~0ULL % n);
        std::uint64_t x;
        do {
            x = u64();
        } while (x >= limit);
        return x % n;
    }

    // Box-Muller without caching the second variate, so the stream position
    // is a simple function of the number of calls.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    // Independent child stream; (seed, salt) fully determines it.
    RngStream fork(std::uint64_t salt) const {
        RngStream mix(state_ ^ (0xD1B54A32D192ED03ULL * (salt + 1)));
        return RngStream(mix.u64());
    }

    RngStream fork(std::string_view tag) const { return fork(hash_tag(tag)); }

    static std::uint64_t hash_tag(std::string_view tag) {
        std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
        for (const char c : tag) {
            h ^= static_cast<std::uint8_t>(c);
            h *= 0x100000001B3ULL;
        }
        return h;
    }

  private:
    std::uint64_t state_;
};

// Fisher-Yates shuffle driven by an RngStream.
template <typename Vec>
void shuffle(Vec& v, RngStream& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace cdt
