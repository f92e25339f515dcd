#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace fec {

// Seeded RNG with hand-rolled distributions so that streams are identical
// across standard library implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double next_double() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Box-Muller; caches the second draw.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n). n must be positive.
    std::int64_t below(std::int64_t n) {
        return static_cast<std::int64_t>(next_double() * static_cast<double>(n));
    }

    template <typename It>
    void shuffle(It first, It last) {
        const std::int64_t n = last - first;
        for (std::int64_t i = n - 1; i > 0; --i) {
            std::swap(first[i], first[below(i + 1)]);
        }
    }

  private:
    std::mt19937_64 gen_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace fec
