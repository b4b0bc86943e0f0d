// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace dcmoe {

/// Counter-based RNG: output i of stream s under seed k is a pure function of
/// (k, s, i), so sequences are reproducible regardless of how work is split
/// across threads or processes.
class Rng {
  public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : seed_(seed), stream_(stream) {}

    /// Independent stream sharing the same seed.
    Rng split(std::uint64_t stream_id) const {
        return Rng(seed_, mix_(stream_ * 0x9E3779B97F4A7C15ULL + 1, stream_id));
    }

    std::uint64_t next_u64() { return mix_(seed_ ^ golden(stream_), counter_++); }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

    /// Standard normal via Box-Muller (one fresh pair per call, no caching,
    /// so the counter advances by exactly two each call).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t seed() const { return seed_; }

  private:
    static std::uint64_t golden(std::uint64_t s) {
        return s * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL;
    }
    // splitmix64-style finalizer over (key, counter)
    static std::uint64_t mix_(std::uint64_t key, std::uint64_t ctr) {
        std::uint64_t z = key + ctr * 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
};

}  // namespace dcmoe
