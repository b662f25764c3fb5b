#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace lumix {

/**
 * Counter-based generator: output i of a stream is mix(key + i * gamma),
 * with the splitmix64 finalizer as the mixer. Streams are derived from a
 * parent key and a label, so independent consumers (data, noise, timesteps,
 * init) never share draws and do not depend on each other's call counts.
 */
class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc908ULL)) {}

    /// Child stream identified by an integer label.
    Rng split(std::uint64_t label) const { return Rng(key_, mix(key_ ^ mix(label + 0x9e3779b97f4a7c15ULL))); }
    /// Child stream identified by a string label (FNV-1a hashed).
    Rng split(std::string_view label) const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : label) h = (h ^ c) * 0x100000001b3ULL;
        return split(h);
    }

    std::uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    /// Standard normal via Box-Muller (one value per call).
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t key() const noexcept { return key_; }

private:
    Rng(std::uint64_t /*parent*/, std::uint64_t key) : key_(key) {}

    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace lumix
