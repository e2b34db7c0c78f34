#pragma once

#include <cstdint>

namespace fg {

/// SplitMix64 generator.
///
///   state += 0x9E3779B97F4A7C15
///   z = state
///   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///   return z ^ (z >> 31)
///
/// Only integer arithmetic is involved, so a seed yields the same u64 stream
/// on every platform. Doubles take the top 53 bits.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double uniform();
    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);
    /// Standard normal via Box-Muller (the paired draw is cached).
    double normal();
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Deterministic child seed for an independent stream labelled `tag`.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace fg
