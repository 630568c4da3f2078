#pragma once

#include <cstdint>

namespace emolora {

// Counter-based generator. Output i of a stream with key K is
//   mix64(K + GOLDEN * i), i = 1, 2, ...
// where mix64 is the SplitMix64 finalizer. split(s) derives an independent
// stream keyed by mix64(K ^ mix64(s + 1)). Everything is integer arithmetic,
// so streams are identical on every platform; only normal() depends on libm
// (log, sqrt, cos).
class Rng {
public:
    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

    explicit Rng(std::uint64_t seed = 0) : key_(mix64(seed)), counter_(0) {}

    static std::uint64_t mix64(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() { return mix64(key_ + kGolden * ++counter_); }

    // Uniform in [0, 1) with 24 random bits.
    float uniform_float() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }
    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Uniform integer in [0, n). Multiply-shift on the high 32 bits; the bias
    // is below 2^-32 * n and irrelevant for the sizes used here.
    std::uint32_t below(std::uint32_t n) {
        return static_cast<std::uint32_t>(((next_u64() >> 32) * static_cast<std::uint64_t>(n)) >> 32);
    }
    // Standard normal via Box-Muller, one variate per two draws.
    double normal();

    Rng split(std::uint64_t stream) const;

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

private:
    Rng(std::uint64_t key, std::uint64_t counter, bool) : key_(key), counter_(counter) {}

    std::uint64_t key_;
    std::uint64_t counter_;
};

} // namespace emolora
