#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "splatocc/common.hpp"

namespace splatocc {

// Counter-based splittable PRNG (splitmix64 increments over a 64-bit
// counter). The stream depends only on (seed, call sequence), so identical
// seeds reproduce identical streams on every platform. fork() derives an
// independent stream without disturbing the parent.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(mix(seed ^ kInit)) {}

    std::uint64_t next_u64() {
        state_ += kGamma;
        return mix(state_);
    }

    // Uniform in [0, 1) with 53 random bits.
    real uniform() { return real(double(next_u64() >> 11) * 0x1.0p-53); }

    real uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, one variate per call (the sine partner is discarded so the
    // call sequence stays position-independent).
    real normal();

    // Uniform integer in [0, n).
    std::size_t uniform_index(std::size_t n);

    bool bernoulli(real p) { return uniform() < p; }

    // Independent child stream; the parent state is not advanced.
    Rng fork(std::uint64_t stream) const { return Rng(mix(state_ ^ mix(stream ^ kFork))); }
    Rng fork(std::string_view tag) const { return fork(fnv1a(tag)); }

    // Fisher-Yates permutation of [0, n).
    std::vector<std::size_t> permutation(std::size_t n);

    std::uint64_t state() const { return state_; }

    // Rebuilds a stream from a previously captured state(), so a restored
    // run continues with exactly the draws the saved run would have made.
    static Rng from_state(std::uint64_t raw) {
        Rng r(0);
        r.state_ = raw;
        return r;
    }

    static std::uint64_t fnv1a(std::string_view s);

private:
    static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;
    static constexpr std::uint64_t kInit = 0x243F6A8885A308D3ull;
    static constexpr std::uint64_t kFork = 0x452821E638D01377ull;

    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ull;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t state_;
};

}  // namespace splatocc
