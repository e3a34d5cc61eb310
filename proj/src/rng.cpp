#include "splatocc/rng.hpp"

#include <cmath>
#include <numbers>

namespace splatocc {

real Rng::normal() {
    // Guard the log against u1 == 0.
    real u1 = uniform();
    while (u1 <= real(0)) u1 = uniform();
    const real u2 = uniform();
    const real r = std::sqrt(real(-2) * std::log(u1));
    return r * std::cos(real(2) * std::numbers::pi_v<real> * u2);
}

std::size_t Rng::uniform_index(std::size_t n) {
    require(n > 0, "uniform_index: n must be positive");
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t span = n;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return std::size_t(v % span);
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = uniform_index(i);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

std::uint64_t Rng::fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (const char c : s) {
        h ^= std::uint64_t(static_cast<unsigned char>(c));
        h *= 0x100000001B3ull;
    }
    return h;
}

}  // namespace splatocc
