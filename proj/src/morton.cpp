#include "splatocc/morton.hpp"

#include <algorithm>
#include <cmath>

namespace splatocc {

namespace {

// Spread the low 21 bits of v so they occupy every third bit.
std::uint64_t part1by2(std::uint64_t v) {
    v &= 0x1fffff;
    v = (v | v << 32) & 0x1f00000000ffffull;
    v = (v | v << 16) & 0x1f0000ff0000ffull;
    v = (v | v << 8) & 0x100f00f00f00f00full;
    v = (v | v << 4) & 0x10c30c30c30c30c3ull;
    v = (v | v << 2) & 0x1249249249249249ull;
    return v;
}

std::uint32_t compact1by2(std::uint64_t v) {
    v &= 0x1249249249249249ull;
    v = (v ^ (v >> 2)) & 0x10c30c30c30c30c3ull;
    v = (v ^ (v >> 4)) & 0x100f00f00f00f00full;
    v = (v ^ (v >> 8)) & 0x1f0000ff0000ffull;
    v = (v ^ (v >> 16)) & 0x1f00000000ffffull;
    v = (v ^ (v >> 32)) & 0x1fffff;
    return std::uint32_t(v);
}

}  // namespace

std::uint64_t morton_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z,
                            unsigned bits) {
    require(bits >= 1 && bits <= 21, "morton_encode: bits must be in [1, 21]");
    const std::uint32_t mask = (1u << bits) - 1u;
    require(x <= mask && y <= mask && z <= mask, "morton_encode: cell out of range");
    return part1by2(x) | (part1by2(y) << 1) | (part1by2(z) << 2);
}

std::array<std::uint32_t, 3> morton_decode(std::uint64_t key, unsigned bits) {
    require(bits >= 1 && bits <= 21, "morton_decode: bits must be in [1, 21]");
    return {compact1by2(key), compact1by2(key >> 1), compact1by2(key >> 2)};
}

std::array<std::uint32_t, 3> quantize_cell(const OrderingCurve& curve, const real* p) {
    std::array<std::uint32_t, 3> cell{};
    const std::uint32_t last = (1u << curve.bits) - 1u;
    for (int a = 0; a < 3; ++a) {
        const real span = curve.hi[a] - curve.lo[a];
        require(span > real(0), "ordering curve: empty bounds");
        const real f = (p[a] - curve.lo[a]) / span * real(1u << curve.bits);
        const real fl = std::floor(f);
        cell[a] = fl < real(0)           ? 0u
                  : fl > real(last)      ? last
                                         : std::uint32_t(fl);
    }
    return cell;
}

std::vector<std::size_t> order_3d_to_1d(const GaussianSet& set,
                                        const OrderingCurve& curve) {
    const std::size_t n = set.size();
    std::vector<std::uint64_t> keys(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = quantize_cell(curve, set.means.row(i));
        keys[i] = morton_encode(c[0], c[1], c[2], curve.bits);
    }
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
        return keys[a] != keys[b] ? keys[a] < keys[b] : a < b;
    });
    return perm;
}

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t t = 0; t < perm.size(); ++t) inv[perm[t]] = t;
    return inv;
}

real mean_adjacent_chebyshev(const GaussianSet& set, const OrderingCurve& curve,
                             const std::vector<std::size_t>& order) {
    require(order.size() == set.size(), "locality statistic: order size mismatch");
    if (order.size() < 2) return real(0);
    real total = 0;
    auto cell_of = [&](std::size_t i) { return quantize_cell(curve, set.means.row(i)); };
    auto prev = cell_of(order[0]);
    for (std::size_t t = 1; t < order.size(); ++t) {
        const auto cur = cell_of(order[t]);
        std::uint32_t cheb = 0;
        for (int a = 0; a < 3; ++a) {
            const std::uint32_t d =
                cur[a] > prev[a] ? cur[a] - prev[a] : prev[a] - cur[a];
            cheb = std::max(cheb, d);
        }
        total += real(cheb);
        prev = cur;
    }
    return total / real(order.size() - 1);
}

}  // namespace splatocc
