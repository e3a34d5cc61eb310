#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "splatocc/gaussian.hpp"

namespace splatocc {

// Z-order (Morton) curve over quantized mean coordinates. Keys interleave
// bits x-lowest: cell (1,0,0) -> 1, (0,1,0) -> 2, (0,0,1) -> 4.
struct OrderingCurve {
    std::array<real, 3> lo{0, 0, 0};  // scene bounds used for quantization
    std::array<real, 3> hi{1, 1, 1};
    unsigned bits = 6;  // cells per axis = 2^bits
};

std::uint64_t morton_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z,
                            unsigned bits);
std::array<std::uint32_t, 3> morton_decode(std::uint64_t key, unsigned bits);

// Per-axis cell index of a position; out-of-bounds positions clamp to the
// boundary cells so the ordering stays total.
std::array<std::uint32_t, 3> quantize_cell(const OrderingCurve& curve, const real* p);

// Sequence order: perm[t] is the index of the Gaussian at sequence slot t.
// Stable sort by Morton key, ties broken by original index.
std::vector<std::size_t> order_3d_to_1d(const GaussianSet& set,
                                        const OrderingCurve& curve);

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm);

// Mean Chebyshev distance between quantized cells of sequence-adjacent
// Gaussians — the locality statistic the curve is expected to shrink
// relative to a random order.
real mean_adjacent_chebyshev(const GaussianSet& set, const OrderingCurve& curve,
                             const std::vector<std::size_t>& order);

}  // namespace splatocc
