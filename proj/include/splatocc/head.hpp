#pragma once

#include <vector>

#include "splatocc/gaussian.hpp"
#include "splatocc/morton.hpp"
#include "splatocc/scan.hpp"

namespace splatocc {

// ---------------------------------------------------------------------------
// Global Gaussian refinement: sinusoidal position encoding, Z-order
// sequencing, a stack of state-space blocks, and a linear head that predicts
// per-primitive parameter deltas. Features pass through unchanged; all other
// fields are updated in their unconstrained storage (log scale, opacity
// logit) with the quaternion renormalized after the additive update.
// ---------------------------------------------------------------------------

// Sin/cos features of the mean, normalized to [-1, 1] over the curve bounds.
// Band j oscillates at angular frequency 2*pi*2^j; layout per Gaussian is
// [axis][band][sin, cos], i.e. column ((axis*bands + band)*2 + {0,1}).
Tensor positional_encode(const Tensor& means, const OrderingCurve& curve,
                         std::size_t bands);

// Chains upstream gradient on the encoding back to the means (accumulates).
void positional_encode_backward(const Tensor& means, const OrderingCurve& curve,
                                std::size_t bands, const Tensor& encoded,
                                const Tensor& g_encoded, Tensor& g_means);

struct HeadCache {
    std::vector<std::size_t> perm;  // perm[t] = Gaussian at sequence slot t
    Tensor concat;                  // (N, d + 6*bands): [feature ; encoding]
    std::vector<MambaBlockCache> blocks;
    Tensor restored;  // (N, d) block-stack output back in original order
    Tensor r_pre;     // (N, 4) quaternion + delta before renormalization
};

struct GaussMambaHead {
    std::size_t feat_dim = 0;
    std::size_t num_classes = 0;
    std::size_t bands = 1;

    Linear embed;  // (d + 6*bands) -> d, applied before the block stack
    std::vector<MambaBlock> blocks;
    Linear delta;  // d -> (3 + 3 + 4 + 1 + |C|) parameter deltas

    GaussMambaHead() = default;
    GaussMambaHead(std::size_t d, std::size_t classes, std::size_t n_blocks,
                   std::size_t state_dim, std::size_t pe_bands);

    std::size_t delta_dim() const { return 11 + num_classes; }
    void zero_grad();
};

// encode -> order -> scan blocks -> restore order -> apply predicted deltas.
// With every weight zero the output set equals the input set exactly.
GaussianSet gauss_mamba_refine(const GaussianSet& set, const OrderingCurve& curve,
                               const GaussMambaHead& head,
                               HeadCache* cache = nullptr);

// Accumulates parameter grads into `head` and input-field grads into `g_set`,
// given upstream gradients on every output field (carried in `g_out`). The
// ordering permutation is frozen (no gradient through key comparisons).
void gauss_mamba_backward(GaussMambaHead& head, const GaussianSet& set,
                          const OrderingCurve& curve, const HeadCache& cache,
                          const GaussianSet& g_out, GaussianSet& g_set);

// Final stage: splat the refined set and take per-voxel argmax labels.
VoxelGrid predict_occupancy(const GaussianSet& set, const GridSpec& spec,
                            real cutoff_k);

}  // namespace splatocc
