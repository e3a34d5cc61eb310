#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "splatocc/ops.hpp"
#include "splatocc/tensor.hpp"

namespace splatocc {

// ---------------------------------------------------------------------------
// Grid and scene-state containers.
// ---------------------------------------------------------------------------

struct GridSpec {
    std::array<real, 3> origin{0, 0, 0};  // world position of the grid corner (m)
    real voxel_size = real(1);            // cubic voxel edge (m)
    std::array<std::size_t, 3> extents{0, 0, 0};  // X, Y, Z voxel counts
    std::size_t num_classes = 0;

    std::size_t voxel_count() const { return extents[0] * extents[1] * extents[2]; }
    std::size_t flat_index(std::size_t ix, std::size_t iy, std::size_t iz) const {
        return (ix * extents[1] + iy) * extents[2] + iz;
    }
    std::array<real, 3> center(std::size_t ix, std::size_t iy, std::size_t iz) const {
        return {origin[0] + (real(ix) + real(0.5)) * voxel_size,
                origin[1] + (real(iy) + real(0.5)) * voxel_size,
                origin[2] + (real(iz) + real(0.5)) * voxel_size};
    }
    bool operator==(const GridSpec& o) const = default;
};

struct VoxelGrid {
    GridSpec spec;
    Tensor logits;                     // (X, Y, Z, |C|)
    std::vector<std::uint16_t> labels;  // X*Y*Z, filled by argmax_labels
};

VoxelGrid make_voxel_grid(const GridSpec& spec);

// Structure-of-arrays Gaussian collection. Scales are stored in log space and
// opacity as a logit so gradient updates stay unconstrained; quaternions are
// renormalized after every update.
struct GaussianSet {
    Tensor means;           // (N, 3)
    Tensor rotations;       // (N, 4) quaternion w-x-y-z, unit up to tolerance
    Tensor log_scales;      // (N, 3)
    Tensor opacity_logits;  // (N)
    Tensor class_logits;    // (N, |C|)
    Tensor features;        // (N, F)

    std::size_t size() const { return means.rank() ? means.dim(0) : 0; }
    std::size_t num_classes() const { return class_logits.rank() > 1 ? class_logits.dim(1) : 0; }
    std::size_t feat_dim() const { return features.rank() > 1 ? features.dim(1) : 0; }
};

// All-zero set with identity rotations.
GaussianSet make_gaussian_set(std::size_t n, std::size_t num_classes,
                              std::size_t feat_dim);

// Zero tensors with the same shapes — used as a gradient accumulator.
GaussianSet zeros_like(const GaussianSet& set);

// One decoded primitive (actual scale and opacity, not their raw storage).
struct Gaussian {
    std::array<real, 3> mean{};
    std::array<real, 4> rotation{1, 0, 0, 0};
    std::array<real, 3> scale{1, 1, 1};
    real opacity = real(1);
    std::vector<real> class_logits;
    std::vector<real> feature;
};

Gaussian get_gaussian(const GaussianSet& set, std::size_t i);

// ---------------------------------------------------------------------------
// Quaternion / covariance math.
// ---------------------------------------------------------------------------

// How far from unit length a quaternion may drift before covariance() treats
// it as an error. Loose enough that finite-difference probes of a unit
// quaternion stay valid; storage is renormalized far tighter than this.
inline constexpr real kQuatUnitTol = real(1e-3);

// Row-major rotation matrix from a quaternion (normalized internally).
void quat_to_rotation(const real q[4], real r[9]);

// Chain upstream dL/dR back to the raw (pre-normalization) quaternion,
// accumulating into gq.
void quat_rotation_backward(const real q[4], const real gr[9], real gq[4]);

// Sigma = R diag(s^2) R^T. Errors when q is non-unit beyond kQuatUnitTol.
Tensor covariance(const real q[4], const real s[3]);

// sigma * exp(-1/2 (x-m)^T Sigma^-1 (x-m)) * c
std::vector<real> evaluate_gaussian(const real x[3], const Gaussian& g);

// ---------------------------------------------------------------------------
// Splatting.
// ---------------------------------------------------------------------------

// Accumulates every Gaussian's contribution into the voxels whose centers lie
// within radius cutoff_k * max(scale) of its mean (pass +infinity to disable
// the cutoff). Deterministic for any thread count: each voxel is accumulated
// by exactly one task, in ascending Gaussian order.
VoxelGrid splat(const GaussianSet& set, const GridSpec& spec, real cutoff_k);

// Serial brute-force reference: dense double loop, covariance inverted via
// the explicit 3x3 adjugate — an independent route kept for testing.
VoxelGrid splat_dense_reference(const GaussianSet& set, const GridSpec& spec);

// Accumulates d(loss)/d(set fields) given upstream gradients on the logits.
// The cutoff set is recomputed exactly as in the forward pass and treated as
// frozen (no gradient through inclusion).
void splat_backward(const GaussianSet& set, const GridSpec& spec, real cutoff_k,
                    const Tensor& g_logits, GaussianSet& grads);

// Per-voxel argmax with ties broken toward the lowest class index.
std::vector<std::uint16_t> argmax_labels(const VoxelGrid& grid);

// ---------------------------------------------------------------------------
// Residual feature refinement: f <- f + W2 gelu(W1 layer_norm(f) + b1) + b2.
// ---------------------------------------------------------------------------

struct RefineCache {
    Tensor input;    // (N, d)
    Tensor normed;   // (N, d)
    Tensor hidden;   // (N, hidden) pre-activation
    Tensor act;      // (N, hidden)
};

struct RefineBlock {
    Tensor ln_gain, ln_bias;  // (d)
    Tensor g_ln_gain, g_ln_bias;
    Linear fc1, fc2;
    real eps = real(1e-5);

    RefineBlock() = default;
    RefineBlock(std::size_t dim, std::size_t hidden);

    std::size_t dim() const { return ln_gain.size(); }

    Tensor forward(const Tensor& f, RefineCache* cache = nullptr) const;
    // Accumulates parameter grads and adds the input gradient into gf.
    void backward(const RefineCache& cache, const Tensor& gy, Tensor& gf);
    void zero_grad();
};

}  // namespace splatocc
