#pragma once

#include <array>
#include <vector>

#include "splatocc/gaussian.hpp"
#include "splatocc/rng.hpp"

namespace splatocc {

// ---------------------------------------------------------------------------
// Depth-plane feature volume and the LiDAR-side lifting path: per-plane
// deformable sampling around each Gaussian anchor, chunked depth aggregation
// with an optional shuffling permutation, cross-depth attention, and a gated
// blend against the plain depth average. Also the simplified single-view
// camera lift, which shares the sampling machinery on a one-plane "volume".
// ---------------------------------------------------------------------------

struct VolumeSpec {
    std::array<real, 3> origin{0, 0, 0};
    std::array<real, 3> cell_size{1, 1, 1};       // world units per cell (x,y,z)
    std::size_t depth = 0, height = 0, width = 0;  // planes (z), rows (y), cols (x)

    std::size_t cell_count() const { return depth * height * width; }
    bool operator==(const VolumeSpec& o) const = default;
};

struct FeatureVolume {
    VolumeSpec spec;
    Tensor values;  // (C, D, H, W)

    std::size_t channels() const { return values.rank() ? values.dim(0) : 0; }
};

struct LidarPoint {
    real x = 0, y = 0, z = 0;
    real intensity = 0;
};

// Per-cell mean of the hand-crafted point feature (intensity, 1, z); empty
// cells stay zero and points outside the volume are ignored. Channels = 3.
FeatureVolume point_cloud_to_volume(const std::vector<LidarPoint>& points,
                                    const VolumeSpec& spec);

// ---------------------------------------------------------------------------
// Learned volume encoder: refine the pooled 3-channel cells, then lift them
// to the model feature width.
// ---------------------------------------------------------------------------

struct VolumeEncoder {
    RefineBlock refine;  // on the raw 3-channel cells
    Linear embed;        // 3 -> C

    VolumeEncoder() = default;
    explicit VolumeEncoder(std::size_t channels);

    std::size_t channels() const { return embed.out_dim(); }
    void zero_grad();
};

struct VolumeEncodeCache {
    Tensor cells;    // (D*H*W, 3) pooled input
    RefineCache refine;
    Tensor refined;  // (D*H*W, 3)
};

FeatureVolume encode_volume(const FeatureVolume& raw, const VolumeEncoder& enc,
                            VolumeEncodeCache* cache = nullptr);

// Accumulates encoder parameter gradients from the upstream gradient on the
// encoded values; the raw cells are data, so nothing flows further back.
void encode_volume_backward(VolumeEncoder& enc, const VolumeEncodeCache& cache,
                            const Tensor& g_values);

// ---------------------------------------------------------------------------
// Sampling primitives (zero-padding outside the plane).
// ---------------------------------------------------------------------------

// Bilinear read of all channels at continuous (u, v) on one plane; integer
// coordinates land exactly on cell centers. Out-of-range corners contribute
// zero. `out` has values.dim(0) entries.
void bilinear_sample(const Tensor& values, std::size_t plane, real u, real v,
                     real* out);

// Chains g_out back to the plane values (if g_values non-null) and to the
// sample position (accumulating into g_u/g_v).
void bilinear_sample_backward(const Tensor& values, std::size_t plane, real u,
                              real v, const real* g_out, Tensor* g_values,
                              real& g_u, real& g_v);

// Weighted sum of bilinear reads at base + offsets[k]; weights are given
// already normalized. offsets (P, 2) rows are (du, dv); weights (P).
void deformable_sample(const Tensor& values, std::size_t plane, real base_u,
                       real base_v, const Tensor& offsets, const Tensor& weights,
                       real* out);

void deformable_sample_backward(const Tensor& values, std::size_t plane,
                                real base_u, real base_v, const Tensor& offsets,
                                const Tensor& weights, const real* g_out,
                                Tensor* g_values, Tensor& g_offsets,
                                Tensor& g_weights, real& g_base_u, real& g_base_v);

// ---------------------------------------------------------------------------
// Depth chunking.
// ---------------------------------------------------------------------------

// Contiguous near-equal blocks over sequence positions; the plane actually
// read at position t is perm[t] (a fresh random draw per training forward,
// identity in eval mode).
struct ChunkPlan {
    std::size_t chunks = 0;            // K
    std::vector<std::size_t> perm;     // over [0, D)
    std::vector<std::size_t> begin;    // K+1 block boundaries, begin[K] == D

    std::size_t depth() const { return perm.size(); }
    std::size_t block_size(std::size_t k) const { return begin[k + 1] - begin[k]; }
};

ChunkPlan make_chunk_plan(std::size_t depth, std::size_t chunks, bool shuffle,
                          Rng& rng);

// Mean pooling per chunk under the plan's permutation: (D, C) -> (K, C).
Tensor chunk_aggregate(const Tensor& f_depth, const ChunkPlan& plan);

void chunk_aggregate_backward(const ChunkPlan& plan, const Tensor& g_chunks,
                              Tensor& g_f_depth);

// ---------------------------------------------------------------------------
// Cross-depth modulation and the gated blend.
// ---------------------------------------------------------------------------

struct ModulationParams {
    Linear wq, wk, wv;  // each C -> C

    ModulationParams() = default;
    explicit ModulationParams(std::size_t channels);
    void zero_grad();
};

struct ModulationCache {
    Tensor chunks;   // (K, C) input
    Tensor q, k, v;  // (K, C)
    Tensor weights;  // (K, K) attention rows
};

// Attention of every chunk over all chunks, then the mean over chunks: a
// single C-vector summarizing the depth structure.
Tensor cross_depth_modulation(const Tensor& chunks, const ModulationParams& p,
                              ModulationCache* cache = nullptr);

void cross_depth_modulation_backward(ModulationParams& p,
                                     const ModulationCache& cache,
                                     const Tensor& g_m, Tensor& g_chunks);

// alpha*m + (1-alpha)*g, elementwise on tensors of equal shape.
Tensor gated_global_fusion(const Tensor& m, const Tensor& g, real alpha);

// ---------------------------------------------------------------------------
// Full LiDAR lift.
// ---------------------------------------------------------------------------

struct LdfaParams {
    std::size_t keypoints = 4;  // P
    std::size_t planes = 0;     // D

    VolumeEncoder encoder;
    Linear offset_map;  // feature -> D*P*2, zero-init so sampling starts at the anchor
    Linear weight_map;  // feature -> D*P logits, softmax-normalized per plane
    ModulationParams mod;
    real alpha_logit = 0;  // gate alpha = sigmoid(alpha_logit)
    real g_alpha_logit = 0;

    LdfaParams() = default;
    LdfaParams(std::size_t channels, std::size_t feat_dim, std::size_t planes_,
               std::size_t keypoints_);

    std::size_t channels() const { return encoder.channels(); }
    void zero_grad();
};

struct LdfaCache {
    VolumeEncodeCache enc;
    FeatureVolume encoded;
    Tensor offset_raw;     // (N, D*P*2)
    Tensor weight_logits;  // (N*D, P)
    Tensor weights;        // (N*D, P) softmax rows
    Tensor f_depth;        // (N, D, C) per-plane samples
    Tensor g_global;       // (N, C) plain depth mean
    Tensor chunks;         // (N, K, C)
    std::vector<ModulationCache> mod;  // one per anchor
    Tensor m;              // (N, C)
    ChunkPlan plan;
};

// Fills the LiDAR feature row of every anchor: per-plane deformable samples
// (Eq. 4 shape), chunked aggregation, cross-depth modulation, gated blend
// with the depth average. Returns (N, C).
Tensor ldfa_lift(const GaussianSet& set, const FeatureVolume& raw,
                 const LdfaParams& p, const ChunkPlan& plan,
                 LdfaCache* cache = nullptr);

// Accumulates parameter grads into p and anchor grads (means x/y via the
// projected base coordinate, features via the offset/weight maps) into g_set.
void ldfa_lift_backward(LdfaParams& p, const GaussianSet& set,
                        const LdfaCache& cache, const Tensor& g_out,
                        GaussianSet& g_set);

// ---------------------------------------------------------------------------
// Camera lift (single pinhole view).
// ---------------------------------------------------------------------------

struct CameraFeatureMap {
    Tensor values;  // (C_img, 1, H, W) — one-plane layout shares the samplers
    real fx = 1, fy = 1, cx = 0, cy = 0;
    std::array<real, 9> rot{1, 0, 0, 0, 1, 0, 0, 0, 1};  // world->camera, row-major
    std::array<real, 3> trans{0, 0, 0};
    real z_near = real(1e-3);

    std::size_t channels() const { return values.rank() ? values.dim(0) : 0; }
};

struct CameraLiftParams {
    std::size_t keypoints = 4;
    Linear embed;       // C_img -> C
    Linear offset_map;  // feature -> P*2, zero-init
    Linear weight_map;  // feature -> P logits

    CameraLiftParams() = default;
    CameraLiftParams(std::size_t channels, std::size_t image_channels,
                     std::size_t feat_dim, std::size_t keypoints_);
    void zero_grad();
};

struct CameraLiftCache {
    std::vector<bool> visible;  // per anchor
    Tensor base;                // (N, 2) image-plane (u, v)
    Tensor offset_raw;          // (N, P*2)
    Tensor weight_logits;       // (N, P)
    Tensor weights;             // (N, P)
    Tensor sampled;             // (N, C_img)
};

// Projects each anchor through the pinhole, deformable-samples the image
// plane, and lifts the sample to the model width. Anchors at or behind the
// near plane produce a zero row. Returns (N, C).
Tensor camera_lift(const GaussianSet& set, const CameraFeatureMap& cam,
                   const CameraLiftParams& p, CameraLiftCache* cache = nullptr);

void camera_lift_backward(CameraLiftParams& p, const GaussianSet& set,
                          const CameraFeatureMap& cam, const CameraLiftCache& cache,
                          const Tensor& g_out, GaussianSet& g_set);

}  // namespace splatocc
