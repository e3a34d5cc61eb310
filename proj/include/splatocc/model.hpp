#pragma once

#include <string>
#include <vector>

#include "splatocc/aclf.hpp"
#include "splatocc/config.hpp"
#include "splatocc/ebfs.hpp"
#include "splatocc/gaussian.hpp"
#include "splatocc/head.hpp"
#include "splatocc/ldfa.hpp"
#include "splatocc/morton.hpp"
#include "splatocc/rng.hpp"
#include "splatocc/scene.hpp"

namespace splatocc {

// ---------------------------------------------------------------------------
// Full model: a learnable Gaussian set plus every stage of the lifting /
// smoothing / fusion / refinement pipeline. Parameter tensors live here;
// each carries a same-shaped gradient accumulator.
// ---------------------------------------------------------------------------

struct ModelParams {
    GaussianSet initial;    // learnable scene state (anchors + raw features)
    GaussianSet g_initial;  // gradient accumulator, same shapes

    CameraLiftParams camera;
    LdfaParams ldfa;              // also owns the volume encoder used by the
                                  // plain (non-deformable) LiDAR path
    RefineBlock pre_lidar, pre_camera;
    real epsilon = 0;             // smoothing strength (learnable scalar)
    real g_epsilon = 0;
    FusionParams fusion;
    RefineBlock post;
    GaussMambaHead head;

    void zero_grad();
};

// Builds the model for a config. Structural defaults come from each block's
// constructor; this routine then randomizes the layers that need symmetry
// breaking (Glorot-uniform fan-based bounds) while keeping every residual
// output zero, so the refinement stages start as identities:
//   - Gaussians: means uniform over the grid bounds, isotropic scales of
//     1.5 x voxel size, identity rotations, zero opacity/class/feature.
//   - Glorot: volume-encoder embed + hidden layer, modulation q/k/v, the
//     refine-block hidden layers, all fusion projections and gate1, the head
//     embed, and each scan block's in/out projections and state matrices.
//   - Zero: refine fc2 layers, gate2, the head delta layer, the camera embed,
//     and every deformable offset/weight map.
// The draw order is fixed and documented in the implementation; it does not
// depend on any of the use_* toggles, so two configs that share dimensions
// and seed share their initial parameters.
ModelParams make_model_params(const ModelConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Flat parameter registry: a stable-ordered view of every learnable value,
// used by the optimizer, the checkpoint format, and finite-difference tests.
// ---------------------------------------------------------------------------

struct ParamRef {
    std::string name;
    real* value = nullptr;
    real* grad = nullptr;
    std::size_t count = 0;
};

std::vector<ParamRef> parameter_registry(ModelParams& p);
std::size_t parameter_count(ModelParams& p);

// ---------------------------------------------------------------------------
// Forward / backward orchestration.
// ---------------------------------------------------------------------------

// The pooled LiDAR volume spans the grid: one cell per (x, y) voxel column
// and `depth_planes` equal z slabs.
VolumeSpec volume_spec_for(const GridSpec& grid, std::size_t depth_planes);

// The space-filling ordering curve over the grid's world bounds.
OrderingCurve ordering_curve_for(const GridSpec& grid, unsigned bits);

struct PipelineCache {
    // LiDAR stream.
    FeatureVolume raw;  // pooled input (data, no gradient)
    ChunkPlan plan;
    LdfaCache ldfa;             // deformable path
    VolumeEncodeCache plain_enc;  // plain path
    FeatureVolume plain_vol;
    Tensor plain_base;  // (N, 2) per-anchor plane coordinates
    Tensor f_lidar;     // (N, d)
    // Camera stream.
    CameraLiftCache camera;
    Tensor f_camera;  // (N, d)
    // Per-stream refinement.
    RefineCache pre_l, pre_c;
    Tensor f_l_ref, f_c_ref;
    // Smoothing.
    SmoothCache smooth;
    Tensor f_c_sm, f_l_sm;
    // Fusion and shared refinement.
    FuseCache fuse;
    Tensor fused;
    RefineCache post;
    Tensor f_final;
    // Refinement head.
    GaussianSet working;  // initial geometry with features replaced by f_final
    OrderingCurve curve;
    HeadCache head;
    GaussianSet refined;
};

// Runs the whole pipeline on one scene and splats the refined set into an
// occupancy grid (logits + argmax labels):
//   camera_lift + lidar lift -> per-stream refine -> smoothing -> fusion ->
//   shared refine -> sequence head -> splat.
// Toggles: use_camera=false zeroes the camera features, use_ldfa=false swaps
// the deformable lift for a plain per-plane average, use_ebfs=false and
// use_head=false skip those stages. In train mode the chunk plan is shuffled
// and the smoothing gate is sampled, in that order, from `rng`; eval mode
// draws nothing. Pass a cache to enable model_backward.
VoxelGrid model_forward(const ModelParams& p, const ModelConfig& cfg,
                        const SyntheticScene& scene, bool train, Rng& rng,
                        PipelineCache* cache = nullptr);

// Chains d(loss)/d(logits) back through every stage recorded in the cache,
// accumulating into the parameter gradients (p.g_initial, each block's
// internal g tensors, and p.g_epsilon).
void model_backward(ModelParams& p, const ModelConfig& cfg,
                    const SyntheticScene& scene, const PipelineCache& cache,
                    const Tensor& g_logits);

}  // namespace splatocc
