#pragma once

#include <cstdint>

#include "splatocc/aclf.hpp"
#include "splatocc/ebfs.hpp"
#include "splatocc/gaussian.hpp"
#include "splatocc/losses.hpp"
#include "splatocc/scene.hpp"

namespace splatocc {

// ---------------------------------------------------------------------------
// One run = one configuration file. Every field here is named in the file
// and round-trips through it bit-exactly (reals are printed with full
// precision). Defaults are the desk-scale setup: a 32-cubed half-meter grid
// with four classes, 512 Gaussians, and 16 feature channels.
// ---------------------------------------------------------------------------

struct ModelConfig {
    GridSpec grid{{-8, -8, -2}, real(0.5), {32, 32, 32}, 4};

    // model
    std::size_t num_gaussians = 512;
    std::size_t feat_dim = 16;
    real cutoff_k = 3;

    // lidar lifting
    std::size_t ldfa_keypoints = 4;   // sample offsets per depth plane
    std::size_t ldfa_chunks = 4;      // depth chunks for the modulation stage
    std::size_t depth_planes = 16;
    bool use_ldfa = true;             // off: plain per-plane average, no
                                      // deformable sampling or modulation

    // camera lifting
    std::size_t camera_keypoints = 4;
    bool use_camera = true;           // off: camera features stay zero

    // entropy smoothing
    SmoothingConfig ebfs;
    real ebfs_epsilon_init = 0;       // residual strength starts at identity
    bool use_ebfs = true;

    FusionMode fusion = FusionMode::aclf;

    // sequence refinement head
    std::size_t head_blocks = 2;
    std::size_t head_state_dim = 8;
    std::size_t head_pe_bands = 2;
    unsigned curve_bits = 6;
    bool use_head = true;

    LossWeights loss;

    // optimizer (decoupled weight decay + cosine-annealed step size)
    real lr = real(1e-2);
    real lr_min = 0;
    real weight_decay = real(0.01);
    real beta1 = real(0.9);
    real beta2 = real(0.999);
    real adam_eps = real(1e-8);
    std::size_t total_steps = 200;

    std::uint64_t seed = 1;
    bool deterministic = true;  // single-threaded exact mode, zeroed wall time

    bool operator==(const ModelConfig&) const = default;
};

// The configuration file also carries the synthetic-scene recipe; the grid
// is shared with the model section.
struct RunConfig {
    ModelConfig model;
    SceneParams scene;

    bool operator==(const RunConfig&) const = default;
};

// Desk-scale default scene: a ground plane, two boxes, and two cylinders.
RunConfig default_run_config();

}  // namespace splatocc
