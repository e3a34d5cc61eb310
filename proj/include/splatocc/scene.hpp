#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "splatocc/gaussian.hpp"
#include "splatocc/ldfa.hpp"
#include "splatocc/rng.hpp"

namespace splatocc {

// ---------------------------------------------------------------------------
// Synthetic scenes: a labeled voxel grid rasterized from simple solids, a
// LiDAR point cloud sampled from their surfaces with per-class intensity
// signatures, and a camera feature map rendered by marching pixel rays to
// the first occupied voxel. Stands in for recorded sensor data.
// ---------------------------------------------------------------------------

enum class ShapeKind : std::uint8_t { ground, box, cylinder };

struct ShapeSpec {
    ShapeKind kind = ShapeKind::box;
    std::uint16_t label = 1;  // class id painted by this shape; 0 stays "empty"
    // ground:   center[2] is the surface height; everything at or below it.
    // box:      axis-aligned, `center` +/- `half` per axis.
    // cylinder: axis along z through `center`; half[0] = radius,
    //           half[2] = half height (half[1] unused).
    std::array<real, 3> center{0, 0, 0};
    std::array<real, 3> half{0, 0, 0};

    bool operator==(const ShapeSpec&) const = default;
};

bool shape_contains(const ShapeSpec& shape, real x, real y, real z);

struct SceneParams {
    std::vector<ShapeSpec> shapes;
    std::size_t points_per_shape = 1500;
    real point_noise = real(0.02);  // positional jitter stddev (m)
    std::array<real, 3> lidar_origin{0, 0, 2};

    std::size_t image_height = 32, image_width = 32;
    std::array<real, 3> camera_pos{-7, -7, 4};
    std::array<real, 3> camera_look{0, 0, 0};
    real camera_fov_deg = 60;

    bool operator==(const SceneParams&) const = default;
};

struct SyntheticScene {
    VoxelGrid gt;  // labels + matching one-hot logits
    std::vector<LidarPoint> points;
    std::array<real, 3> lidar_origin{0, 0, 0};
    CameraFeatureMap camera;  // one channel per class
    std::uint64_t seed = 0;
};

// Per-voxel-center rasterization, later shape wins on overlap. Labels outside
// every shape stay 0; logits are the one-hot encoding of the labels.
VoxelGrid rasterize_shapes(const GridSpec& grid, const std::vector<ShapeSpec>& shapes);

// Intensity every point of a class carries before jitter.
real class_intensity(std::uint16_t label, std::size_t num_classes);

// Builds the full scene from (grid, params, seed). Deterministic: the same
// arguments always produce bit-identical output. Every emitted LiDAR point
// lies inside a non-empty ground-truth voxel (jittered samples that land in
// empty space are redrawn, then dropped after a bounded number of attempts).
// All stored coordinates and feature values are rounded to f32 so in-memory
// scenes match their serialized form exactly.
SyntheticScene generate_scene(const GridSpec& grid, const SceneParams& params,
                              std::uint64_t seed);

enum class DegradeMode : std::uint8_t { rain, night };

struct DegradeConfig {
    real rain_drop_max = real(0.5);     // dropout fraction at severity 1
    real rain_range_sigma = real(0.15); // range jitter stddev at severity 1 (m)
    real night_energy_floor = real(0.25);  // max energy fraction at severity 1
    real night_noise_half = real(0.5);  // half-width of the relative noise
};

// Sensor degradation proxies. Ground truth is never touched.
//  rain:  drops LiDAR points and jitters survivors along their sensor ray;
//         a jitter that would leave occupied space keeps the original point.
//  night: scales camera features toward a configured energy floor and adds
//         signal-proportional noise, so the severity-1 energy bound
//         energy(degraded) <= night_energy_floor * energy(original)
//         holds by construction for every scene.
SyntheticScene degrade(const SyntheticScene& scene, DegradeMode mode,
                       real severity, std::uint64_t seed,
                       const DegradeConfig& cfg = {});

// Total squared feature magnitude of a camera map (the "energy" above).
real camera_energy(const CameraFeatureMap& cam);

}  // namespace splatocc
