#pragma once

#include <string>
#include <vector>

#include "splatocc/config.hpp"
#include "splatocc/gaussian.hpp"
#include "splatocc/ldfa.hpp"
#include "splatocc/scene.hpp"

namespace splatocc {

// ---------------------------------------------------------------------------
// File formats. All binary files open with a 16-byte header (8-byte magic
// "SPLATOCC", a 4-byte type tag, little-endian u32 version) and store scalars
// little-endian with f32 payloads. Every format round-trips byte-identically:
// write -> read -> write reproduces the original file.
// ---------------------------------------------------------------------------

// Voxel grid ("VOXL"): u32 X, Y, Z, |C|; f32 origin[3]; f32 voxel_size;
// f32 logits row-major (X, Y, Z, |C|); u16 labels row-major. Saving a grid
// without materialized labels derives them by argmax first.
void save_voxel_grid(const std::string& path, const VoxelGrid& grid);
VoxelGrid load_voxel_grid(const std::string& path);

// Feature volume ("FVOL"): the same header layout with extents C, D, H, W,
// then f32 origin[3], f32 cell_size[3] (per-axis spacing), f32 values.
void save_feature_volume(const std::string& path, const FeatureVolume& volume);
FeatureVolume load_feature_volume(const std::string& path);

// Gaussian set: a headerless flat f32 record stream — per Gaussian
// m[3], r[4], log_s[3], opacity_logit, c[|C|], f[F] — plus a JSON sidecar at
// `path` + ".json" recording the record geometry (count, |C|, F).
void save_gaussian_set(const std::string& path, const GaussianSet& set);
GaussianSet load_gaussian_set(const std::string& path);

// Synthetic scene bundle ("SCNE"): grid body as in "VOXL", u64 seed,
// f32 lidar_origin[3], u64 point count, f32 point records (x, y, z,
// intensity), then the camera block (u32 channels, height, width; f32
// intrinsics fx fy cx cy; f32 rot[9]; f32 trans[3]; f32 z_near; f32 values).
void save_scene(const std::string& path, const SyntheticScene& scene);
SyntheticScene load_scene(const std::string& path);

// ---------------------------------------------------------------------------
// Run configuration: UTF-8 "key = value" sections. The emitter writes a
// canonical form (full-precision reals, fixed key order); the parser requires
// every key exactly once, so load(save(c)) == c bit-exactly and
// save(load(text)) reproduces canonical text byte-identically.
// ---------------------------------------------------------------------------

std::string config_to_text(const RunConfig& config);
RunConfig config_from_text(const std::string& text);
void save_config(const std::string& path, const RunConfig& config);
RunConfig load_config(const std::string& path);

// FNV-1a over the canonical text, as 16 hex digits.
std::string config_hash(const RunConfig& config);

// ---------------------------------------------------------------------------
// Metric record: one JSON object per evaluation or training run. Skipped
// classes (empty union) appear as null in the iou array.
// ---------------------------------------------------------------------------

struct MetricRecord {
    std::string config_hash;
    std::vector<real> iou;  // per class; NaN = skipped
    real miou = 0;
    std::size_t steps = 0;
    real wall_time = 0;  // seconds; exactly 0 in deterministic mode
};

std::string metric_record_to_json(const MetricRecord& record);
MetricRecord metric_record_from_json(const std::string& text);
void save_metric_record(const std::string& path, const MetricRecord& record);
MetricRecord load_metric_record(const std::string& path);

// ---------------------------------------------------------------------------
// Plot-ready export: one "x y z label" line per voxel (world-space centers).
// ---------------------------------------------------------------------------

std::string grid_to_point_text(const VoxelGrid& grid);
void export_grid_text(const std::string& path, const VoxelGrid& grid);

// Whole-file helpers shared by the formats above.
std::string read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::string& bytes);

}  // namespace splatocc
