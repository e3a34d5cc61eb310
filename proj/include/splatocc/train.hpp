#pragma once

#include <string>
#include <utility>
#include <vector>

#include "splatocc/config.hpp"
#include "splatocc/io.hpp"
#include "splatocc/model.hpp"
#include "splatocc/rng.hpp"
#include "splatocc/scene.hpp"

namespace splatocc {

// ---------------------------------------------------------------------------
// Optimizer state. Moments are kept per registry entry in registry order, so
// the checkpoint layout is exactly the parameter walk.
// ---------------------------------------------------------------------------

struct TrainState {
    ModelParams params;
    std::vector<double> m, v;  // first/second moments, flat in registry order
    std::uint64_t step = 0;
    Rng rng{0};  // training stream (chunk shuffle + smoothing gates)
};

// Seeds two independent streams from cfg.seed: one consumed by parameter
// initialization, one carried in the state for training-time draws.
TrainState make_train_state(const ModelConfig& cfg);

// Cosine decay from lr to lr_min over total_steps (step clamped to the end).
real cosine_lr(const ModelConfig& cfg, std::uint64_t step);

// Decoupled-weight-decay Adam over every registry entry, then quaternion
// renormalization, then step++. Uses cosine_lr(cfg, state.step).
void adamw_step(TrainState& state, const ModelConfig& cfg);

// One optimization step on the scene: forward (train mode), loss, backward,
// adamw_step. Throws numeric_error naming the first non-finite tensor if the
// loss, the logits, or any parameter gradient leaves the finite range.
real train_step(TrainState& state, const ModelConfig& cfg, const SyntheticScene& scene);

// Eval-mode forward pass; draws nothing and leaves the state untouched.
VoxelGrid predict(const ModelParams& params, const ModelConfig& cfg,
                  const SyntheticScene& scene);

// Binary occupied-vs-empty IoU (any nonzero label counts as occupied); NaN
// when both grids are entirely empty.
real occupancy_iou(const std::vector<std::uint16_t>& pred,
                   const std::vector<std::uint16_t>& gt);

// Metric record for a finished run: per-class IoU and mIoU of the prediction
// against the scene's ground truth, the config's hash, and the wall time
// (exactly 0 when cfg.deterministic).
MetricRecord evaluate_run(const RunConfig& run, const VoxelGrid& pred,
                          const SyntheticScene& scene, std::uint64_t steps,
                          real wall_seconds);

// ---------------------------------------------------------------------------
// Full runs.
// ---------------------------------------------------------------------------

struct TrainResult {
    TrainState state;
    std::vector<real> losses;  // one entry per step
    VoxelGrid prediction;      // eval-mode output after the last step
    MetricRecord record;
};

// Generates the scene from run.scene with the model seed, trains for
// run.model.total_steps, evaluates. The whole run is a pure function of the
// config in deterministic mode.
TrainResult run_training(const RunConfig& run);

// ---------------------------------------------------------------------------
// Checkpointing. Binary format, version-pinned: step, training-rng state,
// config hash, then per registry entry its name hash, element count, and
// values + both moments as 64-bit floats — enough to make resumed training
// bit-identical to uninterrupted training.
// ---------------------------------------------------------------------------

void save_train_state(const std::string& path, const TrainState& state,
                      const RunConfig& run);

// Rebuilds the parameter shapes from the config, then overwrites every value
// from the file. Throws validation_error on any mismatch (config hash,
// entry names, counts).
TrainState load_train_state(const std::string& path, const RunConfig& run);

// ---------------------------------------------------------------------------
// Ablation sweep: named config variants trained end to end with the shared
// base seed. Rows: the three fusion strategies, component knockouts, and a
// doubled-count density comparison.
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, MetricRecord>> run_ablation(const RunConfig& base);

// JSON object keyed by variant name, stable field order.
std::string ablation_report_to_json(
    const std::vector<std::pair<std::string, MetricRecord>>& rows);

}  // namespace splatocc
