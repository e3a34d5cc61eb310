#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "splatocc/tensor.hpp"

namespace splatocc {

// ---------------------------------------------------------------------------
// Training objective (cross-entropy + Lovász-softmax) and occupancy metrics
// (per-class IoU, mIoU). Losses take a logit tensor whose last axis runs over
// classes — both (V, C) matrices and (X, Y, Z, C) voxel grids flatten to the
// same layout — plus one ground-truth label per voxel. All reductions are
// serial so training losses stay bit-stable across runs.
// ---------------------------------------------------------------------------

struct LossWeights {
    real lambda_ce = 1;
    real lambda_lov = 1;

    bool operator==(const LossWeights&) const = default;
};

// Mean over voxels of -log softmax(logits)[gt]. When class_weights (size |C|)
// is given the mean is weighted per ground-truth class: sum(w_gt * nll) /
// sum(w_gt).
real ce_loss(const Tensor& logits, const std::vector<std::uint16_t>& gt,
             const Tensor* class_weights = nullptr);

// Accumulates d(g_out * loss)/d logits into g_logits.
void ce_loss_backward(const Tensor& logits, const std::vector<std::uint16_t>& gt,
                      real g_out, Tensor& g_logits,
                      const Tensor* class_weights = nullptr);

// One sorted-error Jaccard-extension term per class present in the ground
// truth, in ascending class order: mean of these is the loss. Exposed so the
// per-class range property and the absent-class convention are testable.
std::vector<std::pair<std::uint16_t, real>> lovasz_softmax_per_class(
    const Tensor& logits, const std::vector<std::uint16_t>& gt);

// Mean over present classes of the Lovász extension of the Jaccard loss
// evaluated on the per-voxel softmax error vector.
real lovasz_softmax(const Tensor& logits, const std::vector<std::uint16_t>& gt);

// Reference oracle: evaluates the Lovász extension directly from the Jaccard
// set function — errors sorted descending, loss = sum of e_(k) times the
// set-function marginal F(S_k) - F(S_{k-1}) with S_k the first k sorted
// voxels and F(S) = |S| / |G ∪ S| computed by explicit membership counting.
// Intentionally a second route from the cumulative-sum production form; keep
// both.
real lovasz_softmax_reference(const Tensor& logits,
                              const std::vector<std::uint16_t>& gt);

// Frozen-sort subgradient: the descending error order recorded in the forward
// pass is treated as constant, the standard choice for this surrogate.
void lovasz_softmax_backward(const Tensor& logits,
                             const std::vector<std::uint16_t>& gt, real g_out,
                             Tensor& g_logits);

// lambda_ce * ce_loss + lambda_lov * lovasz_softmax, exactly as written.
real total_loss(const Tensor& logits, const std::vector<std::uint16_t>& gt,
                const LossWeights& w);

void total_loss_backward(const Tensor& logits,
                         const std::vector<std::uint16_t>& gt,
                         const LossWeights& w, real g_out, Tensor& g_logits);

// |pred ∩ gt| / |pred ∪ gt| for class k; quiet NaN when the union is empty
// (the class is skipped by miou). `valid` reports the non-empty-union flag
// when provided.
real iou_per_class(const std::vector<std::uint16_t>& pred,
                   const std::vector<std::uint16_t>& gt, std::uint16_t k,
                   bool* valid = nullptr);

// Unweighted mean of iou_per_class over the classes with a nonempty union.
// Throws validation_error when every listed class has an empty union.
real miou(const std::vector<std::uint16_t>& pred,
          const std::vector<std::uint16_t>& gt,
          const std::vector<std::uint16_t>& classes);

// Per-class IoU sweep plus mIoU. Class 0 is the "empty" voxel class and is
// excluded from the mean by default, matching occupancy-benchmark convention;
// include_empty_class folds it back in. The per-class vectors always cover
// all classes, with valid[k]=0 marking skipped (empty-union) entries.
struct MetricReport {
    std::vector<real> iou;             // per class; NaN where invalid
    std::vector<unsigned char> valid;  // nonempty-union flags
    real miou = 0;
    std::size_t evaluated_classes = 0;
};

MetricReport evaluate_occupancy(const std::vector<std::uint16_t>& pred,
                                const std::vector<std::uint16_t>& gt,
                                std::size_t num_classes,
                                bool include_empty_class = false);

// Fixed-width text table of a metric report (one row per class plus the
// mean), for run logs.
std::string format_metric_table(const MetricReport& report);

}  // namespace splatocc
