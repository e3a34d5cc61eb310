#include "splatocc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <utility>

#include "splatocc/ops.hpp"

namespace splatocc {

namespace {

struct FlatLogits {
    std::size_t voxels = 0;
    std::size_t classes = 0;
};

FlatLogits validate(const Tensor& logits, const std::vector<std::uint16_t>& gt) {
    require(logits.rank() >= 2, "losses: logits need a trailing class axis");
    FlatLogits f;
    f.classes = logits.dim(logits.rank() - 1);
    require(f.classes >= 1, "losses: empty class axis");
    f.voxels = logits.size() / f.classes;
    require(f.voxels >= 1, "losses: empty grid");
    require(gt.size() == f.voxels, "losses: one label per voxel required");
    for (std::uint16_t label : gt)
        require(label < f.classes, "losses: label out of range");
    return f;
}

Tensor class_softmax(const Tensor& logits) {
    return softmax(logits, logits.rank() - 1);
}

// Ascending list of classes that occur in the ground truth.
std::vector<std::uint16_t> present_classes(const std::vector<std::uint16_t>& gt,
                                           std::size_t classes) {
    std::vector<std::size_t> count(classes, 0);
    for (std::uint16_t label : gt) ++count[label];
    std::vector<std::uint16_t> present;
    for (std::size_t k = 0; k < classes; ++k)
        if (count[k] > 0) present.push_back(std::uint16_t(k));
    return present;
}

// Per-voxel prediction errors for one class: 1 - p[k] on the class's own
// voxels, p[k] elsewhere.
std::vector<real> class_errors(const Tensor& p, const std::vector<std::uint16_t>& gt,
                               std::size_t classes, std::uint16_t k) {
    std::vector<real> e(gt.size());
    const real* pd = p.data();
    for (std::size_t v = 0; v < gt.size(); ++v) {
        const real pk = pd[v * classes + k];
        e[v] = gt[v] == k ? real(1) - pk : pk;
    }
    return e;
}

// Voxel order by descending error, ties broken by voxel index so the order
// (and with it the frozen-sort subgradient) is deterministic.
std::vector<std::size_t> descending_order(const std::vector<real>& e) {
    std::vector<std::size_t> order(e.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return e[a] > e[b]; });
    return order;
}

real weight_divisor(const std::vector<std::uint16_t>& gt, const Tensor* class_weights,
                    std::size_t classes) {
    if (!class_weights) return real(gt.size());
    require(class_weights->rank() == 1 && class_weights->size() == classes,
            "ce_loss: one weight per class required");
    real total = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        const real w = (*class_weights)[c];
        require(std::isfinite(w) && w >= 0, "ce_loss: weights must be finite and >= 0");
    }
    for (std::uint16_t label : gt) total += (*class_weights)[label];
    require(total > 0, "ce_loss: ground-truth classes carry zero total weight");
    return total;
}

}  // namespace

real ce_loss(const Tensor& logits, const std::vector<std::uint16_t>& gt,
             const Tensor* class_weights) {
    const FlatLogits f = validate(logits, gt);
    const real divisor = weight_divisor(gt, class_weights, f.classes);
    const real* xd = logits.data();

    real acc = 0;
    for (std::size_t v = 0; v < f.voxels; ++v) {
        const real* row = xd + v * f.classes;
        // -log softmax[gt] via the max-subtracted log-sum-exp.
        real m = row[0];
        for (std::size_t c = 1; c < f.classes; ++c) m = std::max(m, row[c]);
        real z = 0;
        for (std::size_t c = 0; c < f.classes; ++c) z += std::exp(row[c] - m);
        const real nll = m + std::log(z) - row[gt[v]];
        acc += class_weights ? (*class_weights)[gt[v]] * nll : nll;
    }
    return acc / divisor;
}

void ce_loss_backward(const Tensor& logits, const std::vector<std::uint16_t>& gt,
                      real g_out, Tensor& g_logits, const Tensor* class_weights) {
    const FlatLogits f = validate(logits, gt);
    require(g_logits.same_shape(logits), "ce_loss_backward: gradient shape mismatch");
    const real divisor = weight_divisor(gt, class_weights, f.classes);

    const Tensor p = class_softmax(logits);
    const real* pd = p.data();
    real* gd = g_logits.data();
    for (std::size_t v = 0; v < f.voxels; ++v) {
        const real w = class_weights ? (*class_weights)[gt[v]] : real(1);
        const real scale = g_out * w / divisor;
        for (std::size_t c = 0; c < f.classes; ++c) {
            const real onehot = c == gt[v] ? real(1) : real(0);
            gd[v * f.classes + c] += scale * (pd[v * f.classes + c] - onehot);
        }
    }
}

real lovasz_softmax_reference(const Tensor& logits,
                              const std::vector<std::uint16_t>& gt) {
    const FlatLogits f = validate(logits, gt);
    const Tensor p = class_softmax(logits);

    const std::vector<std::uint16_t> present = present_classes(gt, f.classes);
    real total = 0;
    for (std::uint16_t k : present) {
        const std::vector<real> e = class_errors(p, gt, f.classes, k);
        const std::vector<std::size_t> order = descending_order(e);

        // Grow S one sorted voxel at a time and charge each error with the
        // marginal of the Jaccard-loss set function F(S) = |S| / |G ∪ S|,
        // both sizes counted from explicit membership.
        std::vector<char> in_s(f.voxels, 0);
        real f_prev = 0, loss = 0;
        for (std::size_t step = 0; step < f.voxels; ++step) {
            in_s[order[step]] = 1;
            std::size_t s_size = 0, union_size = 0;
            for (std::size_t v = 0; v < f.voxels; ++v) {
                if (in_s[v]) ++s_size;
                if (in_s[v] || gt[v] == k) ++union_size;
            }
            const real f_cur = real(s_size) / real(union_size);
            loss += e[order[step]] * (f_cur - f_prev);
            f_prev = f_cur;
        }
        total += loss;
    }
    return total / real(present.size());
}

std::vector<std::pair<std::uint16_t, real>> lovasz_softmax_per_class(
    const Tensor& logits, const std::vector<std::uint16_t>& gt) {
    const FlatLogits f = validate(logits, gt);
    const Tensor p = class_softmax(logits);

    std::vector<std::pair<std::uint16_t, real>> out;
    for (std::uint16_t k : present_classes(gt, f.classes)) {
        const std::vector<real> e = class_errors(p, gt, f.classes, k);
        const std::vector<std::size_t> order = descending_order(e);

        std::size_t gts = 0;
        for (std::uint16_t label : gt)
            if (label == k) ++gts;

        std::size_t cum_hit = 0, cum_miss = 0;
        real jac_prev = 0, loss = 0;
        for (std::size_t v : order) {
            if (gt[v] == k)
                ++cum_hit;
            else
                ++cum_miss;
            const real intersection = real(gts - cum_hit);
            const real uni = real(gts + cum_miss);
            const real jac = real(1) - intersection / uni;
            loss += e[v] * (jac - jac_prev);
            jac_prev = jac;
        }
        out.emplace_back(k, loss);
    }
    return out;
}

real lovasz_softmax(const Tensor& logits, const std::vector<std::uint16_t>& gt) {
    const auto per_class = lovasz_softmax_per_class(logits, gt);
    real total = 0;
    for (const auto& [k, loss] : per_class) total += loss;
    return total / real(per_class.size());
}

void lovasz_softmax_backward(const Tensor& logits,
                             const std::vector<std::uint16_t>& gt, real g_out,
                             Tensor& g_logits) {
    const FlatLogits f = validate(logits, gt);
    require(g_logits.same_shape(logits), "lovasz_softmax_backward: gradient shape mismatch");

    const Tensor p = class_softmax(logits);
    const std::vector<std::uint16_t> present = present_classes(gt, f.classes);
    const real scale = g_out / real(present.size());

    Tensor g_p(logits.shape());
    real* gpd = g_p.data();
    for (std::uint16_t k : present) {
        const std::vector<real> e = class_errors(p, gt, f.classes, k);
        const std::vector<std::size_t> order = descending_order(e);

        std::size_t gts = 0;
        for (std::uint16_t label : gt)
            if (label == k) ++gts;

        std::size_t cum_hit = 0, cum_miss = 0;
        real jac_prev = 0;
        for (std::size_t v : order) {
            if (gt[v] == k)
                ++cum_hit;
            else
                ++cum_miss;
            const real jac =
                real(1) - real(gts - cum_hit) / real(gts + cum_miss);
            // d loss / d e_v with the sorted order frozen; the error is
            // 1 - p[k] on the class's voxels and p[k] elsewhere.
            const real g_e = scale * (jac - jac_prev);
            jac_prev = jac;
            const real sign = gt[v] == k ? real(-1) : real(1);
            gpd[v * f.classes + k] += sign * g_e;
        }
    }
    softmax_backward(logits, p, g_p, logits.rank() - 1, real(1), g_logits);
}

real total_loss(const Tensor& logits, const std::vector<std::uint16_t>& gt,
                const LossWeights& w) {
    require(std::isfinite(w.lambda_ce) && std::isfinite(w.lambda_lov),
            "total_loss: weights must be finite");
    require(w.lambda_ce >= 0 && w.lambda_lov >= 0,
            "total_loss: weights must be nonnegative");
    require(w.lambda_ce > 0 || w.lambda_lov > 0,
            "total_loss: at least one loss term must be active");
    real total = 0;
    if (w.lambda_ce > 0) total += w.lambda_ce * ce_loss(logits, gt);
    if (w.lambda_lov > 0) total += w.lambda_lov * lovasz_softmax(logits, gt);
    return total;
}

void total_loss_backward(const Tensor& logits, const std::vector<std::uint16_t>& gt,
                         const LossWeights& w, real g_out, Tensor& g_logits) {
    require(w.lambda_ce >= 0 && w.lambda_lov >= 0 &&
                (w.lambda_ce > 0 || w.lambda_lov > 0),
            "total_loss_backward: invalid weights");
    if (w.lambda_ce > 0) ce_loss_backward(logits, gt, g_out * w.lambda_ce, g_logits);
    if (w.lambda_lov > 0)
        lovasz_softmax_backward(logits, gt, g_out * w.lambda_lov, g_logits);
}

real iou_per_class(const std::vector<std::uint16_t>& pred,
                   const std::vector<std::uint16_t>& gt, std::uint16_t k,
                   bool* valid) {
    require(pred.size() == gt.size(), "iou_per_class: label grids must match");
    std::size_t intersection = 0, uni = 0;
    for (std::size_t v = 0; v < pred.size(); ++v) {
        const bool in_pred = pred[v] == k, in_gt = gt[v] == k;
        if (in_pred && in_gt) ++intersection;
        if (in_pred || in_gt) ++uni;
    }
    if (valid) *valid = uni > 0;
    if (uni == 0) return std::numeric_limits<real>::quiet_NaN();
    return real(intersection) / real(uni);
}

real miou(const std::vector<std::uint16_t>& pred,
          const std::vector<std::uint16_t>& gt,
          const std::vector<std::uint16_t>& classes) {
    real acc = 0;
    std::size_t evaluated = 0;
    for (std::uint16_t k : classes) {
        bool valid = false;
        const real iou = iou_per_class(pred, gt, k, &valid);
        if (valid) {
            acc += iou;
            ++evaluated;
        }
    }
    require(evaluated > 0, "miou: every class has an empty union");
    return acc / real(evaluated);
}

MetricReport evaluate_occupancy(const std::vector<std::uint16_t>& pred,
                                const std::vector<std::uint16_t>& gt,
                                std::size_t num_classes, bool include_empty_class) {
    require(num_classes >= 1, "evaluate_occupancy: need at least one class");
    MetricReport report;
    report.iou.resize(num_classes);
    report.valid.resize(num_classes, 0);

    real acc = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
        bool valid = false;
        report.iou[k] = iou_per_class(pred, gt, std::uint16_t(k), &valid);
        report.valid[k] = valid ? 1 : 0;
        if (!valid) continue;
        if (k == 0 && !include_empty_class) continue;
        acc += report.iou[k];
        ++report.evaluated_classes;
    }
    require(report.evaluated_classes > 0,
            "evaluate_occupancy: no class with a nonempty union to average");
    report.miou = acc / real(report.evaluated_classes);
    return report;
}

std::string format_metric_table(const MetricReport& report) {
    std::string out = "class    iou\n";
    char line[64];
    for (std::size_t k = 0; k < report.iou.size(); ++k) {
        if (report.valid[k])
            std::snprintf(line, sizeof(line), "%5zu  %.4f\n", k, double(report.iou[k]));
        else
            std::snprintf(line, sizeof(line), "%5zu    skip\n", k);
        out += line;
    }
    std::snprintf(line, sizeof(line), " miou  %.4f  (%zu classes)\n",
                  double(report.miou), report.evaluated_classes);
    out += line;
    return out;
}

}  // namespace splatocc
