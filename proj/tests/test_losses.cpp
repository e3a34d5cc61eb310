// Training objective (cross-entropy + Lovász-softmax) and occupancy metrics.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "splatocc/gradsuite.hpp"
#include "splatocc/losses.hpp"

using namespace splatocc;

namespace {

#ifdef SPLATOCC_REAL32
constexpr real kTol = real(1e-4);
#else
constexpr real kTol = real(1e-12);
#endif

using Labels = std::vector<std::uint16_t>;

// Logits that put `margin` extra mass on each voxel's ground-truth class.
Tensor favoring_logits(const Labels& gt, std::size_t classes, real margin) {
    Tensor logits({gt.size(), classes});
    for (std::size_t v = 0; v < gt.size(); ++v) logits.at(v, gt[v]) = margin;
    return logits;
}

}  // namespace

TEST_CASE("cross-entropy hand values") {
    SUBCASE("uniform logits over four classes cost ln 4") {
        const Labels gt{0, 1, 2, 3, 1};
        const Tensor logits({5, 4});
        CHECK(ce_loss(logits, gt) == doctest::Approx(std::log(4.0)).epsilon(kTol));
    }

    SUBCASE("a 20-logit margin saturates toward zero") {
        const Labels gt{2, 0, 1, 1};
        CHECK(ce_loss(favoring_logits(gt, 3, real(20)), gt) <= real(1e-6));
    }

    SUBCASE("two voxels average their individual losses") {
        Tensor logits({2, 2});
        logits.at(0, 0) = std::log(real(2));  // p(correct) = 2/3
        logits.at(1, 1) = std::log(real(3));  // p(correct) = 3/4
        const Labels gt{0, 1};
        const real a = -std::log(real(2) / 3);
        const real b = -std::log(real(3) / 4);
        CHECK(ce_loss(logits, gt) == doctest::Approx((a + b) / 2).epsilon(kTol));

        Tensor weights({2});
        weights[0] = 1;
        weights[1] = 2;
        CHECK(ce_loss(logits, gt, &weights) ==
              doctest::Approx((a + 2 * b) / 3).epsilon(kTol));
    }

    SUBCASE("invalid arguments are rejected") {
        const Tensor logits({2, 3});
        CHECK_THROWS_AS(ce_loss(logits, Labels{0, 3}), validation_error);
        CHECK_THROWS_AS(ce_loss(logits, Labels{0}), validation_error);
        Tensor short_weights({2});
        CHECK_THROWS_AS(ce_loss(logits, Labels{0, 1}, &short_weights),
                        validation_error);
        Tensor zero_weights({3});
        CHECK_THROWS_AS(ce_loss(logits, Labels{0, 1}, &zero_weights),
                        validation_error);
    }
}

TEST_CASE("sorted-error Jaccard surrogate") {
    SUBCASE("hard-correct predictions cost nothing") {
        const Labels gt{0, 2, 1, 1, 0};
        const real loss = lovasz_softmax(favoring_logits(gt, 3, real(30)), gt);
        CHECK(std::abs(loss) <= real(1e-12));
        CHECK(std::abs(lovasz_softmax_reference(favoring_logits(gt, 3, real(30)), gt)) <=
              real(1e-12));
    }

    SUBCASE("two-voxel hand computation") {
        // p(voxel0) = (1/2, 1/2), p(voxel1) = (3/4, 1/4), gt = (0, 1).
        Tensor logits({2, 2});
        logits.at(1, 0) = std::log(real(3));
        const Labels gt{0, 1};

        // Class 0: errors (0.5, 0.75) -> sorted v1, v0 -> 0.75*(1/2) + 0.5*(1/2).
        // Class 1: errors (0.5, 0.75) -> sorted v1, v0 -> 0.75*1 + 0.5*0.
        const auto per_class = lovasz_softmax_per_class(logits, gt);
        REQUIRE(per_class.size() == 2);
        CHECK(per_class[0].first == 0);
        CHECK(per_class[0].second == doctest::Approx(0.625).epsilon(kTol));
        CHECK(per_class[1].first == 1);
        CHECK(per_class[1].second == doctest::Approx(0.75).epsilon(kTol));
        CHECK(lovasz_softmax(logits, gt) == doctest::Approx(0.6875).epsilon(kTol));
        CHECK(lovasz_softmax_reference(logits, gt) ==
              doctest::Approx(0.6875).epsilon(kTol));
    }

    SUBCASE("matches the set-function oracle on every small two-class fixture") {
        // Exhaustive over label patterns for one to eight voxels, twenty
        // random logit draws each.
        for (std::size_t voxels = 1; voxels <= 8; ++voxels) {
            for (std::size_t pattern = 0; pattern < (std::size_t(1) << voxels);
                 ++pattern) {
                Labels gt(voxels);
                for (std::size_t v = 0; v < voxels; ++v)
                    gt[v] = (pattern >> v) & 1u;
                for (unsigned draw = 0; draw < 20; ++draw) {
                    Rng rng(30000 + 7919 * voxels + 101 * pattern + draw);
                    const Tensor logits = randn_tensor(rng, {voxels, 2}, real(2));
                    const real fast = lovasz_softmax(logits, gt);
                    const real slow = lovasz_softmax_reference(logits, gt);
                    CHECK(std::abs(fast - slow) <= real(1e-12));
                }
            }
        }
    }

    SUBCASE("matches the set-function oracle on three-class fixtures") {
        for (unsigned s = 0; s < 50; ++s) {
            Rng rng(31000 + s);
            const Tensor logits = randn_tensor(rng, {12, 3}, real(2));
            Labels gt(12);
            for (auto& label : gt) label = std::uint16_t(rng.uniform_index(3));
            CHECK(std::abs(lovasz_softmax(logits, gt) -
                           lovasz_softmax_reference(logits, gt)) <= real(1e-12));
        }
    }

    SUBCASE("classes missing from the ground truth are skipped") {
        Rng rng(32000);
        const Tensor logits = randn_tensor(rng, {6, 3});
        const Labels gt{0, 1, 0, 1, 1, 0};  // class 2 absent
        const auto per_class = lovasz_softmax_per_class(logits, gt);
        REQUIRE(per_class.size() == 2);
        CHECK(per_class[0].first == 0);
        CHECK(per_class[1].first == 1);
        CHECK(lovasz_softmax(logits, gt) ==
              doctest::Approx((per_class[0].second + per_class[1].second) / 2)
                  .epsilon(kTol));
    }

    SUBCASE("per-class contributions stay inside the unit interval") {
        for (unsigned s = 0; s < 10; ++s) {
            Rng rng(33000 + s);
            const Tensor logits = randn_tensor(rng, {10, 4}, real(2));
            Labels gt(10);
            for (auto& label : gt) label = std::uint16_t(rng.uniform_index(4));
            for (const auto& [k, value] : lovasz_softmax_per_class(logits, gt)) {
                CHECK(value >= real(0));
                CHECK(value <= real(1) + real(1e-12));
            }
        }
    }
}

TEST_CASE("weighted total objective") {
    Rng rng(34000);
    const Tensor logits = randn_tensor(rng, {6, 4}, real(1.5));
    Labels gt(6);
    for (auto& label : gt) label = std::uint16_t(rng.uniform_index(4));

    SUBCASE("disabling one term leaves exactly the other") {
        CHECK(total_loss(logits, gt, {real(0.7), real(0)}) ==
              real(0.7) * ce_loss(logits, gt));
        CHECK(total_loss(logits, gt, {real(0), real(1.3)}) ==
              real(1.3) * lovasz_softmax(logits, gt));
    }

    SUBCASE("unit weights add the ln 4 cross-entropy fixture to its surrogate") {
        const Labels uniform_gt{0, 1, 2, 3};
        const Tensor uniform({4, 4});
        const real lov = lovasz_softmax(uniform, uniform_gt);
        CHECK(total_loss(uniform, uniform_gt, {1, 1}) ==
              doctest::Approx(std::log(4.0) + lov).epsilon(kTol));
    }

    SUBCASE("invalid weights are rejected") {
        CHECK_THROWS_AS(total_loss(logits, gt, {0, 0}), validation_error);
        CHECK_THROWS_AS(total_loss(logits, gt, {-1, 1}), validation_error);
    }
}

TEST_CASE("intersection-over-union") {
    SUBCASE("perfect overlap and disjoint sets") {
        const Labels gt{1, 1, 0, 2};
        CHECK(iou_per_class(gt, gt, 1) == real(1));
        const Labels pred{0, 0, 1, 1};
        const Labels gt2{1, 1, 0, 0};
        CHECK(iou_per_class(pred, gt2, 1) == real(0));
    }

    SUBCASE("hand confusion count gives 2/6") {
        // gt marks voxels 0-3, pred covers two of them plus two others.
        const Labels gt{1, 1, 1, 1, 0, 0, 0, 0};
        const Labels pred{1, 1, 0, 0, 1, 1, 0, 0};
        bool valid = false;
        CHECK(iou_per_class(pred, gt, 1, &valid) ==
              doctest::Approx(1.0 / 3.0).epsilon(kTol));
        CHECK(valid);
    }

    SUBCASE("an empty union is flagged and returns NaN") {
        const Labels gt{0, 0};
        bool valid = true;
        const real iou = iou_per_class(gt, gt, 3, &valid);
        CHECK_FALSE(valid);
        CHECK(std::isnan(iou));
    }
}

TEST_CASE("mean IoU") {
    SUBCASE("perfect prediction scores one") {
        const Labels gt{0, 1, 2, 1};
        CHECK(miou(gt, gt, {0, 1, 2}) == real(1));
    }

    SUBCASE("a perfect and a disjoint class average to one half") {
        const Labels gt{1, 1, 2, 2};
        const Labels pred{1, 1, 0, 0};
        // Class 1 matches exactly; class 2 appears in gt but never in pred,
        // so its union {2,3} is nonempty and its IoU is 0, not a skip.
        CHECK(miou(pred, gt, {1, 2}) == doctest::Approx(0.5).epsilon(kTol));
    }

    SUBCASE("empty-union classes are skipped") {
        const Labels gt{1, 1, 2, 2, 0, 0, 0, 0};
        const Labels pred{1, 1, 2, 0, 0, 0, 0, 0};
        // IoU: class1 = 1, class2 = 1/2, class3 skipped.
        CHECK(miou(pred, gt, {1, 2, 3}) == doctest::Approx(0.75).epsilon(kTol));
        CHECK_THROWS_AS(miou(pred, gt, {5}), validation_error);
    }

    SUBCASE("voxel order does not matter") {
        Rng rng(35000);
        const std::size_t n = 40;
        Labels gt(n), pred(n);
        for (std::size_t v = 0; v < n; ++v) {
            gt[v] = std::uint16_t(rng.uniform_index(4));
            pred[v] = std::uint16_t(rng.uniform_index(4));
        }
        const real direct = miou(pred, gt, {0, 1, 2, 3});
        const auto perm = rng.permutation(n);
        Labels gt_p(n), pred_p(n);
        for (std::size_t v = 0; v < n; ++v) {
            gt_p[v] = gt[perm[v]];
            pred_p[v] = pred[perm[v]];
        }
        CHECK(miou(pred_p, gt_p, {0, 1, 2, 3}) == direct);
        CHECK(miou(pred, pred, {0, 1, 2, 3}) == real(1));
    }
}

TEST_CASE("occupancy metric report") {
    const Labels gt{0, 0, 1, 1, 2, 2};
    const Labels pred{0, 1, 1, 1, 2, 0};
    // IoU: class0 = 1/3 (inter {0}, union {0,1,5}), class1 = 2/3
    // (inter {2,3}, union {1,2,3}), class2 = 1/2, class3 skipped.

    SUBCASE("empty class excluded by default") {
        const MetricReport r = evaluate_occupancy(pred, gt, 4);
        CHECK(r.evaluated_classes == 2);
        CHECK(r.miou ==
              doctest::Approx((2.0 / 3.0 + 0.5) / 2).epsilon(kTol));
        CHECK(r.iou[0] == doctest::Approx(1.0 / 3.0).epsilon(kTol));
        CHECK(r.valid[0] == 1);
        CHECK(r.valid[3] == 0);
        CHECK(std::isnan(r.iou[3]));
    }

    SUBCASE("flag folds the empty class back in") {
        const MetricReport r = evaluate_occupancy(pred, gt, 4, true);
        CHECK(r.evaluated_classes == 3);
        CHECK(r.miou ==
              doctest::Approx((1.0 / 3.0 + 2.0 / 3.0 + 0.5) / 3).epsilon(kTol));
    }

    SUBCASE("table lists every class and the mean") {
        const std::string table = format_metric_table(evaluate_occupancy(pred, gt, 4));
        CHECK(table.find("miou") != std::string::npos);
        CHECK(table.find("skip") != std::string::npos);
        CHECK(table.find("0.6667") != std::string::npos);
    }
}

TEST_CASE("loss gradients match finite differences") {
    const auto checks = gradcheck_losses(20);
    CHECK(!checks.empty());
    for (const auto& c : checks) {
        INFO(c.name, ": max err ", c.max_err, " tol ", c.tol);
        CHECK(c.pass);
    }
}
