#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN

#include <doctest.h>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "splatocc/gradsuite.hpp"
#include "splatocc/losses.hpp"
#include "splatocc/model.hpp"

using namespace splatocc;

namespace {

bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

bool all_zero(const Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (t[i] != 0) return false;
    return true;
}

// A two-voxel-per-axis world: big enough to exercise every stage, small
// enough that full forwards are effectively free.
ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.grid.origin = {-1, -1, -1};
    cfg.grid.voxel_size = 1;
    cfg.grid.extents = {2, 2, 2};
    cfg.grid.num_classes = 3;
    cfg.num_gaussians = 6;
    cfg.feat_dim = 4;
    cfg.cutoff_k = 10;
    cfg.ldfa_keypoints = 2;
    cfg.ldfa_chunks = 2;
    cfg.depth_planes = 2;
    cfg.camera_keypoints = 2;
    cfg.fusion = FusionMode::aclf;
    cfg.head_blocks = 1;
    cfg.head_state_dim = 2;
    cfg.head_pe_bands = 1;
    cfg.curve_bits = 2;
    cfg.loss.lambda_ce = 1;
    cfg.loss.lambda_lov = real(0.5);
    cfg.total_steps = 40;
    cfg.seed = 11;
    return cfg;
}

SceneParams tiny_scene_params() {
    SceneParams sp;
    sp.shapes.clear();
    ShapeSpec ground;
    ground.kind = ShapeKind::ground;
    ground.label = 1;
    ground.center = {0, 0, real(-0.5)};
    sp.shapes.push_back(ground);
    ShapeSpec box;
    box.kind = ShapeKind::box;
    box.label = 2;
    box.center = {real(0.5), real(0.5), real(0.5)};
    box.half = {real(0.5), real(0.5), real(0.5)};
    sp.shapes.push_back(box);
    sp.points_per_shape = 30;
    sp.point_noise = real(0.02);
    sp.lidar_origin = {0, 0, real(0.9)};
    sp.image_height = 4;
    sp.image_width = 4;
    sp.camera_pos = {-3, -3, 2};
    sp.camera_look = {0, 0, 0};
    sp.camera_fov_deg = 60;
    return sp;
}

}  // namespace

TEST_CASE("parameter registry") {
    ModelConfig cfg = tiny_config();
    Rng rng(5);
    ModelParams p = make_model_params(cfg, rng);
    auto regs = parameter_registry(p);

    SUBCASE("names are unique and the order is stable") {
        std::set<std::string> names;
        for (const auto& r : regs) names.insert(r.name);
        CHECK(names.size() == regs.size());
        auto again = parameter_registry(p);
        REQUIRE(again.size() == regs.size());
        for (std::size_t i = 0; i < regs.size(); ++i) {
            CHECK(again[i].name == regs[i].name);
            CHECK(again[i].value == regs[i].value);
            CHECK(again[i].count == regs[i].count);
        }
    }

    SUBCASE("counts match the underlying tensors") {
        std::size_t total = 0;
        for (const auto& r : regs) {
            CHECK(r.count > 0);
            total += r.count;
        }
        CHECK(total == parameter_count(p));
        for (const auto& r : regs) {
            if (r.name == "gaussians.means") CHECK(r.count == cfg.num_gaussians * 3);
            if (r.name == "gaussians.rotations") CHECK(r.count == cfg.num_gaussians * 4);
            if (r.name == "smooth.epsilon") CHECK(r.count == 1);
            if (r.name == "head.delta.w")
                CHECK(r.count == (11 + cfg.grid.num_classes) * cfg.feat_dim);
        }
    }

    SUBCASE("entries alias the live parameters and gradients") {
        p.ldfa.g_alpha_logit = 7;
        p.g_epsilon = 3;
        bool saw_alpha = false, saw_eps = false;
        for (const auto& r : regs) {
            if (r.name == "lidar.alpha_logit") {
                CHECK(*r.grad == 7);
                saw_alpha = true;
            }
            if (r.name == "smooth.epsilon") {
                CHECK(*r.grad == 3);
                saw_eps = true;
            }
        }
        CHECK(saw_alpha);
        CHECK(saw_eps);
    }

    SUBCASE("zero_grad clears every accumulator") {
        for (auto& r : regs)
            for (std::size_t i = 0; i < r.count; ++i) r.grad[i] = real(1.5);
        p.zero_grad();
        for (const auto& r : regs)
            for (std::size_t i = 0; i < r.count; ++i) CHECK(r.grad[i] == 0);
        CHECK(p.g_epsilon == 0);
        CHECK(all_zero(p.g_initial.means));
        CHECK(all_zero(p.g_initial.features));
    }
}

TEST_CASE("model initialization") {
    ModelConfig cfg = tiny_config();

    SUBCASE("gaussians start neutral inside the grid") {
        Rng rng(5);
        ModelParams p = make_model_params(cfg, rng);
        const real expected_log = std::log(real(1.5) * cfg.grid.voxel_size);
        for (std::size_t i = 0; i < cfg.num_gaussians; ++i) {
            for (std::size_t a = 0; a < 3; ++a) {
                const real lo = cfg.grid.origin[a];
                const real hi = lo + real(cfg.grid.extents[a]) * cfg.grid.voxel_size;
                CHECK(p.initial.means.at(i, a) >= lo);
                CHECK(p.initial.means.at(i, a) < hi);
            }
            CHECK(p.initial.rotations.at(i, 0) == 1);
            CHECK(p.initial.rotations.at(i, 1) == 0);
            for (std::size_t a = 0; a < 3; ++a)
                CHECK(p.initial.log_scales.at(i, a) == expected_log);
        }
        CHECK(all_zero(p.initial.opacity_logits));
        CHECK(all_zero(p.initial.class_logits));
        CHECK(all_zero(p.initial.features));
    }

    SUBCASE("residual outputs start silent, inner layers do not") {
        Rng rng(5);
        ModelParams p = make_model_params(cfg, rng);
        CHECK(all_zero(p.head.delta.w));
        CHECK(all_zero(p.camera.embed.w));
        CHECK(all_zero(p.camera.offset_map.w));
        CHECK(all_zero(p.ldfa.offset_map.w));
        CHECK(all_zero(p.fusion.gate2.w));
        CHECK(all_zero(p.pre_lidar.fc2.w));
        CHECK(all_zero(p.post.fc2.w));
        CHECK(!all_zero(p.pre_lidar.fc1.w));
        CHECK(!all_zero(p.ldfa.encoder.embed.w));
        CHECK(!all_zero(p.fusion.q_l.w));
        CHECK(!all_zero(p.head.embed.w));
        CHECK(!all_zero(p.head.blocks[0].scan.w_b));
    }

    SUBCASE("same seed reproduces, different seed differs") {
        Rng a(5), b(5), c(6);
        ModelParams pa = make_model_params(cfg, a);
        ModelParams pb = make_model_params(cfg, b);
        ModelParams pc = make_model_params(cfg, c);
        CHECK(tensors_equal(pa.initial.means, pb.initial.means));
        CHECK(tensors_equal(pa.fusion.q_l.w, pb.fusion.q_l.w));
        CHECK(tensors_equal(pa.head.embed.w, pb.head.embed.w));
        CHECK(!tensors_equal(pa.initial.means, pc.initial.means));
    }

    SUBCASE("toggles do not disturb the draw sequence") {
        ModelConfig off = cfg;
        off.use_camera = false;
        off.use_ldfa = false;
        off.use_ebfs = false;
        off.use_head = false;
        off.fusion = FusionMode::add;
        Rng a(5), b(5);
        ModelParams pa = make_model_params(cfg, a);
        ModelParams pb = make_model_params(off, b);
        CHECK(tensors_equal(pa.initial.means, pb.initial.means));
        CHECK(tensors_equal(pa.head.blocks[0].in_proj.w, pb.head.blocks[0].in_proj.w));
        CHECK(tensors_equal(pa.fusion.concat_proj.w, pb.fusion.concat_proj.w));
    }
}

TEST_CASE("forward pass") {
    ModelConfig cfg = tiny_config();
    const SyntheticScene scene = generate_scene(cfg.grid, tiny_scene_params(), 21);
    Rng init(5);
    ModelParams p = make_model_params(cfg, init);

    SUBCASE("eval mode is deterministic and draws nothing") {
        Rng r1(100), r2(999);
        const VoxelGrid a = model_forward(p, cfg, scene, false, r1);
        const VoxelGrid b = model_forward(p, cfg, scene, false, r2);
        CHECK(tensors_equal(a.logits, b.logits));
        CHECK(a.labels == b.labels);
        CHECK(r1.state() == Rng(100).state());  // untouched
    }

    SUBCASE("train mode reproduces under an identical rng state") {
        Rng r1(100), r2(100);
        const VoxelGrid a = model_forward(p, cfg, scene, true, r1);
        const VoxelGrid b = model_forward(p, cfg, scene, true, r2);
        CHECK(tensors_equal(a.logits, b.logits));
        CHECK(r1.state() == r2.state());
        CHECK(r1.state() != Rng(100).state());  // train mode consumed draws
    }

    SUBCASE("silent camera stream equals the disabled camera at init") {
        ModelConfig off = cfg;
        off.use_camera = false;
        Rng r(0);
        const VoxelGrid a = model_forward(p, cfg, scene, false, r);
        const VoxelGrid b = model_forward(p, off, scene, false, r);
        CHECK(tensors_equal(a.logits, b.logits));
    }

    SUBCASE("zero smoothing strength equals the disabled smoother") {
        ModelConfig on = cfg;
        on.ebfs_epsilon_init = 0;
        ModelConfig off = on;
        off.use_ebfs = false;
        Rng ia(5), ib(5);
        ModelParams pa = make_model_params(on, ia);
        ModelParams pb = make_model_params(off, ib);
        Rng r(0);
        const VoxelGrid a = model_forward(pa, on, scene, false, r);
        const VoxelGrid b = model_forward(pb, off, scene, false, r);
        CHECK(tensors_equal(a.logits, b.logits));
    }

    SUBCASE("zero-delta head equals the disabled head") {
        ModelConfig off = cfg;
        off.use_head = false;
        Rng r(0);
        const VoxelGrid a = model_forward(p, cfg, scene, false, r);
        const VoxelGrid b = model_forward(p, off, scene, false, r);
        CHECK(tensors_equal(a.logits, b.logits));
    }

    SUBCASE("additive fusion with a silent camera passes the LiDAR stream through") {
        ModelConfig add = cfg;
        add.fusion = FusionMode::add;
        add.use_camera = false;
        add.use_ebfs = false;
        PipelineCache cache;
        Rng r(0);
        model_forward(p, add, scene, false, r, &cache);
        CHECK(tensors_equal(cache.fused, cache.f_l_sm));
        CHECK(all_zero(cache.f_c_sm));
    }

    SUBCASE("plain LiDAR lift runs and stays finite") {
        ModelConfig plain = cfg;
        plain.use_ldfa = false;
        Rng r(0);
        const VoxelGrid a = model_forward(p, plain, scene, false, r);
        CHECK(all_finite(a.logits));
        CHECK(a.labels.size() == cfg.grid.voxel_count());
    }

    SUBCASE("volume and curve cover the grid") {
        const VolumeSpec vs = volume_spec_for(cfg.grid, cfg.depth_planes);
        CHECK(vs.width == cfg.grid.extents[0]);
        CHECK(vs.height == cfg.grid.extents[1]);
        CHECK(vs.depth == cfg.depth_planes);
        CHECK(vs.cell_size[0] == cfg.grid.voxel_size);
        CHECK(vs.cell_size[2] ==
              real(cfg.grid.extents[2]) * cfg.grid.voxel_size / real(cfg.depth_planes));
        const OrderingCurve curve = ordering_curve_for(cfg.grid, cfg.curve_bits);
        CHECK(curve.lo[0] == cfg.grid.origin[0]);
        CHECK(curve.hi[2] ==
              cfg.grid.origin[2] + real(cfg.grid.extents[2]) * cfg.grid.voxel_size);
        CHECK(curve.bits == cfg.curve_bits);
    }
}

TEST_CASE("end-to-end gradients match finite differences") {
    const auto checks = gradcheck_pipeline();
    CHECK(checks.size() > 80);  // three variants, every parameter group
    for (const auto& c : checks) {
        INFO(c.name, ": max_err=", c.max_err, " tol=", c.tol);
        CHECK(c.pass);
    }
}
