#include "splatocc/model.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace splatocc {

namespace {

// Fan-based uniform fill for layers that need symmetry breaking; biases stay
// zero.
void glorot(Linear& l, Rng& rng) {
    const real lim = std::sqrt(real(6) / real(l.in_dim() + l.out_dim()));
    for (std::size_t i = 0; i < l.w.size(); ++i) l.w[i] = rng.uniform(-lim, lim);
}

}  // namespace

ModelParams make_model_params(const ModelConfig& cfg, Rng& rng) {
    const std::size_t d = cfg.feat_dim;
    const std::size_t classes = cfg.grid.num_classes;
    require(d > 0 && classes >= 2, "model: need a feature width and >= 2 classes");
    require(cfg.num_gaussians > 0, "model: need at least one gaussian");
    require(cfg.depth_planes >= cfg.ldfa_chunks && cfg.ldfa_chunks >= 1,
            "model: need at least one depth plane per chunk");

    ModelParams p;

    // Learnable scene state: anchors spread uniformly over the grid, modest
    // isotropic extent, neutral colors/opacity so the first predictions are
    // driven entirely by what training writes into them.
    p.initial = make_gaussian_set(cfg.num_gaussians, classes, d);
    const auto& g = cfg.grid;
    for (std::size_t i = 0; i < cfg.num_gaussians; ++i)
        for (std::size_t a = 0; a < 3; ++a)
            p.initial.means.at(i, a) = rng.uniform(
                g.origin[a], g.origin[a] + real(g.extents[a]) * g.voxel_size);
    for (std::size_t i = 0; i < cfg.num_gaussians; ++i) p.initial.rotations.at(i, 0) = 1;
    p.initial.log_scales.fill(std::log(real(1.5) * g.voxel_size));
    p.g_initial = zeros_like(p.initial);

    // Camera lift: the image embed starts at zero so the camera stream starts
    // silent (and use_camera=false is exactly the zero-embed path at init).
    p.camera = CameraLiftParams(d, classes, d, cfg.camera_keypoints);

    // LiDAR lift: randomize the encoder so the stream carries signal from the
    // first step; offset/weight maps keep their zero (anchor-centered,
    // uniform-weight) start.
    p.ldfa = LdfaParams(d, d, cfg.depth_planes, cfg.ldfa_keypoints);
    glorot(p.ldfa.encoder.embed, rng);
    glorot(p.ldfa.encoder.refine.fc1, rng);
    glorot(p.ldfa.mod.wq, rng);
    glorot(p.ldfa.mod.wk, rng);
    glorot(p.ldfa.mod.wv, rng);

    p.pre_lidar = RefineBlock(d, 2 * d);
    glorot(p.pre_lidar.fc1, rng);
    p.pre_camera = RefineBlock(d, 2 * d);
    glorot(p.pre_camera.fc1, rng);

    p.epsilon = cfg.ebfs_epsilon_init;

    // Fusion: every projection random, the gate output layer zero so the mix
    // starts at the neutral halfway blend.
    p.fusion = FusionParams(d, d);
    glorot(p.fusion.q_l, rng);
    glorot(p.fusion.k_c, rng);
    glorot(p.fusion.v_c, rng);
    glorot(p.fusion.q_c, rng);
    glorot(p.fusion.k_l, rng);
    glorot(p.fusion.v_l, rng);
    glorot(p.fusion.gate1, rng);
    glorot(p.fusion.proj_c, rng);
    glorot(p.fusion.proj_l, rng);
    glorot(p.fusion.concat_proj, rng);

    p.post = RefineBlock(d, 2 * d);
    glorot(p.post.fc1, rng);

    // Head: random embed and scan internals, zero delta layer so refinement
    // starts as the identity on the set.
    p.head = GaussMambaHead(d, classes, cfg.head_blocks, cfg.head_state_dim,
                            cfg.head_pe_bands);
    glorot(p.head.embed, rng);
    for (auto& blk : p.head.blocks) {
        glorot(blk.in_proj, rng);
        glorot(blk.out_proj, rng);
        const real lim = std::sqrt(real(6) / real(d + blk.scan.state_dim()));
        for (std::size_t i = 0; i < blk.scan.w_delta.size(); ++i)
            blk.scan.w_delta[i] = rng.uniform(-lim, lim);
        for (std::size_t i = 0; i < blk.scan.w_b.size(); ++i)
            blk.scan.w_b[i] = rng.uniform(-lim, lim);
        for (std::size_t i = 0; i < blk.scan.w_c.size(); ++i)
            blk.scan.w_c[i] = rng.uniform(-lim, lim);
    }

    return p;
}

// ---------------------------------------------------------------------------
// Registry.
// ---------------------------------------------------------------------------

namespace {

void add(std::vector<ParamRef>& out, std::string name, Tensor& v, Tensor& g) {
    require(v.size() == g.size(), "registry: value/grad size mismatch for " + name);
    out.push_back({std::move(name), v.data(), g.data(), v.size()});
}

void add(std::vector<ParamRef>& out, std::string name, real& v, real& g) {
    out.push_back({std::move(name), &v, &g, 1});
}

void add(std::vector<ParamRef>& out, const std::string& prefix, Linear& l) {
    add(out, prefix + ".w", l.w, l.gw);
    add(out, prefix + ".b", l.b, l.gb);
}

void add(std::vector<ParamRef>& out, const std::string& prefix, RefineBlock& r) {
    add(out, prefix + ".ln_gain", r.ln_gain, r.g_ln_gain);
    add(out, prefix + ".ln_bias", r.ln_bias, r.g_ln_bias);
    add(out, prefix + ".fc1", r.fc1);
    add(out, prefix + ".fc2", r.fc2);
}

void add(std::vector<ParamRef>& out, const std::string& prefix, MambaBlock& b) {
    add(out, prefix + ".ln_gain", b.ln_gain, b.g_ln_gain);
    add(out, prefix + ".ln_bias", b.ln_bias, b.g_ln_bias);
    add(out, prefix + ".in_proj", b.in_proj);
    add(out, prefix + ".out_proj", b.out_proj);
    add(out, prefix + ".scan.a_log", b.scan.a_log, b.scan.g_a_log);
    add(out, prefix + ".scan.w_delta", b.scan.w_delta, b.scan.g_w_delta);
    add(out, prefix + ".scan.b_delta", b.scan.b_delta, b.scan.g_b_delta);
    add(out, prefix + ".scan.w_b", b.scan.w_b, b.scan.g_w_b);
    add(out, prefix + ".scan.w_c", b.scan.w_c, b.scan.g_w_c);
    add(out, prefix + ".scan.d_skip", b.scan.d_skip, b.scan.g_d_skip);
}

}  // namespace

std::vector<ParamRef> parameter_registry(ModelParams& p) {
    std::vector<ParamRef> out;
    add(out, "gaussians.means", p.initial.means, p.g_initial.means);
    add(out, "gaussians.rotations", p.initial.rotations, p.g_initial.rotations);
    add(out, "gaussians.log_scales", p.initial.log_scales, p.g_initial.log_scales);
    add(out, "gaussians.opacity_logits", p.initial.opacity_logits,
        p.g_initial.opacity_logits);
    add(out, "gaussians.class_logits", p.initial.class_logits, p.g_initial.class_logits);
    add(out, "gaussians.features", p.initial.features, p.g_initial.features);

    add(out, "camera.embed", p.camera.embed);
    add(out, "camera.offset_map", p.camera.offset_map);
    add(out, "camera.weight_map", p.camera.weight_map);

    add(out, "lidar.encoder.refine", p.ldfa.encoder.refine);
    add(out, "lidar.encoder.embed", p.ldfa.encoder.embed);
    add(out, "lidar.offset_map", p.ldfa.offset_map);
    add(out, "lidar.weight_map", p.ldfa.weight_map);
    add(out, "lidar.mod.wq", p.ldfa.mod.wq);
    add(out, "lidar.mod.wk", p.ldfa.mod.wk);
    add(out, "lidar.mod.wv", p.ldfa.mod.wv);
    add(out, "lidar.alpha_logit", p.ldfa.alpha_logit, p.ldfa.g_alpha_logit);

    add(out, "pre_lidar", p.pre_lidar);
    add(out, "pre_camera", p.pre_camera);

    add(out, "smooth.epsilon", p.epsilon, p.g_epsilon);

    add(out, "fusion.q_l", p.fusion.q_l);
    add(out, "fusion.k_c", p.fusion.k_c);
    add(out, "fusion.v_c", p.fusion.v_c);
    add(out, "fusion.q_c", p.fusion.q_c);
    add(out, "fusion.k_l", p.fusion.k_l);
    add(out, "fusion.v_l", p.fusion.v_l);
    add(out, "fusion.gate1", p.fusion.gate1);
    add(out, "fusion.gate2", p.fusion.gate2);
    add(out, "fusion.proj_c", p.fusion.proj_c);
    add(out, "fusion.proj_l", p.fusion.proj_l);
    add(out, "fusion.consist_scale", p.fusion.consist_scale, p.fusion.g_consist_scale);
    add(out, "fusion.consist_bias", p.fusion.consist_bias, p.fusion.g_consist_bias);
    add(out, "fusion.concat_proj", p.fusion.concat_proj);

    add(out, "post", p.post);

    add(out, "head.embed", p.head.embed);
    for (std::size_t b = 0; b < p.head.blocks.size(); ++b)
        add(out, "head.block" + std::to_string(b), p.head.blocks[b]);
    add(out, "head.delta", p.head.delta);
    return out;
}

std::size_t parameter_count(ModelParams& p) {
    std::size_t n = 0;
    for (const auto& r : parameter_registry(p)) n += r.count;
    return n;
}

void ModelParams::zero_grad() {
    for (auto& r : parameter_registry(*this))
        std::fill(r.grad, r.grad + r.count, real(0));
}

// ---------------------------------------------------------------------------
// Forward / backward.
// ---------------------------------------------------------------------------

VolumeSpec volume_spec_for(const GridSpec& grid, std::size_t depth_planes) {
    require(depth_planes >= 1, "volume spec: need at least one depth plane");
    VolumeSpec v;
    v.origin = grid.origin;
    v.depth = depth_planes;
    v.height = grid.extents[1];
    v.width = grid.extents[0];
    v.cell_size = {grid.voxel_size, grid.voxel_size,
                   real(grid.extents[2]) * grid.voxel_size / real(depth_planes)};
    return v;
}

OrderingCurve ordering_curve_for(const GridSpec& grid, unsigned bits) {
    OrderingCurve curve;
    for (std::size_t a = 0; a < 3; ++a) {
        curve.lo[a] = grid.origin[a];
        curve.hi[a] = grid.origin[a] + real(grid.extents[a]) * grid.voxel_size;
    }
    curve.bits = bits;
    return curve;
}

namespace {

// Continuous plane coordinate matching the deformable path's convention:
// integer values land on cell centers.
real plane_coord(real x, real origin, real cell) { return (x - origin) / cell - real(0.5); }

// Non-deformable LiDAR lift: encode the pooled volume, then average a plain
// bilinear read over all depth planes at each anchor's (x, y).
Tensor plain_lift(const GaussianSet& set, const FeatureVolume& raw,
                  const VolumeEncoder& enc, PipelineCache* cache) {
    FeatureVolume vol = encode_volume(raw, enc, cache ? &cache->plain_enc : nullptr);
    const std::size_t n = set.size(), c_n = vol.channels(), d_n = vol.spec.depth;
    Tensor base({n, 2});
    Tensor out({n, c_n});
    std::vector<real> sample(c_n);
    for (std::size_t i = 0; i < n; ++i) {
        const real u = plane_coord(set.means.at(i, 0), vol.spec.origin[0], vol.spec.cell_size[0]);
        const real v = plane_coord(set.means.at(i, 1), vol.spec.origin[1], vol.spec.cell_size[1]);
        base.at(i, 0) = u;
        base.at(i, 1) = v;
        for (std::size_t d = 0; d < d_n; ++d) {
            bilinear_sample(vol.values, d, u, v, sample.data());
            for (std::size_t ch = 0; ch < c_n; ++ch) out.at(i, ch) += sample[ch] / real(d_n);
        }
    }
    if (cache) {
        cache->plain_vol = std::move(vol);
        cache->plain_base = std::move(base);
    }
    return out;
}

void plain_lift_backward(ModelParams& p, const PipelineCache& c, const Tensor& g_out) {
    const FeatureVolume& vol = c.plain_vol;
    const std::size_t n = g_out.dim(0), c_n = vol.channels(), d_n = vol.spec.depth;
    Tensor g_values(vol.values.shape());
    std::vector<real> g_row(c_n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < c_n; ++ch) g_row[ch] = g_out.at(i, ch) / real(d_n);
        real gu = 0, gv = 0;
        for (std::size_t d = 0; d < d_n; ++d)
            bilinear_sample_backward(vol.values, d, c.plain_base.at(i, 0),
                                     c.plain_base.at(i, 1), g_row.data(), &g_values, gu, gv);
        p.g_initial.means.at(i, 0) += gu / vol.spec.cell_size[0];
        p.g_initial.means.at(i, 1) += gv / vol.spec.cell_size[1];
    }
    encode_volume_backward(p.ldfa.encoder, c.plain_enc, g_values);
}

}  // namespace

VoxelGrid model_forward(const ModelParams& p, const ModelConfig& cfg,
                        const SyntheticScene& scene, bool train, Rng& rng,
                        PipelineCache* cache) {
    PipelineCache local;
    PipelineCache& c = cache ? *cache : local;
    const std::size_t n = p.initial.size(), d = cfg.feat_dim;
    require(n > 0, "model_forward: empty gaussian set");
    require(p.initial.feat_dim() == d, "model_forward: feature width mismatch");

    // LiDAR stream. The chunk permutation is the first train-mode draw.
    c.raw = point_cloud_to_volume(scene.points, volume_spec_for(cfg.grid, cfg.depth_planes));
    if (cfg.use_ldfa) {
        c.plan = make_chunk_plan(cfg.depth_planes, cfg.ldfa_chunks, train, rng);
        c.f_lidar = ldfa_lift(p.initial, c.raw, p.ldfa, c.plan, cache ? &c.ldfa : nullptr);
    } else {
        c.f_lidar = plain_lift(p.initial, c.raw, p.ldfa.encoder, cache);
    }

    // Camera stream (all-zero when the camera is disabled).
    if (cfg.use_camera)
        c.f_camera = camera_lift(p.initial, scene.camera, p.camera, cache ? &c.camera : nullptr);
    else
        c.f_camera = Tensor({n, d});

    c.f_l_ref = p.pre_lidar.forward(c.f_lidar, cache ? &c.pre_l : nullptr);
    c.f_c_ref = p.pre_camera.forward(c.f_camera, cache ? &c.pre_c : nullptr);

    // Smoothing (the gate Bernoulli is the second train-mode draw).
    if (cfg.use_ebfs) {
        auto smoothed = smooth(c.f_c_ref, c.f_l_ref, cfg.ebfs, p.epsilon, train, rng,
                               cache ? &c.smooth : nullptr);
        c.f_c_sm = std::move(smoothed.first);
        c.f_l_sm = std::move(smoothed.second);
    } else {
        c.f_c_sm = c.f_c_ref;
        c.f_l_sm = c.f_l_ref;
        c.smooth = SmoothCache{};
    }

    c.fused = fuse(c.f_c_sm, c.f_l_sm, p.fusion, cfg.fusion, cache ? &c.fuse : nullptr);
    c.f_final = p.post.forward(c.fused, cache ? &c.post : nullptr);

    // The working set keeps the learnable geometry and carries the fused
    // features into the sequence head.
    c.working = p.initial;
    c.working.features = c.f_final;
    c.curve = ordering_curve_for(cfg.grid, cfg.curve_bits);
    c.refined = cfg.use_head
                    ? gauss_mamba_refine(c.working, c.curve, p.head, cache ? &c.head : nullptr)
                    : c.working;

    return predict_occupancy(c.refined, cfg.grid, cfg.cutoff_k);
}

void model_backward(ModelParams& p, const ModelConfig& cfg,
                    const SyntheticScene& scene, const PipelineCache& c,
                    const Tensor& g_logits) {
    const std::size_t n = p.initial.size(), d = cfg.feat_dim;

    GaussianSet g_refined = zeros_like(c.refined);
    splat_backward(c.refined, cfg.grid, cfg.cutoff_k, g_logits, g_refined);

    GaussianSet g_working = zeros_like(c.working);
    if (cfg.use_head)
        gauss_mamba_backward(p.head, c.working, c.curve, c.head, g_refined, g_working);
    else
        g_working = std::move(g_refined);

    // The working set took geometry from the learnable set and features from
    // the pipeline; split its gradient accordingly.
    p.g_initial.means += g_working.means;
    p.g_initial.rotations += g_working.rotations;
    p.g_initial.log_scales += g_working.log_scales;
    p.g_initial.opacity_logits += g_working.opacity_logits;
    p.g_initial.class_logits += g_working.class_logits;

    Tensor g_fused({n, d});
    p.post.backward(c.post, g_working.features, g_fused);

    Tensor g_fcsm({n, d}), g_flsm({n, d});
    fuse_backward(p.fusion, c.fuse, g_fused, g_fcsm, g_flsm);

    Tensor g_fcref({n, d}), g_flref({n, d});
    if (cfg.use_ebfs)
        smooth_backward(c.f_c_ref, c.f_l_ref, cfg.ebfs, p.epsilon, c.smooth, g_fcsm,
                        g_flsm, g_fcref, g_flref, p.g_epsilon);
    else {
        g_fcref = std::move(g_fcsm);
        g_flref = std::move(g_flsm);
    }

    Tensor g_fcam({n, d}), g_flid({n, d});
    p.pre_camera.backward(c.pre_c, g_fcref, g_fcam);
    p.pre_lidar.backward(c.pre_l, g_flref, g_flid);

    // Anchor-position and raw-feature gradients accumulate into the set.
    if (cfg.use_camera)
        camera_lift_backward(p.camera, p.initial, scene.camera, c.camera, g_fcam,
                             p.g_initial);
    if (cfg.use_ldfa)
        ldfa_lift_backward(p.ldfa, p.initial, c.ldfa, g_flid, p.g_initial);
    else
        plain_lift_backward(p, c, g_flid);
}

}  // namespace splatocc
