#include "splatocc/ldfa.hpp"

#include <cmath>

namespace splatocc {

// ---------------------------------------------------------------------------
// Pooling.
// ---------------------------------------------------------------------------

FeatureVolume point_cloud_to_volume(const std::vector<LidarPoint>& points,
                                    const VolumeSpec& spec) {
    require(spec.depth > 0 && spec.height > 0 && spec.width > 0,
            "point_cloud_to_volume: empty volume spec");
    FeatureVolume vol;
    vol.spec = spec;
    vol.values = Tensor({3, spec.depth, spec.height, spec.width});
    std::vector<std::uint32_t> counts(spec.cell_count(), 0);

    const std::size_t hw = spec.height * spec.width;
    for (const LidarPoint& pt : points) {
        const real fx = (pt.x - spec.origin[0]) / spec.cell_size[0];
        const real fy = (pt.y - spec.origin[1]) / spec.cell_size[1];
        const real fz = (pt.z - spec.origin[2]) / spec.cell_size[2];
        if (fx < 0 || fy < 0 || fz < 0) continue;
        const std::size_t ix = std::size_t(fx), iy = std::size_t(fy),
                          iz = std::size_t(fz);
        if (ix >= spec.width || iy >= spec.height || iz >= spec.depth) continue;
        const std::size_t cell = iz * hw + iy * spec.width + ix;
        vol.values[0 * spec.cell_count() + cell] += pt.intensity;
        vol.values[1 * spec.cell_count() + cell] += real(1);
        vol.values[2 * spec.cell_count() + cell] += pt.z;
        ++counts[cell];
    }
    for (std::size_t cell = 0; cell < counts.size(); ++cell) {
        if (counts[cell] == 0) continue;
        for (std::size_t c = 0; c < 3; ++c)
            vol.values[c * spec.cell_count() + cell] /= real(counts[cell]);
    }
    return vol;
}

// ---------------------------------------------------------------------------
// Volume encoder.
// ---------------------------------------------------------------------------

VolumeEncoder::VolumeEncoder(std::size_t channels)
    : refine(3, 6), embed(channels, 3) {}

void VolumeEncoder::zero_grad() {
    refine.zero_grad();
    embed.zero_grad();
}

FeatureVolume encode_volume(const FeatureVolume& raw, const VolumeEncoder& enc,
                            VolumeEncodeCache* cache) {
    require(raw.channels() == 3, "encode_volume: expected 3 pooled channels");
    const std::size_t cells = raw.spec.cell_count(), c_out = enc.channels();

    // (3, D, H, W) -> (cells, 3)
    Tensor rows({cells, 3});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < cells; ++i)
            rows.at(i, c) = raw.values[c * cells + i];

    RefineCache rcache;
    Tensor refined = enc.refine.forward(rows, cache ? &rcache : nullptr);
    Tensor embedded = enc.embed.forward(refined);  // (cells, C)

    FeatureVolume out;
    out.spec = raw.spec;
    out.values = Tensor({c_out, raw.spec.depth, raw.spec.height, raw.spec.width});
    for (std::size_t c = 0; c < c_out; ++c)
        for (std::size_t i = 0; i < cells; ++i)
            out.values[c * cells + i] = embedded.at(i, c);

    if (cache) {
        cache->cells = std::move(rows);
        cache->refine = std::move(rcache);
        cache->refined = std::move(refined);
    }
    return out;
}

void encode_volume_backward(VolumeEncoder& enc, const VolumeEncodeCache& cache,
                            const Tensor& g_values) {
    const std::size_t cells = cache.cells.dim(0), c_out = enc.channels();
    Tensor g_embedded({cells, c_out});
    for (std::size_t c = 0; c < c_out; ++c)
        for (std::size_t i = 0; i < cells; ++i)
            g_embedded.at(i, c) = g_values[c * cells + i];

    Tensor g_refined({cells, 3});
    enc.embed.backward(cache.refined, g_embedded, &g_refined);
    Tensor g_cells({cells, 3});  // pooled cells are data; gradient stops here
    enc.refine.backward(cache.refine, g_refined, g_cells);
}

// ---------------------------------------------------------------------------
// Sampling.
// ---------------------------------------------------------------------------

void bilinear_sample(const Tensor& values, std::size_t plane, real u, real v,
                     real* out) {
    const std::size_t c_n = values.dim(0), h = values.dim(2), w = values.dim(3);
    for (std::size_t c = 0; c < c_n; ++c) out[c] = 0;
    if (!std::isfinite(u) || !std::isfinite(v)) return;

    const real fj = std::floor(u), fi = std::floor(v);
    const real du = u - fj, dv = v - fi;
    const long long j0 = (long long)fj, i0 = (long long)fi;
    const real wts[4] = {(1 - dv) * (1 - du), (1 - dv) * du, dv * (1 - du),
                         dv * du};
    const long long ii[4] = {i0, i0, i0 + 1, i0 + 1};
    const long long jj[4] = {j0, j0 + 1, j0, j0 + 1};
    for (int corner = 0; corner < 4; ++corner) {
        if (ii[corner] < 0 || jj[corner] < 0 || ii[corner] >= (long long)h ||
            jj[corner] >= (long long)w)
            continue;  // zero padding
        const std::size_t base =
            (plane * h + std::size_t(ii[corner])) * w + std::size_t(jj[corner]);
        const std::size_t stride = values.dim(1) * h * w;
        for (std::size_t c = 0; c < c_n; ++c)
            out[c] += wts[corner] * values[c * stride + base];
    }
}

void bilinear_sample_backward(const Tensor& values, std::size_t plane, real u,
                              real v, const real* g_out, Tensor* g_values,
                              real& g_u, real& g_v) {
    const std::size_t c_n = values.dim(0), h = values.dim(2), w = values.dim(3);
    if (!std::isfinite(u) || !std::isfinite(v)) return;

    const real fj = std::floor(u), fi = std::floor(v);
    const real du = u - fj, dv = v - fi;
    const long long j0 = (long long)fj, i0 = (long long)fi;
    const real wts[4] = {(1 - dv) * (1 - du), (1 - dv) * du, dv * (1 - du),
                         dv * du};
    // d(weight)/du and /dv per corner.
    const real wu[4] = {-(1 - dv), (1 - dv), -dv, dv};
    const real wv[4] = {-(1 - du), -du, (1 - du), du};
    const long long ii[4] = {i0, i0, i0 + 1, i0 + 1};
    const long long jj[4] = {j0, j0 + 1, j0, j0 + 1};
    const std::size_t stride = values.dim(1) * h * w;
    for (int corner = 0; corner < 4; ++corner) {
        if (ii[corner] < 0 || jj[corner] < 0 || ii[corner] >= (long long)h ||
            jj[corner] >= (long long)w)
            continue;
        const std::size_t base =
            (plane * h + std::size_t(ii[corner])) * w + std::size_t(jj[corner]);
        for (std::size_t c = 0; c < c_n; ++c) {
            const real val = values[c * stride + base];
            g_u += g_out[c] * wu[corner] * val;
            g_v += g_out[c] * wv[corner] * val;
            if (g_values) (*g_values)[c * stride + base] += g_out[c] * wts[corner];
        }
    }
}

void deformable_sample(const Tensor& values, std::size_t plane, real base_u,
                       real base_v, const Tensor& offsets, const Tensor& weights,
                       real* out) {
    const std::size_t c_n = values.dim(0), p = weights.size();
    require(offsets.rank() == 2 && offsets.dim(0) == p && offsets.dim(1) == 2,
            "deformable_sample: offsets must be (P, 2)");
    for (std::size_t c = 0; c < c_n; ++c) out[c] = 0;
    std::vector<real> sample(c_n);
    for (std::size_t k = 0; k < p; ++k) {
        bilinear_sample(values, plane, base_u + offsets.at(k, 0),
                        base_v + offsets.at(k, 1), sample.data());
        for (std::size_t c = 0; c < c_n; ++c) out[c] += weights[k] * sample[c];
    }
}

void deformable_sample_backward(const Tensor& values, std::size_t plane,
                                real base_u, real base_v, const Tensor& offsets,
                                const Tensor& weights, const real* g_out,
                                Tensor* g_values, Tensor& g_offsets,
                                Tensor& g_weights, real& g_base_u, real& g_base_v) {
    const std::size_t c_n = values.dim(0), p = weights.size();
    std::vector<real> sample(c_n), g_point(c_n);
    for (std::size_t k = 0; k < p; ++k) {
        const real u = base_u + offsets.at(k, 0), v = base_v + offsets.at(k, 1);
        bilinear_sample(values, plane, u, v, sample.data());
        real gw = 0;
        for (std::size_t c = 0; c < c_n; ++c) {
            gw += g_out[c] * sample[c];
            g_point[c] = g_out[c] * weights[k];
        }
        g_weights[k] += gw;
        real gu = 0, gv = 0;
        bilinear_sample_backward(values, plane, u, v, g_point.data(), g_values, gu,
                                 gv);
        g_offsets.at(k, 0) += gu;
        g_offsets.at(k, 1) += gv;
        g_base_u += gu;
        g_base_v += gv;
    }
}

// ---------------------------------------------------------------------------
// Chunking.
// ---------------------------------------------------------------------------

ChunkPlan make_chunk_plan(std::size_t depth, std::size_t chunks, bool shuffle,
                          Rng& rng) {
    require(chunks >= 1 && depth >= chunks,
            "chunk plan: need at least one plane per chunk");
    ChunkPlan plan;
    plan.chunks = chunks;
    if (shuffle) {
        plan.perm = rng.permutation(depth);
    } else {
        plan.perm.resize(depth);
        for (std::size_t i = 0; i < depth; ++i) plan.perm[i] = i;
    }
    // Near-equal contiguous blocks, the leftover planes going to the front.
    plan.begin.resize(chunks + 1);
    const std::size_t base = depth / chunks, extra = depth % chunks;
    plan.begin[0] = 0;
    for (std::size_t k = 0; k < chunks; ++k)
        plan.begin[k + 1] = plan.begin[k] + base + (k < extra ? 1 : 0);
    return plan;
}

Tensor chunk_aggregate(const Tensor& f_depth, const ChunkPlan& plan) {
    require(f_depth.rank() == 2 && f_depth.dim(0) == plan.depth(),
            "chunk_aggregate: feature rows must match the plan depth");
    const std::size_t c_n = f_depth.dim(1);
    Tensor chunks({plan.chunks, c_n});
    for (std::size_t k = 0; k < plan.chunks; ++k) {
        const real inv = real(1) / real(plan.block_size(k));
        for (std::size_t t = plan.begin[k]; t < plan.begin[k + 1]; ++t) {
            const real* src = f_depth.row(plan.perm[t]);
            for (std::size_t c = 0; c < c_n; ++c) chunks.at(k, c) += inv * src[c];
        }
    }
    return chunks;
}

void chunk_aggregate_backward(const ChunkPlan& plan, const Tensor& g_chunks,
                              Tensor& g_f_depth) {
    const std::size_t c_n = g_chunks.dim(1);
    for (std::size_t k = 0; k < plan.chunks; ++k) {
        const real inv = real(1) / real(plan.block_size(k));
        for (std::size_t t = plan.begin[k]; t < plan.begin[k + 1]; ++t) {
            real* dst = g_f_depth.row(plan.perm[t]);
            for (std::size_t c = 0; c < c_n; ++c) dst[c] += inv * g_chunks.at(k, c);
        }
    }
}

// ---------------------------------------------------------------------------
// Modulation and gating.
// ---------------------------------------------------------------------------

ModulationParams::ModulationParams(std::size_t channels)
    : wq(channels, channels), wk(channels, channels), wv(channels, channels) {}

void ModulationParams::zero_grad() {
    wq.zero_grad();
    wk.zero_grad();
    wv.zero_grad();
}

Tensor cross_depth_modulation(const Tensor& chunks, const ModulationParams& p,
                              ModulationCache* cache) {
    require(chunks.rank() == 2 && chunks.dim(0) >= 1,
            "cross_depth_modulation: need at least one chunk");
    const std::size_t k_n = chunks.dim(0), c_n = chunks.dim(1);
    Tensor q = p.wq.forward(chunks);
    Tensor k = p.wk.forward(chunks);
    Tensor v = p.wv.forward(chunks);
    Tensor weights;
    Tensor attn = scaled_dot_attention(q, k, v, &weights);

    Tensor m({c_n});
    for (std::size_t r = 0; r < k_n; ++r)
        for (std::size_t c = 0; c < c_n; ++c) m[c] += attn.at(r, c) / real(k_n);

    if (cache) {
        cache->chunks = chunks;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->weights = std::move(weights);
    }
    return m;
}

void cross_depth_modulation_backward(ModulationParams& p,
                                     const ModulationCache& cache,
                                     const Tensor& g_m, Tensor& g_chunks) {
    const std::size_t k_n = cache.chunks.dim(0), c_n = cache.chunks.dim(1);
    Tensor g_attn({k_n, c_n});
    for (std::size_t r = 0; r < k_n; ++r)
        for (std::size_t c = 0; c < c_n; ++c) g_attn.at(r, c) = g_m[c] / real(k_n);

    Tensor gq({k_n, c_n}), gk({k_n, c_n}), gv({k_n, c_n});
    scaled_dot_attention_backward(cache.q, cache.k, cache.v, cache.weights, g_attn,
                                  gq, gk, gv);
    p.wq.backward(cache.chunks, gq, &g_chunks);
    p.wk.backward(cache.chunks, gk, &g_chunks);
    p.wv.backward(cache.chunks, gv, &g_chunks);
}

Tensor gated_global_fusion(const Tensor& m, const Tensor& g, real alpha) {
    require(m.same_shape(g), "gated_global_fusion: shape mismatch");
    Tensor out(m.shape());
    for (std::size_t i = 0; i < m.size(); ++i)
        out[i] = alpha * m[i] + (1 - alpha) * g[i];
    return out;
}

// ---------------------------------------------------------------------------
// Full LiDAR lift.
// ---------------------------------------------------------------------------

LdfaParams::LdfaParams(std::size_t channels, std::size_t feat_dim,
                       std::size_t planes_, std::size_t keypoints_)
    : keypoints(keypoints_),
      planes(planes_),
      encoder(channels),
      offset_map(planes_ * keypoints_ * 2, feat_dim),
      weight_map(planes_ * keypoints_, feat_dim),
      mod(channels) {}

void LdfaParams::zero_grad() {
    encoder.zero_grad();
    offset_map.zero_grad();
    weight_map.zero_grad();
    mod.zero_grad();
    g_alpha_logit = 0;
}

namespace {

// Continuous plane coordinate of an anchor: integer values land on cell
// centers.
real plane_coord(real x, real origin, real cell) { return (x - origin) / cell - real(0.5); }

}  // namespace

Tensor ldfa_lift(const GaussianSet& set, const FeatureVolume& raw,
                 const LdfaParams& p, const ChunkPlan& plan, LdfaCache* cache) {
    const std::size_t n = set.size(), d_n = p.planes, p_n = p.keypoints;
    const std::size_t c_n = p.channels(), k_n = plan.chunks;
    require(raw.spec.depth == d_n, "ldfa_lift: volume depth mismatch");
    require(plan.depth() == d_n, "ldfa_lift: chunk plan depth mismatch");
    require(d_n >= k_n, "ldfa_lift: need at least one plane per chunk");
    require(set.feat_dim() == p.offset_map.in_dim(),
            "ldfa_lift: anchor feature width mismatch");

    VolumeEncodeCache enc_cache;
    FeatureVolume vol = encode_volume(raw, p.encoder, cache ? &enc_cache : nullptr);

    Tensor offset_raw = p.offset_map.forward(set.features);  // (N, D*P*2)
    Tensor weight_logits = p.weight_map.forward(set.features);
    weight_logits.reshape({n * d_n, p_n});
    Tensor weights = softmax(weight_logits, 1);

    Tensor f_depth({n, d_n, c_n});
    Tensor g_global({n, c_n});
    Tensor chunks_all({n, k_n, c_n});
    Tensor m_all({n, c_n});
    Tensor out({n, c_n});
    std::vector<ModulationCache> mod_caches(cache ? n : 0);
    const real alpha = sigmoid(p.alpha_logit);

    // Sampling and chunk pooling are elementwise per anchor (no shared
    // writes, no BLAS), so they parallelize cleanly.
#pragma omp parallel for schedule(static)
    for (long long ii = 0; ii < (long long)n; ++ii) {
        const std::size_t i = std::size_t(ii);
        const real base_u =
            plane_coord(set.means.at(i, 0), vol.spec.origin[0], vol.spec.cell_size[0]);
        const real base_v =
            plane_coord(set.means.at(i, 1), vol.spec.origin[1], vol.spec.cell_size[1]);

        Tensor offs({p_n, 2});
        Tensor ws({p_n});
        Tensor planes_i({d_n, c_n});
        for (std::size_t d = 0; d < d_n; ++d) {
            for (std::size_t k = 0; k < p_n; ++k) {
                offs.at(k, 0) = offset_raw.at(i, (d * p_n + k) * 2);
                offs.at(k, 1) = offset_raw.at(i, (d * p_n + k) * 2 + 1);
                ws[k] = weights.at(i * d_n + d, k);
            }
            real* dst = &f_depth.at(i, d, 0);
            deformable_sample(vol.values, d, base_u, base_v, offs, ws, dst);
            for (std::size_t c = 0; c < c_n; ++c) {
                planes_i.at(d, c) = dst[c];
                g_global.at(i, c) += dst[c] / real(d_n);
            }
        }

        const Tensor chunks_i = chunk_aggregate(planes_i, plan);
        for (std::size_t k = 0; k < k_n; ++k)
            for (std::size_t c = 0; c < c_n; ++c)
                chunks_all.at(i, k, c) = chunks_i.at(k, c);
    }

    // The small attention products go through the (thread-oblivious) dense
    // kernels, so keep this stage serial.
    Tensor chunks_i({k_n, c_n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < k_n; ++k)
            for (std::size_t c = 0; c < c_n; ++c)
                chunks_i.at(k, c) = chunks_all.at(i, k, c);
        const Tensor m_i =
            cross_depth_modulation(chunks_i, p.mod, cache ? &mod_caches[i] : nullptr);
        for (std::size_t c = 0; c < c_n; ++c) {
            m_all.at(i, c) = m_i[c];
            out.at(i, c) = alpha * m_i[c] + (1 - alpha) * g_global.at(i, c);
        }
    }

    if (cache) {
        cache->enc = std::move(enc_cache);
        cache->encoded = std::move(vol);
        cache->offset_raw = std::move(offset_raw);
        cache->weight_logits = std::move(weight_logits);
        cache->weights = std::move(weights);
        cache->f_depth = std::move(f_depth);
        cache->g_global = std::move(g_global);
        cache->chunks = std::move(chunks_all);
        cache->mod = std::move(mod_caches);
        cache->m = std::move(m_all);
        cache->plan = plan;
    }
    return out;
}

void ldfa_lift_backward(LdfaParams& p, const GaussianSet& set,
                        const LdfaCache& cache, const Tensor& g_out,
                        GaussianSet& g_set) {
    const std::size_t n = set.size(), d_n = p.planes, p_n = p.keypoints;
    const std::size_t c_n = p.channels(), k_n = cache.plan.chunks;
    require(g_out.rank() == 2 && g_out.dim(0) == n && g_out.dim(1) == c_n,
            "ldfa_lift_backward: upstream gradient shape mismatch");

    const real alpha = sigmoid(p.alpha_logit);
    real g_alpha = 0;
    Tensor g_offset_raw(cache.offset_raw.shape());
    Tensor g_weights(cache.weights.shape());
    Tensor g_values(cache.encoded.values.shape());

    Tensor g_m({c_n});
    Tensor offs({p_n, 2}), ws({p_n});
    Tensor g_offs({p_n, 2}), g_ws({p_n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < c_n; ++c)
            g_alpha += g_out.at(i, c) * (cache.m.at(i, c) - cache.g_global.at(i, c));

        for (std::size_t c = 0; c < c_n; ++c) g_m[c] = alpha * g_out.at(i, c);
        Tensor g_chunks({k_n, c_n});
        cross_depth_modulation_backward(p.mod, cache.mod[i], g_m, g_chunks);

        Tensor g_fd({d_n, c_n});
        chunk_aggregate_backward(cache.plan, g_chunks, g_fd);
        for (std::size_t d = 0; d < d_n; ++d)
            for (std::size_t c = 0; c < c_n; ++c)
                g_fd.at(d, c) += (1 - alpha) * g_out.at(i, c) / real(d_n);

        const real base_u = plane_coord(set.means.at(i, 0), cache.encoded.spec.origin[0],
                                        cache.encoded.spec.cell_size[0]);
        const real base_v = plane_coord(set.means.at(i, 1), cache.encoded.spec.origin[1],
                                        cache.encoded.spec.cell_size[1]);
        real g_bu = 0, g_bv = 0;
        for (std::size_t d = 0; d < d_n; ++d) {
            for (std::size_t k = 0; k < p_n; ++k) {
                offs.at(k, 0) = cache.offset_raw.at(i, (d * p_n + k) * 2);
                offs.at(k, 1) = cache.offset_raw.at(i, (d * p_n + k) * 2 + 1);
                ws[k] = cache.weights.at(i * d_n + d, k);
            }
            g_offs.zero();
            g_ws.zero();
            deformable_sample_backward(cache.encoded.values, d, base_u, base_v, offs,
                                       ws, &g_fd.at(d, 0), &g_values, g_offs, g_ws,
                                       g_bu, g_bv);
            for (std::size_t k = 0; k < p_n; ++k) {
                g_offset_raw.at(i, (d * p_n + k) * 2) += g_offs.at(k, 0);
                g_offset_raw.at(i, (d * p_n + k) * 2 + 1) += g_offs.at(k, 1);
                g_weights.at(i * d_n + d, k) += g_ws[k];
            }
        }
        g_set.means.at(i, 0) += g_bu / cache.encoded.spec.cell_size[0];
        g_set.means.at(i, 1) += g_bv / cache.encoded.spec.cell_size[1];
    }
    p.g_alpha_logit += g_alpha * alpha * (1 - alpha);

    Tensor g_weight_logits(cache.weight_logits.shape());
    softmax_backward(cache.weight_logits, cache.weights, g_weights, 1, real(1),
                     g_weight_logits, nullptr);
    g_weight_logits.reshape({n, d_n * p_n});
    p.weight_map.backward(set.features, g_weight_logits, &g_set.features);
    p.offset_map.backward(set.features, g_offset_raw, &g_set.features);

    encode_volume_backward(p.encoder, cache.enc, g_values);
}

// ---------------------------------------------------------------------------
// Camera lift.
// ---------------------------------------------------------------------------

CameraLiftParams::CameraLiftParams(std::size_t channels, std::size_t image_channels,
                                   std::size_t feat_dim, std::size_t keypoints_)
    : keypoints(keypoints_),
      embed(channels, image_channels),
      offset_map(keypoints_ * 2, feat_dim),
      weight_map(keypoints_, feat_dim) {}

void CameraLiftParams::zero_grad() {
    embed.zero_grad();
    offset_map.zero_grad();
    weight_map.zero_grad();
}

namespace {

// World point through the extrinsic into camera coordinates.
void to_camera(const CameraFeatureMap& cam, const real* m, real out[3]) {
    for (int r = 0; r < 3; ++r)
        out[r] = cam.rot[3 * r] * m[0] + cam.rot[3 * r + 1] * m[1] +
                 cam.rot[3 * r + 2] * m[2] + cam.trans[r];
}

}  // namespace

Tensor camera_lift(const GaussianSet& set, const CameraFeatureMap& cam,
                   const CameraLiftParams& p, CameraLiftCache* cache) {
    const std::size_t n = set.size(), p_n = p.keypoints;
    const std::size_t c_img = cam.channels(), c_out = p.embed.out_dim();
    require(cam.values.rank() == 4 && cam.values.dim(1) == 1,
            "camera_lift: image must be a one-plane volume");
    require(cam.fx != 0 && cam.fy != 0, "camera_lift: degenerate intrinsics");
    require(p.embed.in_dim() == c_img, "camera_lift: image channel mismatch");
    require(set.feat_dim() == p.offset_map.in_dim(),
            "camera_lift: anchor feature width mismatch");

    Tensor offset_raw = p.offset_map.forward(set.features);   // (N, P*2)
    Tensor weight_logits = p.weight_map.forward(set.features);  // (N, P)
    Tensor weights = softmax(weight_logits, 1);

    // Byte-sized flags: vector<bool> packs bits and is unsafe to write from
    // concurrent threads.
    std::vector<unsigned char> vis(n, 0);
    Tensor base({n, 2});
    Tensor sampled({n, c_img});

#pragma omp parallel for schedule(static)
    for (long long ii = 0; ii < (long long)n; ++ii) {
        const std::size_t i = std::size_t(ii);
        real pc[3];
        to_camera(cam, set.means.row(i), pc);
        if (pc[2] <= cam.z_near) continue;  // behind the near plane: zero row
        vis[i] = 1;
        const real u = cam.fx * pc[0] / pc[2] + cam.cx;
        const real v = cam.fy * pc[1] / pc[2] + cam.cy;
        base.at(i, 0) = u;
        base.at(i, 1) = v;

        Tensor offs({p_n, 2});
        Tensor ws({p_n});
        for (std::size_t k = 0; k < p_n; ++k) {
            offs.at(k, 0) = offset_raw.at(i, 2 * k);
            offs.at(k, 1) = offset_raw.at(i, 2 * k + 1);
            ws[k] = weights.at(i, k);
        }
        deformable_sample(cam.values, 0, u, v, offs, ws, sampled.row(i));
    }

    Tensor out = p.embed.forward(sampled);
    for (std::size_t i = 0; i < n; ++i)
        if (!vis[i])
            for (std::size_t c = 0; c < c_out; ++c) out.at(i, c) = 0;

    if (cache) {
        cache->visible.assign(vis.begin(), vis.end());
        cache->base = std::move(base);
        cache->offset_raw = std::move(offset_raw);
        cache->weight_logits = std::move(weight_logits);
        cache->weights = std::move(weights);
        cache->sampled = std::move(sampled);
    }
    return out;
}

void camera_lift_backward(CameraLiftParams& p, const GaussianSet& set,
                          const CameraFeatureMap& cam, const CameraLiftCache& cache,
                          const Tensor& g_out, GaussianSet& g_set) {
    const std::size_t n = set.size(), p_n = p.keypoints;
    const std::size_t c_img = cam.channels(), c_out = p.embed.out_dim();
    require(g_out.rank() == 2 && g_out.dim(0) == n && g_out.dim(1) == c_out,
            "camera_lift_backward: upstream gradient shape mismatch");

    // Invisible anchors were forced to zero after the embed, so their
    // upstream gradient must not reach any parameter.
    Tensor g_masked = g_out;
    for (std::size_t i = 0; i < n; ++i)
        if (!cache.visible[i])
            for (std::size_t c = 0; c < c_out; ++c) g_masked.at(i, c) = 0;

    Tensor g_sampled({n, c_img});
    p.embed.backward(cache.sampled, g_masked, &g_sampled);

    Tensor g_offset_raw(cache.offset_raw.shape());
    Tensor g_weights(cache.weights.shape());
    Tensor offs({p_n, 2}), ws({p_n});
    Tensor g_offs({p_n, 2}), g_ws({p_n});
    for (std::size_t i = 0; i < n; ++i) {
        if (!cache.visible[i]) continue;
        for (std::size_t k = 0; k < p_n; ++k) {
            offs.at(k, 0) = cache.offset_raw.at(i, 2 * k);
            offs.at(k, 1) = cache.offset_raw.at(i, 2 * k + 1);
            ws[k] = cache.weights.at(i, k);
        }
        g_offs.zero();
        g_ws.zero();
        real g_u = 0, g_v = 0;
        deformable_sample_backward(cam.values, 0, cache.base.at(i, 0),
                                   cache.base.at(i, 1), offs, ws, g_sampled.row(i),
                                   nullptr, g_offs, g_ws, g_u, g_v);
        for (std::size_t k = 0; k < p_n; ++k) {
            g_offset_raw.at(i, 2 * k) += g_offs.at(k, 0);
            g_offset_raw.at(i, 2 * k + 1) += g_offs.at(k, 1);
            g_weights.at(i, k) += g_ws[k];
        }

        // u = fx x/z + cx, v = fy y/z + cy, (x,y,z) = R m + t.
        real pc[3];
        to_camera(cam, set.means.row(i), pc);
        const real g_cam[3] = {g_u * cam.fx / pc[2], g_v * cam.fy / pc[2],
                               -(g_u * cam.fx * pc[0] + g_v * cam.fy * pc[1]) /
                                   (pc[2] * pc[2])};
        for (int a = 0; a < 3; ++a)
            g_set.means.at(i, std::size_t(a)) += cam.rot[0 + a] * g_cam[0] +
                                                 cam.rot[3 + a] * g_cam[1] +
                                                 cam.rot[6 + a] * g_cam[2];
    }

    Tensor g_weight_logits(cache.weight_logits.shape());
    softmax_backward(cache.weight_logits, cache.weights, g_weights, 1, real(1),
                     g_weight_logits, nullptr);
    p.weight_map.backward(set.features, g_weight_logits, &g_set.features);
    p.offset_map.backward(set.features, g_offset_raw, &g_set.features);
}

}  // namespace splatocc
