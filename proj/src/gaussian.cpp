#include "splatocc/gaussian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace splatocc {

// ---------------------------------------------------------------------------
// Containers.
// ---------------------------------------------------------------------------

VoxelGrid make_voxel_grid(const GridSpec& spec) {
    require(spec.num_classes >= 1, "voxel grid needs at least one class");
    require(spec.voxel_size > real(0), "voxel size must be positive");
    VoxelGrid g;
    g.spec = spec;
    g.logits = Tensor({spec.extents[0], spec.extents[1], spec.extents[2],
                       spec.num_classes});
    return g;
}

GaussianSet make_gaussian_set(std::size_t n, std::size_t num_classes,
                              std::size_t feat_dim) {
    GaussianSet s;
    s.means = Tensor({n, 3});
    s.rotations = Tensor({n, 4});
    for (std::size_t i = 0; i < n; ++i) s.rotations.at(i, 0) = real(1);
    s.log_scales = Tensor({n, 3});
    s.opacity_logits = Tensor({n});
    s.class_logits = Tensor({n, num_classes});
    s.features = Tensor({n, feat_dim});
    return s;
}

GaussianSet zeros_like(const GaussianSet& set) {
    GaussianSet g;
    g.means = Tensor(set.means.shape());
    g.rotations = Tensor(set.rotations.shape());
    g.log_scales = Tensor(set.log_scales.shape());
    g.opacity_logits = Tensor(set.opacity_logits.shape());
    g.class_logits = Tensor(set.class_logits.shape());
    g.features = Tensor(set.features.shape());
    return g;
}

Gaussian get_gaussian(const GaussianSet& set, std::size_t i) {
    require(i < set.size(), "gaussian index out of range");
    Gaussian g;
    for (int a = 0; a < 3; ++a) {
        g.mean[a] = set.means.at(i, a);
        g.scale[a] = std::exp(set.log_scales.at(i, a));
    }
    for (int a = 0; a < 4; ++a) g.rotation[a] = set.rotations.at(i, a);
    g.opacity = sigmoid(set.opacity_logits[i]);
    g.class_logits.assign(set.class_logits.row(i),
                          set.class_logits.row(i) + set.num_classes());
    g.feature.assign(set.features.row(i), set.features.row(i) + set.feat_dim());
    return g;
}

// ---------------------------------------------------------------------------
// Quaternion math.
// ---------------------------------------------------------------------------

void quat_to_rotation(const real q[4], real r[9]) {
    const real n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    require(n > real(0), "zero quaternion");
    const real w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
    r[0] = 1 - 2 * (y * y + z * z);
    r[1] = 2 * (x * y - w * z);
    r[2] = 2 * (x * z + w * y);
    r[3] = 2 * (x * y + w * z);
    r[4] = 1 - 2 * (x * x + z * z);
    r[5] = 2 * (y * z - w * x);
    r[6] = 2 * (x * z - w * y);
    r[7] = 2 * (y * z + w * x);
    r[8] = 1 - 2 * (x * x + y * y);
}

void quat_rotation_backward(const real q[4], const real gr[9], real gq[4]) {
    const real n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    require(n > real(0), "zero quaternion");
    const real w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;

    // dR/d(unit components), rows of R laid out as in quat_to_rotation.
    const real dw[9] = {0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0};
    const real dx[9] = {0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x};
    const real dy[9] = {-4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y};
    const real dz[9] = {-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0};

    real gu[4] = {0, 0, 0, 0};  // gradient on the normalized quaternion
    for (int i = 0; i < 9; ++i) {
        gu[0] += gr[i] * dw[i];
        gu[1] += gr[i] * dx[i];
        gu[2] += gr[i] * dy[i];
        gu[3] += gr[i] * dz[i];
    }

    // Through normalization: g_raw = (gu - u (u . gu)) / n.
    const real u[4] = {w, x, y, z};
    const real proj = u[0] * gu[0] + u[1] * gu[1] + u[2] * gu[2] + u[3] * gu[3];
    for (int a = 0; a < 4; ++a) gq[a] += (gu[a] - u[a] * proj) / n;
}

Tensor covariance(const real q[4], const real s[3]) {
    const real n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    require(std::abs(n - real(1)) <= kQuatUnitTol,
            "covariance: quaternion is not unit length");
    require(s[0] > 0 && s[1] > 0 && s[2] > 0, "covariance: scales must be positive");
    real r[9];
    quat_to_rotation(q, r);
    Tensor sigma({3, 3});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            real acc = 0;
            for (int k = 0; k < 3; ++k)
                acc += r[i * 3 + k] * s[k] * s[k] * r[j * 3 + k];
            sigma.at(i, j) = acc;
        }
    return sigma;
}

std::vector<real> evaluate_gaussian(const real x[3], const Gaussian& g) {
    require(g.scale[0] > 0 && g.scale[1] > 0 && g.scale[2] > 0,
            "evaluate_gaussian: scales must be positive");
    real r[9];
    quat_to_rotation(g.rotation.data(), r);
    const real d[3] = {x[0] - g.mean[0], x[1] - g.mean[1], x[2] - g.mean[2]};
    real q = 0;
    for (int k = 0; k < 3; ++k) {
        const real t = r[k] * d[0] + r[3 + k] * d[1] + r[6 + k] * d[2];
        q += t * t / (g.scale[k] * g.scale[k]);
    }
    const real w = g.opacity * std::exp(real(-0.5) * q);
    std::vector<real> out(g.class_logits.size());
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = w * g.class_logits[c];
    return out;
}

// ---------------------------------------------------------------------------
// Splatting.
// ---------------------------------------------------------------------------

namespace {

struct DecodedGaussian {
    real r[9];        // rotation, row-major
    real inv_s2[3];   // 1 / s_k^2
    real s2[3];       // s_k^2 (backward reuses it for log-scale grads)
    real opacity;
    real radius;      // cutoff_k * max(s); may be +infinity
};

DecodedGaussian decode(const GaussianSet& set, std::size_t i, real cutoff_k) {
    DecodedGaussian d;
    quat_to_rotation(set.rotations.row(i), d.r);
    real smax = 0;
    for (int a = 0; a < 3; ++a) {
        const real s = std::exp(set.log_scales.at(i, a));
        d.s2[a] = s * s;
        d.inv_s2[a] = real(1) / d.s2[a];
        smax = std::max(smax, s);
    }
    d.opacity = sigmoid(set.opacity_logits[i]);
    d.radius = cutoff_k * smax;
    return d;
}

struct VoxRange {
    std::size_t lo[3]{}, hi[3]{};
    bool empty = false;
};

// Voxel indices whose centers fall inside [m - radius, m + radius] per axis.
VoxRange voxel_range(const GridSpec& spec, const real* m, real radius) {
    VoxRange vr;
    for (int a = 0; a < 3; ++a) {
        const real flo =
            std::ceil((m[a] - radius - spec.origin[a]) / spec.voxel_size - real(0.5));
        const real fhi =
            std::floor((m[a] + radius - spec.origin[a]) / spec.voxel_size - real(0.5));
        const real last = real(spec.extents[a]) - real(1);
        if (fhi < real(0) || flo > last || spec.extents[a] == 0) {
            vr.empty = true;
            return vr;
        }
        vr.lo[a] = flo < real(0) ? 0 : std::size_t(flo);
        vr.hi[a] = fhi > last ? spec.extents[a] - 1 : std::size_t(fhi);
    }
    return vr;
}

bool inside_radius(const std::array<real, 3>& x, const real* m, real radius) {
    const real dx = x[0] - m[0], dy = x[1] - m[1], dz = x[2] - m[2];
    return dx * dx + dy * dy + dz * dz <= radius * radius;
}

// CSR candidate lists: for each voxel the Gaussians whose bounding box covers
// it, stored in ascending Gaussian order so accumulation is deterministic.
struct Candidates {
    std::vector<std::size_t> offsets;  // voxel_count + 1
    std::vector<std::uint32_t> ids;
};

Candidates build_candidates(const GaussianSet& set, const GridSpec& spec,
                            const std::vector<DecodedGaussian>& dec) {
    const std::size_t v = spec.voxel_count();
    Candidates c;
    c.offsets.assign(v + 1, 0);
    std::vector<VoxRange> ranges(set.size());
    for (std::size_t g = 0; g < set.size(); ++g) {
        ranges[g] = voxel_range(spec, set.means.row(g), dec[g].radius);
        if (ranges[g].empty) continue;
        const VoxRange& r = ranges[g];
        for (std::size_t ix = r.lo[0]; ix <= r.hi[0]; ++ix)
            for (std::size_t iy = r.lo[1]; iy <= r.hi[1]; ++iy)
                for (std::size_t iz = r.lo[2]; iz <= r.hi[2]; ++iz)
                    ++c.offsets[spec.flat_index(ix, iy, iz) + 1];
    }
    for (std::size_t i = 0; i < v; ++i) c.offsets[i + 1] += c.offsets[i];
    c.ids.resize(c.offsets[v]);
    std::vector<std::size_t> cursor(c.offsets.begin(), c.offsets.end() - 1);
    for (std::size_t g = 0; g < set.size(); ++g) {
        if (ranges[g].empty) continue;
        const VoxRange& r = ranges[g];
        for (std::size_t ix = r.lo[0]; ix <= r.hi[0]; ++ix)
            for (std::size_t iy = r.lo[1]; iy <= r.hi[1]; ++iy)
                for (std::size_t iz = r.lo[2]; iz <= r.hi[2]; ++iz)
                    c.ids[cursor[spec.flat_index(ix, iy, iz)]++] = std::uint32_t(g);
    }
    return c;
}

}  // namespace

VoxelGrid splat(const GaussianSet& set, const GridSpec& spec, real cutoff_k) {
    require(cutoff_k > real(0), "splat: cutoff must be positive");
    VoxelGrid grid = make_voxel_grid(spec);
    if (set.size() == 0) return grid;
    require(set.num_classes() == spec.num_classes,
            "splat: class count mismatch between set and grid");

    std::vector<DecodedGaussian> dec(set.size());
    for (std::size_t g = 0; g < set.size(); ++g) dec[g] = decode(set, g, cutoff_k);
    const Candidates cand = build_candidates(set, spec, dec);

    const std::size_t nc = spec.num_classes;
    const std::size_t ny = spec.extents[1], nz = spec.extents[2];
    real* logits = grid.logits.data();

#pragma omp parallel for schedule(static)
    for (long long vi = 0; vi < (long long)spec.voxel_count(); ++vi) {
        const std::size_t v = std::size_t(vi);
        const std::size_t ix = v / (ny * nz), iy = (v / nz) % ny, iz = v % nz;
        const std::array<real, 3> x = spec.center(ix, iy, iz);
        real* out = logits + v * nc;
        for (std::size_t j = cand.offsets[v]; j < cand.offsets[v + 1]; ++j) {
            const std::size_t g = cand.ids[j];
            const real* m = set.means.row(g);
            const DecodedGaussian& dg = dec[g];
            if (!inside_radius(x, m, dg.radius)) continue;
            const real d[3] = {x[0] - m[0], x[1] - m[1], x[2] - m[2]};
            real q = 0;
            for (int k = 0; k < 3; ++k) {
                const real t = dg.r[k] * d[0] + dg.r[3 + k] * d[1] + dg.r[6 + k] * d[2];
                q += t * t * dg.inv_s2[k];
            }
            const real w = dg.opacity * std::exp(real(-0.5) * q);
            const real* cl = set.class_logits.row(g);
            for (std::size_t c = 0; c < nc; ++c) out[c] += w * cl[c];
        }
    }
    check_finite(grid.logits, "splat logits");
    return grid;
}

VoxelGrid splat_dense_reference(const GaussianSet& set, const GridSpec& spec) {
    VoxelGrid grid = make_voxel_grid(spec);
    if (set.size() == 0) return grid;
    require(set.num_classes() == spec.num_classes,
            "splat: class count mismatch between set and grid");
    const std::size_t nc = spec.num_classes;

    for (std::size_t g = 0; g < set.size(); ++g) {
        const Gaussian gg = get_gaussian(set, g);
        const Tensor sigma = covariance(gg.rotation.data(), gg.scale.data());
        // Explicit 3x3 inverse via the adjugate.
        const real a = sigma.at(0, 0), b = sigma.at(0, 1), c = sigma.at(0, 2);
        const real d = sigma.at(1, 0), e = sigma.at(1, 1), f = sigma.at(1, 2);
        const real gm = sigma.at(2, 0), h = sigma.at(2, 1), i = sigma.at(2, 2);
        const real det = a * (e * i - f * h) - b * (d * i - f * gm) + c * (d * h - e * gm);
        require(det != real(0), "reference splat: singular covariance");
        const real inv[9] = {(e * i - f * h) / det,  (c * h - b * i) / det,
                             (b * f - c * e) / det,  (f * gm - d * i) / det,
                             (a * i - c * gm) / det, (c * d - a * f) / det,
                             (d * h - e * gm) / det, (b * gm - a * h) / det,
                             (a * e - b * d) / det};
        for (std::size_t ix = 0; ix < spec.extents[0]; ++ix)
            for (std::size_t iy = 0; iy < spec.extents[1]; ++iy)
                for (std::size_t iz = 0; iz < spec.extents[2]; ++iz) {
                    const std::array<real, 3> x = spec.center(ix, iy, iz);
                    const real dv[3] = {x[0] - gg.mean[0], x[1] - gg.mean[1],
                                        x[2] - gg.mean[2]};
                    real q = 0;
                    for (int r = 0; r < 3; ++r)
                        for (int s = 0; s < 3; ++s) q += dv[r] * inv[r * 3 + s] * dv[s];
                    const real w = gg.opacity * std::exp(real(-0.5) * q);
                    real* out =
                        grid.logits.data() + spec.flat_index(ix, iy, iz) * nc;
                    for (std::size_t cc = 0; cc < nc; ++cc)
                        out[cc] += w * gg.class_logits[cc];
                }
    }
    return grid;
}

void splat_backward(const GaussianSet& set, const GridSpec& spec, real cutoff_k,
                    const Tensor& g_logits, GaussianSet& grads) {
    require(cutoff_k > real(0), "splat_backward: cutoff must be positive");
    if (set.size() == 0) return;
    require(g_logits.rank() == 4 && g_logits.dim(0) == spec.extents[0] &&
                g_logits.dim(1) == spec.extents[1] && g_logits.dim(2) == spec.extents[2] &&
                g_logits.dim(3) == spec.num_classes,
            "splat_backward: upstream gradient shape mismatch");
    require(set.num_classes() == spec.num_classes,
            "splat_backward: class count mismatch");

    const std::size_t nc = spec.num_classes;
    const real* gl = g_logits.data();

    // Parallel over Gaussians: each owns its gradient rows, so no write races
    // and a deterministic result for any thread count.
#pragma omp parallel for schedule(static)
    for (long long gi = 0; gi < (long long)set.size(); ++gi) {
        const std::size_t g = std::size_t(gi);
        const DecodedGaussian dg = decode(set, g, cutoff_k);
        const real* m = set.means.row(g);
        const real* cl = set.class_logits.row(g);
        const VoxRange vr = voxel_range(spec, m, dg.radius);
        if (vr.empty) continue;

        real gm_acc[3] = {0, 0, 0};
        real glogs[3] = {0, 0, 0};
        real grot[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
        real gsig_logit = 0;
        real* gcl = grads.class_logits.row(g);

        for (std::size_t ix = vr.lo[0]; ix <= vr.hi[0]; ++ix)
            for (std::size_t iy = vr.lo[1]; iy <= vr.hi[1]; ++iy)
                for (std::size_t iz = vr.lo[2]; iz <= vr.hi[2]; ++iz) {
                    const std::array<real, 3> x = spec.center(ix, iy, iz);
                    if (!inside_radius(x, m, dg.radius)) continue;
                    const real d[3] = {x[0] - m[0], x[1] - m[1], x[2] - m[2]};
                    real t[3], q = 0;
                    for (int k = 0; k < 3; ++k) {
                        t[k] = dg.r[k] * d[0] + dg.r[3 + k] * d[1] + dg.r[6 + k] * d[2];
                        q += t[k] * t[k] * dg.inv_s2[k];
                    }
                    const real e = std::exp(real(-0.5) * q);
                    const real w = dg.opacity * e;
                    const real* up = gl + spec.flat_index(ix, iy, iz) * nc;

                    real gw = 0;
                    for (std::size_t c = 0; c < nc; ++c) {
                        gw += up[c] * cl[c];
                        gcl[c] += w * up[c];
                    }
                    const real gq = real(-0.5) * w * gw;
                    real gt[3];
                    for (int k = 0; k < 3; ++k) {
                        gt[k] = real(2) * gq * t[k] * dg.inv_s2[k];
                        glogs[k] += real(-2) * gq * t[k] * t[k] * dg.inv_s2[k];
                    }
                    for (int i = 0; i < 3; ++i) {
                        real gd = 0;
                        for (int k = 0; k < 3; ++k) {
                            gd += dg.r[i * 3 + k] * gt[k];
                            grot[i * 3 + k] += d[i] * gt[k];
                        }
                        gm_acc[i] -= gd;
                    }
                    gsig_logit += gw * e * dg.opacity * (real(1) - dg.opacity);
                }

        for (int a = 0; a < 3; ++a) {
            grads.means.at(g, a) += gm_acc[a];
            grads.log_scales.at(g, a) += glogs[a];
        }
        grads.opacity_logits[g] += gsig_logit;
        quat_rotation_backward(set.rotations.row(g), grot, grads.rotations.row(g));
    }
}

std::vector<std::uint16_t> argmax_labels(const VoxelGrid& grid) {
    const std::size_t v = grid.spec.voxel_count();
    const std::size_t nc = grid.spec.num_classes;
    std::vector<std::uint16_t> labels(v, 0);
    const real* logits = grid.logits.data();
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < (long long)v; ++i) {
        const real* row = logits + std::size_t(i) * nc;
        std::size_t best = 0;
        for (std::size_t c = 1; c < nc; ++c)
            if (row[c] > row[best]) best = c;  // strict: ties keep the lowest index
        labels[std::size_t(i)] = std::uint16_t(best);
    }
    return labels;
}

// ---------------------------------------------------------------------------
// RefineBlock.
// ---------------------------------------------------------------------------

RefineBlock::RefineBlock(std::size_t dim, std::size_t hidden)
    : ln_gain(Tensor::full({dim}, real(1))),
      ln_bias({dim}),
      g_ln_gain({dim}),
      g_ln_bias({dim}),
      fc1(hidden, dim),
      fc2(dim, hidden) {}

Tensor RefineBlock::forward(const Tensor& f, RefineCache* cache) const {
    require(f.rank() == 2 && f.dim(1) == dim(), "RefineBlock: bad feature shape");
    Tensor normed = layer_norm(f, ln_gain, ln_bias, eps);
    Tensor hidden = fc1.forward(normed);
    Tensor act(hidden.shape());
    for (std::size_t i = 0; i < hidden.size(); ++i) act[i] = gelu(hidden[i]);
    Tensor out = fc2.forward(act);
    out += f;
    if (cache) {
        cache->input = f;
        cache->normed = std::move(normed);
        cache->hidden = std::move(hidden);
        cache->act = std::move(act);
    }
    return out;
}

void RefineBlock::backward(const RefineCache& cache, const Tensor& gy, Tensor& gf) {
    gf += gy;  // residual path
    Tensor g_act(cache.act.shape());
    fc2.backward(cache.act, gy, &g_act);
    Tensor g_hidden(cache.hidden.shape());
    for (std::size_t i = 0; i < g_hidden.size(); ++i)
        g_hidden[i] = g_act[i] * gelu_grad(cache.hidden[i]);
    Tensor g_normed(cache.normed.shape());
    fc1.backward(cache.normed, g_hidden, &g_normed);
    layer_norm_backward(cache.input, ln_gain, eps, g_normed, gf, g_ln_gain, g_ln_bias);
}

void RefineBlock::zero_grad() {
    g_ln_gain.zero();
    g_ln_bias.zero();
    fc1.zero_grad();
    fc2.zero_grad();
}

}  // namespace splatocc
