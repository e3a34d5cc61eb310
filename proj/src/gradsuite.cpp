#include "splatocc/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "splatocc/aclf.hpp"
#include "splatocc/ebfs.hpp"
#include "splatocc/gaussian.hpp"
#include "splatocc/head.hpp"
#include "splatocc/ldfa.hpp"
#include "splatocc/losses.hpp"
#include "splatocc/ops.hpp"

namespace splatocc {

real gradcheck_default_tol() {
#ifdef SPLATOCC_REAL32
    return real(1e-3);
#else
    return real(1e-5);
#endif
}

real gradcheck_default_step() {
#ifdef SPLATOCC_REAL32
    return real(1e-2);
#else
    return real(1e-5);
#endif
}

Tensor randn_tensor(Rng& rng, std::vector<std::size_t> shape, real scale) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

real grad_rel_err(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "grad_rel_err: shape mismatch");
    real m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const real den = std::max({real(1), std::abs(a[i]), std::abs(b[i])});
        m = std::max(m, std::abs(a[i] - b[i]) / den);
    }
    return m;
}

bool all_pass(const std::vector<GradCheck>& checks) {
    for (const auto& c : checks)
        if (!c.pass) return false;
    return true;
}

namespace {

GradCheck finish(std::string name, real err, real tol) {
    GradCheck c;
    c.name = std::move(name);
    c.max_err = err;
    c.tol = tol;
    c.pass = err <= tol;
    return c;
}

// Scalarize a tensor-valued map through a fixed random cotangent w:
// L(inputs) = sum(w * f(inputs)). The hand VJP seeded with w must then match
// finite differences of L w.r.t. every input.
real weighted_sum(const Tensor& w, const Tensor& y) {
    require(w.same_shape(y), "weighted_sum: cotangent shape mismatch");
    return dot(w, y);
}

real check_softmax(unsigned seeds) {
    real worst = 0;
    const real h = gradcheck_default_step();
    for (unsigned s = 0; s < seeds; ++s) {
        Rng rng(1000 + s);
        const Tensor x = randn_tensor(rng, {3, 5});
        const real tau = real(0.5) + real(1.5) * rng.uniform();
        const Tensor w = randn_tensor(rng, {3, 5});

        const Tensor y = softmax(x, 1, tau);
        Tensor gx({3, 5});
        real gtau = 0;
        softmax_backward(x, y, w, 1, tau, gx, &gtau);

        const Tensor fd_x = finite_difference_gradient(
            [&](const Tensor& xx) { return weighted_sum(w, softmax(xx, 1, tau)); }, x, h);
        worst = std::max(worst, grad_rel_err(gx, fd_x));

        // Temperature as a 1-element tensor for the oracle.
        Tensor t1({1});
        t1[0] = tau;
        const Tensor fd_t = finite_difference_gradient(
            [&](const Tensor& tt) { return weighted_sum(w, softmax(x, 1, tt[0])); }, t1, h);
        Tensor gt({1});
        gt[0] = gtau;
        worst = std::max(worst, grad_rel_err(gt, fd_t));
    }
    return worst;
}

real check_layer_norm(unsigned seeds) {
    real worst = 0;
    const real h = gradcheck_default_step();
    for (unsigned s = 0; s < seeds; ++s) {
        Rng rng(2000 + s);
        const Tensor x = randn_tensor(rng, {4, 6});
        const Tensor gain = randn_tensor(rng, {6});
        const Tensor bias = randn_tensor(rng, {6});
        const Tensor w = randn_tensor(rng, {4, 6});
        const real eps = real(1e-5);

        Tensor gx({4, 6}), ggain({6}), gbias({6});
        layer_norm_backward(x, gain, eps, w, gx, ggain, gbias);

        const Tensor fd_x = finite_difference_gradient(
            [&](const Tensor& xx) { return weighted_sum(w, layer_norm(xx, gain, bias, eps)); },
            x, h);
        const Tensor fd_gain = finite_difference_gradient(
            [&](const Tensor& gg) { return weighted_sum(w, layer_norm(x, gg, bias, eps)); },
            gain, h);
        const Tensor fd_bias = finite_difference_gradient(
            [&](const Tensor& bb) { return weighted_sum(w, layer_norm(x, gain, bb, eps)); },
            bias, h);
        worst = std::max({worst, grad_rel_err(gx, fd_x), grad_rel_err(ggain, fd_gain),
                          grad_rel_err(gbias, fd_bias)});
    }
    return worst;
}

real check_attention(unsigned seeds) {
    real worst = 0;
    const real h = gradcheck_default_step();
    for (unsigned s = 0; s < seeds; ++s) {
        Rng rng(3000 + s);
        const Tensor q = randn_tensor(rng, {3, 4});
        const Tensor k = randn_tensor(rng, {5, 4});
        const Tensor v = randn_tensor(rng, {5, 2});
        const Tensor w = randn_tensor(rng, {3, 2});

        Tensor weights;
        scaled_dot_attention(q, k, v, &weights);
        Tensor gq({3, 4}), gk({5, 4}), gv({5, 2});
        scaled_dot_attention_backward(q, k, v, weights, w, gq, gk, gv);

        const Tensor fd_q = finite_difference_gradient(
            [&](const Tensor& t) { return weighted_sum(w, scaled_dot_attention(t, k, v)); },
            q, h);
        const Tensor fd_k = finite_difference_gradient(
            [&](const Tensor& t) { return weighted_sum(w, scaled_dot_attention(q, t, v)); },
            k, h);
        const Tensor fd_v = finite_difference_gradient(
            [&](const Tensor& t) { return weighted_sum(w, scaled_dot_attention(q, k, t)); },
            v, h);
        worst = std::max({worst, grad_rel_err(gq, fd_q), grad_rel_err(gk, fd_k),
                          grad_rel_err(gv, fd_v)});
    }
    return worst;
}

real check_cosine(unsigned seeds) {
    real worst = 0;
    const real h = gradcheck_default_step();
    const real eps = real(1e-8);
    for (unsigned s = 0; s < seeds; ++s) {
        Rng rng(4000 + s);
        // Keep vectors away from zero so the eps clamp stays inactive.
        Tensor a = randn_tensor(rng, {4, 5});
        Tensor b = randn_tensor(rng, {4, 5});
        for (std::size_t r = 0; r < 4; ++r) {
            a.at(r, 0) += a.at(r, 0) >= 0 ? real(1) : real(-1);
            b.at(r, 1) += b.at(r, 1) >= 0 ? real(1) : real(-1);
        }
        const Tensor w = randn_tensor(rng, {4});

        Tensor ga({4, 5}), gb({4, 5});
        for (std::size_t r = 0; r < 4; ++r)
            cosine_similarity_vec_backward(a.row(r), b.row(r), 5, eps, w[r], ga.row(r),
                                           gb.row(r));

        const Tensor fd_a = finite_difference_gradient(
            [&](const Tensor& t) { return weighted_sum(w, cosine_similarity(t, b, eps)); },
            a, h);
        const Tensor fd_b = finite_difference_gradient(
            [&](const Tensor& t) { return weighted_sum(w, cosine_similarity(a, t, eps)); },
            b, h);
        worst = std::max({worst, grad_rel_err(ga, fd_a), grad_rel_err(gb, fd_b)});
    }
    return worst;
}

real check_linear(unsigned seeds) {
    real worst = 0;
    const real h = gradcheck_default_step();
    for (unsigned s = 0; s < seeds; ++s) {
        Rng rng(5000 + s);
        Linear lin(3, 4);
        lin.w = randn_tensor(rng, {3, 4});
        lin.b = randn_tensor(rng, {3});
        const Tensor x = randn_tensor(rng, {5, 4});
        const Tensor w = randn_tensor(rng, {5, 3});

        Tensor gx({5, 4});
        lin.zero_grad();
        lin.backward(x, w, &gx);

        const Tensor fd_x = finite_difference_gradient(
            [&](const Tensor& t) { return weighted_sum(w, lin.forward(t)); }, x, h);
        Linear probe = lin;
        const Tensor fd_w = finite_difference_gradient(
            [&](const Tensor& t) {
                probe.w = t;
                return weighted_sum(w, probe.forward(x));
            },
            lin.w, h);
        probe.w = lin.w;
        const Tensor fd_b = finite_difference_gradient(
            [&](const Tensor& t) {
                probe.b = t;
                return weighted_sum(w, probe.forward(x));
            },
            lin.b, h);
        worst = std::max({worst, grad_rel_err(gx, fd_x), grad_rel_err(lin.gw, fd_w),
                          grad_rel_err(lin.gb, fd_b)});
    }
    return worst;
}

real check_scalar_activations(unsigned seeds) {
    real worst = 0;
    const real h = gradcheck_default_step();
    for (unsigned s = 0; s < seeds; ++s) {
        Rng rng(6000 + s);
        for (int i = 0; i < 8; ++i) {
            const real x = real(3) * rng.normal();
            Tensor xt({1});
            xt[0] = x;
            Tensor g({1}), fd({1});

            g[0] = gelu_grad(x);
            fd = finite_difference_gradient([](const Tensor& t) { return gelu(t[0]); }, xt, h);
            worst = std::max(worst, grad_rel_err(g, fd));

            const real sg = sigmoid(x);
            g[0] = sg * (real(1) - sg);
            fd = finite_difference_gradient([](const Tensor& t) { return sigmoid(t[0]); }, xt,
                                            h);
            worst = std::max(worst, grad_rel_err(g, fd));

            g[0] = sigmoid(x);  // d softplus / dx
            fd = finite_difference_gradient([](const Tensor& t) { return softplus(t[0]); },
                                            xt, h);
            worst = std::max(worst, grad_rel_err(g, fd));
        }
    }
    return worst;
}

}  // namespace

// --------------------------------------------------------------------------
// gaussian_scene checks.
// --------------------------------------------------------------------------

GaussianSet random_scene_set(Rng& rng, std::size_t n, const GridSpec& spec,
                             std::size_t feat_dim) {
    GaussianSet set = make_gaussian_set(n, spec.num_classes, feat_dim);
    for (std::size_t i = 0; i < n; ++i) {
        for (int a = 0; a < 3; ++a)
            set.means.at(i, a) =
                spec.origin[a] +
                rng.uniform() * spec.voxel_size * real(spec.extents[a]);
        real q[4], norm = 0;
        for (int a = 0; a < 4; ++a) {
            q[a] = rng.normal();
            norm += q[a] * q[a];
        }
        norm = std::sqrt(norm);
        for (int a = 0; a < 4; ++a) set.rotations.at(i, a) = q[a] / norm;
        for (int a = 0; a < 3; ++a)
            set.log_scales.at(i, a) = std::log(real(0.25) + real(0.5) * rng.uniform());
        set.opacity_logits[i] = real(0.5) * rng.normal();
        for (std::size_t c = 0; c < spec.num_classes; ++c)
            set.class_logits.at(i, c) = rng.normal();
        for (std::size_t f = 0; f < feat_dim; ++f)
            set.features.at(i, f) = rng.normal();
    }
    return set;
}

namespace {

// Smallest |distance - radius| over all (voxel center, Gaussian) pairs. A
// comfortable margin guarantees finite-difference probes cannot flip any
// cutoff-set membership.
real splat_margin(const GaussianSet& set, const GridSpec& spec, real cutoff) {
    real margin = std::numeric_limits<real>::infinity();
    for (std::size_t g = 0; g < set.size(); ++g) {
        real smax = 0;
        for (int a = 0; a < 3; ++a)
            smax = std::max(smax, std::exp(set.log_scales.at(g, a)));
        const real radius = cutoff * smax;
        for (std::size_t ix = 0; ix < spec.extents[0]; ++ix)
            for (std::size_t iy = 0; iy < spec.extents[1]; ++iy)
                for (std::size_t iz = 0; iz < spec.extents[2]; ++iz) {
                    const auto x = spec.center(ix, iy, iz);
                    real d2 = 0;
                    for (int a = 0; a < 3; ++a) {
                        const real d = x[a] - set.means.at(g, a);
                        d2 += d * d;
                    }
                    margin = std::min(margin, std::abs(std::sqrt(d2) - radius));
                }
    }
    return margin;
}

real check_splat_grads(unsigned seeds) {
    real worst = 0;
    const real h = gradcheck_default_step();
    GridSpec spec;
    spec.origin = {-1, -1, -1};
    spec.voxel_size = real(0.5);
    spec.extents = {4, 4, 4};
    spec.num_classes = 3;

    for (unsigned s = 0; s < seeds; ++s) {
        // Alternate between a finite cutoff (frozen-set path, margin-checked)
        // and no cutoff at all.
        const real cutoff =
            s % 2 == 0 ? real(3) : std::numeric_limits<real>::infinity();
        GaussianSet set;
        for (int attempt = 0;; ++attempt) {
            require(attempt < 200, "check_splat_grads: no margin-safe fixture found");
            Rng rng(10000 + 131 * s + attempt);
            set = random_scene_set(rng, 3, spec, 0);
            if (!std::isfinite(cutoff) || splat_margin(set, spec, cutoff) > real(1e-3))
                break;
        }
        Rng wr(40000 + s);
        const Tensor w = randn_tensor(wr, {4, 4, 4, 3});

        GaussianSet grads = zeros_like(set);
        splat_backward(set, spec, cutoff, w, grads);

        auto fd_field = [&](Tensor GaussianSet::*field) {
            return finite_difference_gradient(
                [&](const Tensor& t) {
                    GaussianSet probe = set;
                    probe.*field = t;
                    return dot(w, splat(probe, spec, cutoff).logits);
                },
                set.*field, h);
        };
        worst = std::max(worst, grad_rel_err(grads.means, fd_field(&GaussianSet::means)));
        worst = std::max(worst,
                         grad_rel_err(grads.rotations, fd_field(&GaussianSet::rotations)));
        worst = std::max(
            worst, grad_rel_err(grads.log_scales, fd_field(&GaussianSet::log_scales)));
        worst = std::max(worst, grad_rel_err(grads.opacity_logits,
                                             fd_field(&GaussianSet::opacity_logits)));
        worst = std::max(worst, grad_rel_err(grads.class_logits,
                                             fd_field(&GaussianSet::class_logits)));
    }
    return worst;
}

real check_refine_grads(unsigned seeds) {
    real worst = 0;
    const real h = gradcheck_default_step();
    for (unsigned s = 0; s < seeds; ++s) {
        Rng rng(11000 + s);
        RefineBlock blk(4, 6);
        blk.ln_gain = randn_tensor(rng, {4});
        blk.ln_bias = randn_tensor(rng, {4});
        blk.fc1.w = randn_tensor(rng, {6, 4});
        blk.fc1.b = randn_tensor(rng, {6});
        blk.fc2.w = randn_tensor(rng, {4, 6});
        blk.fc2.b = randn_tensor(rng, {4});
        const Tensor f = randn_tensor(rng, {5, 4});
        const Tensor w = randn_tensor(rng, {5, 4});

        RefineCache cache;
        blk.forward(f, &cache);
        Tensor gf({5, 4});
        blk.zero_grad();
        blk.backward(cache, w, gf);

        const Tensor fd_f = finite_difference_gradient(
            [&](const Tensor& t) { return dot(w, blk.forward(t)); }, f, h);
        worst = std::max(worst, grad_rel_err(gf, fd_f));

        RefineBlock probe = blk;
        auto fd_param = [&](Tensor RefineBlock::*field, const Tensor& base,
                            const Tensor& grad) {
            const Tensor fd = finite_difference_gradient(
                [&](const Tensor& t) {
                    probe.*field = t;
                    const real v = dot(w, probe.forward(f));
                    probe.*field = base;
                    return v;
                },
                base, h);
            return grad_rel_err(grad, fd);
        };
        worst = std::max(worst, fd_param(&RefineBlock::ln_gain, blk.ln_gain, blk.g_ln_gain));
        worst = std::max(worst, fd_param(&RefineBlock::ln_bias, blk.ln_bias, blk.g_ln_bias));

        auto fd_linear = [&](Linear RefineBlock::*lin, Tensor Linear::*field,
                             const Tensor& grad) {
            const Tensor base = blk.*lin.*field;
            const Tensor fd = finite_difference_gradient(
                [&](const Tensor& t) {
                    probe.*lin.*field = t;
                    const real v = dot(w, probe.forward(f));
                    probe.*lin.*field = base;
                    return v;
                },
                base, h);
            return grad_rel_err(grad, fd);
        };
        worst = std::max(worst, fd_linear(&RefineBlock::fc1, &Linear::w, blk.fc1.gw));
        worst = std::max(worst, fd_linear(&RefineBlock::fc1, &Linear::b, blk.fc1.gb));
        worst = std::max(worst, fd_linear(&RefineBlock::fc2, &Linear::w, blk.fc2.gw));
        worst = std::max(worst, fd_linear(&RefineBlock::fc2, &Linear::b, blk.fc2.gb));
    }
    return worst;
}

}  // namespace

std::vector<GradCheck> gradcheck_scene(unsigned seeds) {
    const real tol = gradcheck_default_tol();
    std::vector<GradCheck> out;
    out.push_back(finish("scene.splat", check_splat_grads(seeds), tol));
    out.push_back(finish("scene.refine_block", check_refine_grads(seeds), tol));
    return out;
}

std::vector<GradCheck> gradcheck_core(unsigned seeds) {
    const real tol = gradcheck_default_tol();
    std::vector<GradCheck> out;
    out.push_back(finish("core.softmax", check_softmax(seeds), tol));
    out.push_back(finish("core.layer_norm", check_layer_norm(seeds), tol));
    out.push_back(finish("core.scaled_dot_attention", check_attention(seeds), tol));
    out.push_back(finish("core.cosine_similarity", check_cosine(seeds), tol));
    out.push_back(finish("core.linear", check_linear(seeds), tol));
    out.push_back(finish("core.activations", check_scalar_activations(seeds), tol));
    return out;
}

// --------------------------------------------------------------------------
// gauss_mamba_head checks.
// --------------------------------------------------------------------------

namespace {

// Every learnable tensor of the head paired with its gradient buffer, in a
// fixed walk order so value/grad lists from two copies line up by index.
std::vector<std::pair<Tensor*, Tensor*>> head_param_list(GaussMambaHead& h) {
    std::vector<std::pair<Tensor*, Tensor*>> v;
    v.push_back({&h.embed.w, &h.embed.gw});
    v.push_back({&h.embed.b, &h.embed.gb});
    for (auto& blk : h.blocks) {
        v.push_back({&blk.ln_gain, &blk.g_ln_gain});
        v.push_back({&blk.ln_bias, &blk.g_ln_bias});
        v.push_back({&blk.in_proj.w, &blk.in_proj.gw});
        v.push_back({&blk.in_proj.b, &blk.in_proj.gb});
        v.push_back({&blk.out_proj.w, &blk.out_proj.gw});
        v.push_back({&blk.out_proj.b, &blk.out_proj.gb});
        v.push_back({&blk.scan.a_log, &blk.scan.g_a_log});
        v.push_back({&blk.scan.w_delta, &blk.scan.g_w_delta});
        v.push_back({&blk.scan.b_delta, &blk.scan.g_b_delta});
        v.push_back({&blk.scan.w_b, &blk.scan.g_w_b});
        v.push_back({&blk.scan.w_c, &blk.scan.g_w_c});
        v.push_back({&blk.scan.d_skip, &blk.scan.g_d_skip});
    }
    v.push_back({&h.delta.w, &h.delta.gw});
    v.push_back({&h.delta.b, &h.delta.gb});
    return v;
}

real check_scan_grads(unsigned seeds) {
    real worst = 0;
    const real h = gradcheck_default_step();
    const std::size_t l = 6, d = 4, n = 3;

    for (unsigned s = 0; s < seeds; ++s) {
        Rng rng(12000 + s);
        ScanParams p(d, n);
        p.a_log = randn_tensor(rng, {d, n}, real(0.5));
        p.w_delta = randn_tensor(rng, {d, d}, real(0.5));
        p.b_delta = randn_tensor(rng, {d});
        p.w_b = randn_tensor(rng, {n, d}, real(0.5));
        p.w_c = randn_tensor(rng, {n, d}, real(0.5));
        p.d_skip = randn_tensor(rng, {d});
        const Tensor x = randn_tensor(rng, {l, d});
        const Tensor w = randn_tensor(rng, {l, d});

        ScanCache cache;
        selective_scan(x, p, &cache);
        Tensor gx({l, d});
        p.zero_grad();
        selective_scan_backward(p, cache, w, gx);

        const Tensor fd_x = finite_difference_gradient(
            [&](const Tensor& t) { return dot(w, selective_scan(t, p)); }, x, h);
        worst = std::max(worst, grad_rel_err(gx, fd_x));

        ScanParams probe = p;
        auto fd_param = [&](Tensor ScanParams::*field, const Tensor& grad) {
            const Tensor base = p.*field;
            const Tensor fd = finite_difference_gradient(
                [&](const Tensor& t) {
                    probe.*field = t;
                    const real v = dot(w, selective_scan(x, probe));
                    probe.*field = base;
                    return v;
                },
                base, h);
            return grad_rel_err(grad, fd);
        };
        worst = std::max(worst, fd_param(&ScanParams::a_log, p.g_a_log));
        worst = std::max(worst, fd_param(&ScanParams::w_delta, p.g_w_delta));
        worst = std::max(worst, fd_param(&ScanParams::b_delta, p.g_b_delta));
        worst = std::max(worst, fd_param(&ScanParams::w_b, p.g_w_b));
        worst = std::max(worst, fd_param(&ScanParams::w_c, p.g_w_c));
        worst = std::max(worst, fd_param(&ScanParams::d_skip, p.g_d_skip));
    }
    return worst;
}

// Distance (in world units) from each mean coordinate to the nearest
// quantization-cell boundary; finite-difference probes must not cross one or
// the frozen ordering would diverge from the perturbed forward pass.
real ordering_margin(const GaussianSet& set, const OrderingCurve& curve) {
    real margin = std::numeric_limits<real>::infinity();
    const real cells = real(1ull << curve.bits);
    for (std::size_t g = 0; g < set.size(); ++g)
        for (int a = 0; a < 3; ++a) {
            const real span = curve.hi[a] - curve.lo[a];
            const real c = (set.means.at(g, std::size_t(a)) - curve.lo[a]) / span * cells;
            const real frac = std::abs(c - std::round(c));
            margin = std::min(margin, frac * span / cells);
        }
    return margin;
}

real check_head_grads(unsigned seeds) {
    real worst = 0;
    const real h = gradcheck_default_step();
    GridSpec spec;
    spec.origin = {-1, -1, -1};
    spec.voxel_size = real(0.5);
    spec.extents = {4, 4, 4};
    spec.num_classes = 3;
    OrderingCurve curve;
    curve.lo = {-1, -1, -1};
    curve.hi = {1, 1, 1};
    curve.bits = 2;
    const std::size_t n = 4, d = 5;

    for (unsigned s = 0; s < seeds; ++s) {
        GaussianSet set;
        for (int attempt = 0;; ++attempt) {
            require(attempt < 200, "check_head_grads: no margin-safe fixture found");
            Rng rng(13000 + 131 * s + attempt);
            set = random_scene_set(rng, n, spec, d);
            if (ordering_margin(set, curve) > real(1e-3)) break;
        }
        Rng rng(14000 + s);
        GaussMambaHead head(d, spec.num_classes, 2, 3, 1);
        for (auto& pv : head_param_list(head))
            *pv.first = randn_tensor(rng, pv.first->shape(), real(0.4));

        GaussianSet w = zeros_like(set);
        for (Tensor GaussianSet::*field :
             {&GaussianSet::means, &GaussianSet::rotations, &GaussianSet::log_scales,
              &GaussianSet::opacity_logits, &GaussianSet::class_logits,
              &GaussianSet::features})
            w.*field = randn_tensor(rng, (set.*field).shape());

        auto loss = [&](const GaussianSet& in, const GaussMambaHead& hd) {
            const GaussianSet out = gauss_mamba_refine(in, curve, hd);
            real v = 0;
            for (Tensor GaussianSet::*field :
                 {&GaussianSet::means, &GaussianSet::rotations,
                  &GaussianSet::log_scales, &GaussianSet::opacity_logits,
                  &GaussianSet::class_logits, &GaussianSet::features})
                v += dot(w.*field, out.*field);
            return v;
        };

        HeadCache cache;
        gauss_mamba_refine(set, curve, head, &cache);
        head.zero_grad();
        GaussianSet g_set = zeros_like(set);
        gauss_mamba_backward(head, set, curve, cache, w, g_set);

        for (Tensor GaussianSet::*field :
             {&GaussianSet::means, &GaussianSet::rotations, &GaussianSet::log_scales,
              &GaussianSet::opacity_logits, &GaussianSet::class_logits,
              &GaussianSet::features}) {
            const Tensor fd = finite_difference_gradient(
                [&](const Tensor& t) {
                    GaussianSet probe = set;
                    probe.*field = t;
                    return loss(probe, head);
                },
                set.*field, h);
            worst = std::max(worst, grad_rel_err(g_set.*field, fd));
        }

        GaussMambaHead probe = head;
        auto probe_params = head_param_list(probe);
        auto value_params = head_param_list(head);
        for (std::size_t i = 0; i < probe_params.size(); ++i) {
            const Tensor base = *probe_params[i].first;
            const Tensor fd = finite_difference_gradient(
                [&](const Tensor& t) {
                    *probe_params[i].first = t;
                    const real v = loss(set, probe);
                    *probe_params[i].first = base;
                    return v;
                },
                base, h);
            worst = std::max(worst, grad_rel_err(*value_params[i].second, fd));
        }
    }
    return worst;
}

}  // namespace

std::vector<GradCheck> gradcheck_head(unsigned seeds) {
    const real tol = gradcheck_default_tol();
    std::vector<GradCheck> out;
    out.push_back(finish("head.selective_scan", check_scan_grads(seeds), tol));
    out.push_back(finish("head.refine", check_head_grads(seeds), tol));
    return out;
}

// --------------------------------------------------------------------------
// lifting checks (sampling, LiDAR lift, camera lift).
// --------------------------------------------------------------------------

namespace {

// Distance from a continuous sample coordinate to the nearest lattice line.
// Bilinear interpolation has corners there, so finite-difference fixtures
// must keep every sample point at least a probe-width away from them.
real lattice_margin(real u) {
    const real f = u - std::floor(u);
    return std::min(f, real(1) - f);
}

real check_sampler_grads(unsigned seeds) {
    const real h = gradcheck_default_step(), margin = real(1e-3);
    real worst = 0;
    for (unsigned s = 0; s < seeds; ++s) {
        Rng rng(16000 + s);
        const Tensor values = randn_tensor(rng, {2, 3, 4, 5});
        const std::size_t plane = rng.uniform_index(3);
        const Tensor w = randn_tensor(rng, {2});

        auto draw_coord = [&](real lo, real hi) {
            real u = 0;
            do u = rng.uniform(lo, hi);
            while (lattice_margin(u) < margin);
            return u;
        };

        // Plain bilinear read: position and value gradients.
        Tensor uv({2});
        uv[0] = draw_coord(real(-1.5), real(5.5));
        uv[1] = draw_coord(real(-1.5), real(4.5));
        real g_u = 0, g_v = 0;
        Tensor g_values(values.shape());
        bilinear_sample_backward(values, plane, uv[0], uv[1], w.data(), &g_values,
                                 g_u, g_v);
        Tensor hand_uv({2});
        hand_uv[0] = g_u;
        hand_uv[1] = g_v;
        auto bil_loss = [&](const Tensor& vals, real u, real v) {
            real out[2];
            bilinear_sample(vals, plane, u, v, out);
            return w[0] * out[0] + w[1] * out[1];
        };
        const Tensor fd_uv = finite_difference_gradient(
            [&](const Tensor& t) { return bil_loss(values, t[0], t[1]); }, uv, h);
        worst = std::max(worst, grad_rel_err(hand_uv, fd_uv));
        const Tensor fd_vals = finite_difference_gradient(
            [&](const Tensor& t) { return bil_loss(t, uv[0], uv[1]); }, values, h);
        worst = std::max(worst, grad_rel_err(g_values, fd_vals));

        // Deformable read: offsets, weights, and base position.
        const std::size_t p_n = 3;
        Tensor base({2});
        Tensor offsets({p_n, 2});
        Tensor wts = randn_tensor(rng, {p_n});
        for (int attempt = 0;; ++attempt) {
            require(attempt < 200, "sampler fixture: no margin-safe draw");
            base[0] = rng.uniform(real(0.5), real(4.5));
            base[1] = rng.uniform(real(0.5), real(3.5));
            offsets = randn_tensor(rng, {p_n, 2});
            real m = std::numeric_limits<real>::infinity();
            for (std::size_t k = 0; k < p_n; ++k) {
                m = std::min(m, lattice_margin(base[0] + offsets.at(k, 0)));
                m = std::min(m, lattice_margin(base[1] + offsets.at(k, 1)));
            }
            if (m >= margin) break;
        }
        auto def_loss = [&](const Tensor& offs, const Tensor& ws, real bu, real bv) {
            real out[2];
            deformable_sample(values, plane, bu, bv, offs, ws, out);
            return w[0] * out[0] + w[1] * out[1];
        };
        Tensor g_offs({p_n, 2}), g_wts({p_n});
        real g_bu = 0, g_bv = 0;
        Tensor g_values2(values.shape());
        deformable_sample_backward(values, plane, base[0], base[1], offsets, wts,
                                   w.data(), &g_values2, g_offs, g_wts, g_bu, g_bv);
        const Tensor fd_offs = finite_difference_gradient(
            [&](const Tensor& t) { return def_loss(t, wts, base[0], base[1]); },
            offsets, h);
        worst = std::max(worst, grad_rel_err(g_offs, fd_offs));
        const Tensor fd_wts = finite_difference_gradient(
            [&](const Tensor& t) { return def_loss(offsets, t, base[0], base[1]); },
            wts, h);
        worst = std::max(worst, grad_rel_err(g_wts, fd_wts));
        const Tensor fd_base = finite_difference_gradient(
            [&](const Tensor& t) { return def_loss(offsets, wts, t[0], t[1]); },
            base, h);
        Tensor hand_base({2});
        hand_base[0] = g_bu;
        hand_base[1] = g_bv;
        worst = std::max(worst, grad_rel_err(hand_base, fd_base));
    }
    return worst;
}

// Every learnable tensor of the LiDAR lift paired with its gradient buffer,
// in a fixed walk order (the scalar gate logit is handled separately).
std::vector<std::pair<Tensor*, Tensor*>> ldfa_param_list(LdfaParams& p) {
    std::vector<std::pair<Tensor*, Tensor*>> v;
    v.push_back({&p.encoder.refine.ln_gain, &p.encoder.refine.g_ln_gain});
    v.push_back({&p.encoder.refine.ln_bias, &p.encoder.refine.g_ln_bias});
    v.push_back({&p.encoder.refine.fc1.w, &p.encoder.refine.fc1.gw});
    v.push_back({&p.encoder.refine.fc1.b, &p.encoder.refine.fc1.gb});
    v.push_back({&p.encoder.refine.fc2.w, &p.encoder.refine.fc2.gw});
    v.push_back({&p.encoder.refine.fc2.b, &p.encoder.refine.fc2.gb});
    v.push_back({&p.encoder.embed.w, &p.encoder.embed.gw});
    v.push_back({&p.encoder.embed.b, &p.encoder.embed.gb});
    v.push_back({&p.offset_map.w, &p.offset_map.gw});
    v.push_back({&p.offset_map.b, &p.offset_map.gb});
    v.push_back({&p.weight_map.w, &p.weight_map.gw});
    v.push_back({&p.weight_map.b, &p.weight_map.gb});
    v.push_back({&p.mod.wq.w, &p.mod.wq.gw});
    v.push_back({&p.mod.wq.b, &p.mod.wq.gb});
    v.push_back({&p.mod.wk.w, &p.mod.wk.gw});
    v.push_back({&p.mod.wk.b, &p.mod.wk.gb});
    v.push_back({&p.mod.wv.w, &p.mod.wv.gw});
    v.push_back({&p.mod.wv.b, &p.mod.wv.gb});
    return v;
}

// Smallest lattice margin over every plane/keypoint sample of every anchor.
real ldfa_sample_margin(const GaussianSet& set, const VolumeSpec& vs,
                        const Tensor& offset_raw, std::size_t planes,
                        std::size_t keypoints) {
    real m = std::numeric_limits<real>::infinity();
    for (std::size_t i = 0; i < set.size(); ++i) {
        const real bu = (set.means.at(i, 0) - vs.origin[0]) / vs.cell_size[0] - real(0.5);
        const real bv = (set.means.at(i, 1) - vs.origin[1]) / vs.cell_size[1] - real(0.5);
        for (std::size_t d = 0; d < planes; ++d)
            for (std::size_t k = 0; k < keypoints; ++k) {
                m = std::min(m, lattice_margin(bu + offset_raw.at(i, (d * keypoints + k) * 2)));
                m = std::min(m, lattice_margin(bv + offset_raw.at(i, (d * keypoints + k) * 2 + 1)));
            }
    }
    return m;
}

real check_ldfa_grads(unsigned seeds) {
    const real h = gradcheck_default_step(), margin = real(1e-3);
    const std::size_t c_n = 3, feat = 3, d_n = 3, p_n = 2, k_n = 2, n = 3;
    real worst = 0;
    for (unsigned s = 0; s < seeds; ++s) {
        VolumeSpec vs;
        vs.depth = d_n;
        vs.height = 4;
        vs.width = 4;

        Rng vol_rng(17000 + s);
        std::vector<LidarPoint> pts;
        for (int j = 0; j < 60; ++j)
            pts.push_back({vol_rng.uniform(0, 4), vol_rng.uniform(0, 4),
                           vol_rng.uniform(0, 3), vol_rng.uniform(0, 1)});
        const FeatureVolume raw = point_cloud_to_volume(pts, vs);

        Rng plan_rng(17100 + s);
        const ChunkPlan plan = make_chunk_plan(d_n, k_n, true, plan_rng);

        // Redraw anchors and parameters until every deformed sample point
        // sits clear of the bilinear lattice lines.
        LdfaParams params(c_n, feat, d_n, p_n);
        GaussianSet set = make_gaussian_set(n, 2, feat);
        for (int attempt = 0;; ++attempt) {
            require(attempt < 200, "ldfa fixture: no margin-safe draw");
            Rng rng(17200 + 131 * s + attempt);
            for (auto& pv : ldfa_param_list(params))
                *pv.first = randn_tensor(rng, pv.first->shape(), real(0.3));
            for (std::size_t i = 0; i < params.encoder.refine.ln_gain.size(); ++i)
                params.encoder.refine.ln_gain[i] += 1;
            params.alpha_logit = real(0.5) * rng.normal();
            for (std::size_t i = 0; i < n; ++i) {
                set.means.at(i, 0) = rng.uniform(real(0.5), real(3.5));
                set.means.at(i, 1) = rng.uniform(real(0.5), real(3.5));
                set.means.at(i, 2) = rng.uniform(real(0.2), real(2.8));
            }
            set.features = randn_tensor(rng, {n, feat});
            const Tensor offset_raw = params.offset_map.forward(set.features);
            if (ldfa_sample_margin(set, vs, offset_raw, d_n, p_n) >= margin) break;
        }

        Rng cot_rng(17300 + s);
        const Tensor w = randn_tensor(cot_rng, {n, c_n});
        auto loss = [&](const GaussianSet& g, const LdfaParams& pr) {
            return weighted_sum(w, ldfa_lift(g, raw, pr, plan));
        };

        LdfaCache cache;
        const Tensor out = ldfa_lift(set, raw, params, plan, &cache);
        params.zero_grad();
        GaussianSet g_set = zeros_like(set);
        ldfa_lift_backward(params, set, cache, w, g_set);
        (void)out;

        for (auto field : {&GaussianSet::means, &GaussianSet::features}) {
            const Tensor fd = finite_difference_gradient(
                [&](const Tensor& t) {
                    GaussianSet probe = set;
                    probe.*field = t;
                    return loss(probe, params);
                },
                set.*field, h);
            worst = std::max(worst, grad_rel_err(g_set.*field, fd));
        }

        LdfaParams probe = params;
        auto probe_params = ldfa_param_list(probe);
        auto value_params = ldfa_param_list(params);
        for (std::size_t i = 0; i < probe_params.size(); ++i) {
            const Tensor base = *probe_params[i].first;
            const Tensor fd = finite_difference_gradient(
                [&](const Tensor& t) {
                    *probe_params[i].first = t;
                    const real v = loss(set, probe);
                    *probe_params[i].first = base;
                    return v;
                },
                base, h);
            worst = std::max(worst, grad_rel_err(*value_params[i].second, fd));
        }

        probe.alpha_logit = params.alpha_logit + h;
        const real fp = loss(set, probe);
        probe.alpha_logit = params.alpha_logit - h;
        const real fm = loss(set, probe);
        probe.alpha_logit = params.alpha_logit;
        const real fd_alpha = (fp - fm) / (2 * h);
        const real den = std::max(
            {real(1), std::abs(fd_alpha), std::abs(params.g_alpha_logit)});
        worst = std::max(worst, std::abs(fd_alpha - params.g_alpha_logit) / den);
    }
    return worst;
}

real check_camera_grads(unsigned seeds) {
    const real h = gradcheck_default_step(), margin = real(1e-3);
    const std::size_t c_n = 3, c_img = 2, feat = 3, p_n = 2, n = 4;
    real worst = 0;
    for (unsigned s = 0; s < seeds; ++s) {
        Rng rng(18000 + s);
        CameraFeatureMap cam;
        cam.values = randn_tensor(rng, {c_img, 1, 4, 4});
        cam.fx = 2;
        cam.fy = 2;
        cam.cx = real(1.5);
        cam.cy = real(1.5);
        cam.z_near = real(0.1);

        CameraLiftParams params(c_n, c_img, feat, p_n);
        GaussianSet set = make_gaussian_set(n, 2, feat);
        for (int attempt = 0;; ++attempt) {
            require(attempt < 200, "camera fixture: no margin-safe draw");
            Rng draw(18100 + 131 * s + attempt);
            params.embed.w = randn_tensor(draw, params.embed.w.shape(), real(0.5));
            params.embed.b = randn_tensor(draw, params.embed.b.shape(), real(0.5));
            params.offset_map.w = randn_tensor(draw, params.offset_map.w.shape(), real(0.3));
            params.offset_map.b = randn_tensor(draw, params.offset_map.b.shape(), real(0.3));
            params.weight_map.w = randn_tensor(draw, params.weight_map.w.shape(), real(0.5));
            params.weight_map.b = randn_tensor(draw, params.weight_map.b.shape(), real(0.5));
            for (std::size_t i = 0; i + 1 < n; ++i) {
                set.means.at(i, 0) = draw.uniform(real(-0.8), real(0.8));
                set.means.at(i, 1) = draw.uniform(real(-0.8), real(0.8));
                set.means.at(i, 2) = draw.uniform(real(0.8), real(2.5));
            }
            // The last anchor sits firmly behind the near plane: its output
            // row and mean gradient must both be exactly zero.
            set.means.at(n - 1, 0) = draw.uniform(real(-0.5), real(0.5));
            set.means.at(n - 1, 1) = draw.uniform(real(-0.5), real(0.5));
            set.means.at(n - 1, 2) = real(-1);
            set.features = randn_tensor(draw, {n, feat});

            const Tensor offset_raw = params.offset_map.forward(set.features);
            real m = std::numeric_limits<real>::infinity();
            for (std::size_t i = 0; i + 1 < n; ++i) {
                const real u = cam.fx * set.means.at(i, 0) / set.means.at(i, 2) + cam.cx;
                const real v = cam.fy * set.means.at(i, 1) / set.means.at(i, 2) + cam.cy;
                for (std::size_t k = 0; k < p_n; ++k) {
                    m = std::min(m, lattice_margin(u + offset_raw.at(i, 2 * k)));
                    m = std::min(m, lattice_margin(v + offset_raw.at(i, 2 * k + 1)));
                }
            }
            if (m >= margin) break;
        }

        Rng cot_rng(18200 + s);
        const Tensor w = randn_tensor(cot_rng, {n, c_n});
        auto loss = [&](const GaussianSet& g, const CameraLiftParams& pr) {
            return weighted_sum(w, camera_lift(g, cam, pr));
        };

        CameraLiftCache cache;
        camera_lift(set, cam, params, &cache);
        params.zero_grad();
        GaussianSet g_set = zeros_like(set);
        camera_lift_backward(params, set, cam, cache, w, g_set);

        for (auto field : {&GaussianSet::means, &GaussianSet::features}) {
            const Tensor fd = finite_difference_gradient(
                [&](const Tensor& t) {
                    GaussianSet probe = set;
                    probe.*field = t;
                    return loss(probe, params);
                },
                set.*field, h);
            worst = std::max(worst, grad_rel_err(g_set.*field, fd));
        }

        CameraLiftParams probe = params;
        auto walk = [](CameraLiftParams& p) {
            std::vector<std::pair<Tensor*, Tensor*>> v;
            v.push_back({&p.embed.w, &p.embed.gw});
            v.push_back({&p.embed.b, &p.embed.gb});
            v.push_back({&p.offset_map.w, &p.offset_map.gw});
            v.push_back({&p.offset_map.b, &p.offset_map.gb});
            v.push_back({&p.weight_map.w, &p.weight_map.gw});
            v.push_back({&p.weight_map.b, &p.weight_map.gb});
            return v;
        };
        auto probe_params = walk(probe);
        auto value_params = walk(params);
        for (std::size_t i = 0; i < probe_params.size(); ++i) {
            const Tensor base = *probe_params[i].first;
            const Tensor fd = finite_difference_gradient(
                [&](const Tensor& t) {
                    *probe_params[i].first = t;
                    const real v = loss(set, probe);
                    *probe_params[i].first = base;
                    return v;
                },
                base, h);
            worst = std::max(worst, grad_rel_err(*value_params[i].second, fd));
        }
    }
    return worst;
}

}  // namespace

std::vector<GradCheck> gradcheck_ldfa(unsigned seeds) {
    const real tol = gradcheck_default_tol();
    std::vector<GradCheck> out;
    out.push_back(finish("ldfa.sampling", check_sampler_grads(seeds), tol));
    out.push_back(finish("ldfa.lift", check_ldfa_grads(seeds), tol));
    out.push_back(finish("ldfa.camera", check_camera_grads(seeds), tol));
    return out;
}

// --------------------------------------------------------------------------
// ebfs checks.
// --------------------------------------------------------------------------

namespace {

real check_smooth_grads(unsigned seeds) {
    const real h = gradcheck_default_step();
    const std::size_t n = 4, c_n = 5;
    real worst = 0;
    for (unsigned s = 0; s < seeds; ++s) {
        Rng rng(19000 + s);
        SmoothingConfig cfg;
        cfg.tau = rng.uniform(real(0.5), real(2));
        const real epsilon = rng.normal();
        const Tensor f_c = randn_tensor(rng, {n, c_n});
        const Tensor f_l = randn_tensor(rng, {n, c_n});
        const Tensor wc = randn_tensor(rng, {n, c_n});
        const Tensor wl = randn_tensor(rng, {n, c_n});

        // Layer selection frozen: eval mode always applies the update.
        Rng unused(0);
        auto loss = [&](const Tensor& a, const Tensor& b, const SmoothingConfig& c,
                        real eps) {
            Rng r(0);
            auto [oc, ol] = smooth(a, b, c, eps, false, r);
            return weighted_sum(wc, oc) + weighted_sum(wl, ol);
        };

        SmoothCache cache;
        smooth(f_c, f_l, cfg, epsilon, false, unused, &cache);
        Tensor g_fc({n, c_n}), g_fl({n, c_n});
        real g_eps = 0, g_tau = 0;
        smooth_backward(f_c, f_l, cfg, epsilon, cache, wc, wl, g_fc, g_fl, g_eps,
                        &g_tau);

        const Tensor fd_fc = finite_difference_gradient(
            [&](const Tensor& t) { return loss(t, f_l, cfg, epsilon); }, f_c, h);
        worst = std::max(worst, grad_rel_err(g_fc, fd_fc));
        const Tensor fd_fl = finite_difference_gradient(
            [&](const Tensor& t) { return loss(f_c, t, cfg, epsilon); }, f_l, h);
        worst = std::max(worst, grad_rel_err(g_fl, fd_fl));

        const real fd_eps =
            (loss(f_c, f_l, cfg, epsilon + h) - loss(f_c, f_l, cfg, epsilon - h)) /
            (2 * h);
        real den = std::max({real(1), std::abs(fd_eps), std::abs(g_eps)});
        worst = std::max(worst, std::abs(fd_eps - g_eps) / den);

        SmoothingConfig up = cfg, down = cfg;
        up.tau = cfg.tau + h;
        down.tau = cfg.tau - h;
        const real fd_tau =
            (loss(f_c, f_l, up, epsilon) - loss(f_c, f_l, down, epsilon)) / (2 * h);
        den = std::max({real(1), std::abs(fd_tau), std::abs(g_tau)});
        worst = std::max(worst, std::abs(fd_tau - g_tau) / den);
    }
    return worst;
}

}  // namespace

std::vector<GradCheck> gradcheck_ebfs(unsigned seeds) {
    const real tol = gradcheck_default_tol();
    std::vector<GradCheck> out;
    out.push_back(finish("ebfs.smooth", check_smooth_grads(seeds), tol));
    return out;
}

// --------------------------------------------------------------------------
// aclf checks.
// --------------------------------------------------------------------------

namespace {

// Every learnable tensor of the fusion bundle paired with its gradient, in a
// fixed walk order.
std::vector<std::pair<Tensor*, Tensor*>> fusion_param_list(FusionParams& p) {
    std::vector<std::pair<Tensor*, Tensor*>> v;
    for (Linear* lin : {&p.q_l, &p.k_c, &p.v_c, &p.q_c, &p.k_l, &p.v_l, &p.gate1,
                        &p.gate2, &p.proj_c, &p.proj_l, &p.concat_proj}) {
        v.push_back({&lin->w, &lin->gw});
        v.push_back({&lin->b, &lin->gb});
    }
    v.push_back({&p.consist_scale, &p.g_consist_scale});
    v.push_back({&p.consist_bias, &p.g_consist_bias});
    return v;
}

real check_fuse_grads(unsigned seeds) {
    const real h = gradcheck_default_step();
    const std::size_t n = 3, d = 4, d_p = 3;
    real worst = 0;
    for (unsigned s = 0; s < seeds; ++s) {
        Rng rng(20000 + s);
        FusionParams params(d, d_p);
        for (auto& pv : fusion_param_list(params))
            *pv.first = randn_tensor(rng, pv.first->shape(), real(0.4));
        const Tensor f_c = randn_tensor(rng, {n, d});
        const Tensor f_l = randn_tensor(rng, {n, d});
        const Tensor w = randn_tensor(rng, {n, d});
        const FusionMode mode = s % 3 == 0   ? FusionMode::add
                                : s % 3 == 1 ? FusionMode::concat
                                             : FusionMode::aclf;

        auto loss = [&](const Tensor& a, const Tensor& b, const FusionParams& pr) {
            return weighted_sum(w, fuse(a, b, pr, mode));
        };

        FuseCache cache;
        fuse(f_c, f_l, params, mode, &cache);
        params.zero_grad();
        Tensor g_fc({n, d}), g_fl({n, d});
        fuse_backward(params, cache, w, g_fc, g_fl);

        const Tensor fd_fc = finite_difference_gradient(
            [&](const Tensor& t) { return loss(t, f_l, params); }, f_c, h);
        worst = std::max(worst, grad_rel_err(g_fc, fd_fc));
        const Tensor fd_fl = finite_difference_gradient(
            [&](const Tensor& t) { return loss(f_c, t, params); }, f_l, h);
        worst = std::max(worst, grad_rel_err(g_fl, fd_fl));

        FusionParams probe = params;
        auto probe_params = fusion_param_list(probe);
        auto value_params = fusion_param_list(params);
        for (std::size_t i = 0; i < probe_params.size(); ++i) {
            const Tensor base = *probe_params[i].first;
            const Tensor fd = finite_difference_gradient(
                [&](const Tensor& t) {
                    *probe_params[i].first = t;
                    const real v = loss(f_c, f_l, probe);
                    *probe_params[i].first = base;
                    return v;
                },
                base, h);
            worst = std::max(worst, grad_rel_err(*value_params[i].second, fd));
        }
    }
    return worst;
}

}  // namespace

std::vector<GradCheck> gradcheck_aclf(unsigned seeds) {
    const real tol = gradcheck_default_tol();
    std::vector<GradCheck> out;
    out.push_back(finish("aclf.fuse", check_fuse_grads(seeds), tol));
    return out;
}

// --------------------------------------------------------------------------
// losses checks.
// --------------------------------------------------------------------------

namespace {

// Smallest gap between same-class prediction errors. The Lovász backward
// freezes the descending error sort, so finite-difference probes must stay
// well clear of reordering it.
real min_error_gap(const Tensor& logits, const std::vector<std::uint16_t>& gt) {
    const std::size_t classes = logits.dim(logits.rank() - 1);
    const std::size_t voxels = logits.size() / classes;
    const Tensor p = softmax(logits, logits.rank() - 1);

    real gap = std::numeric_limits<real>::infinity();
    for (std::size_t k = 0; k < classes; ++k) {
        bool present = false;
        for (std::uint16_t label : gt) present = present || label == k;
        if (!present) continue;
        std::vector<real> e(voxels);
        for (std::size_t v = 0; v < voxels; ++v) {
            const real pk = p.data()[v * classes + k];
            e[v] = gt[v] == k ? real(1) - pk : pk;
        }
        std::sort(e.begin(), e.end());
        for (std::size_t v = 0; v + 1 < voxels; ++v)
            gap = std::min(gap, e[v + 1] - e[v]);
    }
    return gap;
}

std::vector<std::uint16_t> random_labels(Rng& rng, std::size_t voxels,
                                         std::size_t classes) {
    std::vector<std::uint16_t> gt(voxels);
    for (auto& label : gt) label = std::uint16_t(rng.uniform_index(classes));
    return gt;
}

real check_ce_grads(unsigned seeds) {
    const real h = gradcheck_default_step();
    real worst = 0;
    for (unsigned s = 0; s < seeds; ++s) {
        Rng rng(24000 + s);
        // Rank-3 logits exercise the trailing-class-axis flattening.
        const Tensor logits = randn_tensor(rng, {2, 5, 4}, real(1.5));
        const auto gt = random_labels(rng, 10, 4);

        Tensor weights({4});
        for (std::size_t c = 0; c < 4; ++c) weights[c] = rng.uniform(real(0.5), real(2));
        const Tensor* wp = s % 2 ? &weights : nullptr;

        Tensor g(logits.shape());
        ce_loss_backward(logits, gt, real(1), g, wp);
        const Tensor fd = finite_difference_gradient(
            [&](const Tensor& t) { return ce_loss(t, gt, wp); }, logits, h);
        worst = std::max(worst, grad_rel_err(g, fd));
    }
    return worst;
}

real check_lovasz_grads(unsigned seeds) {
    const real h = gradcheck_default_step();
    real worst = 0;
    for (unsigned s = 0; s < seeds; ++s) {
        Tensor logits;
        std::vector<std::uint16_t> gt;
        unsigned attempt = 0;
        for (;; ++attempt) {
            require(attempt < 200, "check_lovasz_grads: no margin fixture found");
            Rng rng(25000 + 131 * s + attempt);
            logits = randn_tensor(rng, {3, 3, 3}, real(1.5));
            gt = random_labels(rng, 9, 3);
            if (min_error_gap(logits, gt) >= real(1e-3)) break;
        }

        Tensor g(logits.shape());
        lovasz_softmax_backward(logits, gt, real(1), g);
        const Tensor fd = finite_difference_gradient(
            [&](const Tensor& t) { return lovasz_softmax(t, gt); }, logits, h);
        worst = std::max(worst, grad_rel_err(g, fd));
    }
    return worst;
}

real check_total_grads(unsigned seeds) {
    const real h = gradcheck_default_step();
    real worst = 0;
    for (unsigned s = 0; s < seeds; ++s) {
        LossWeights w;
        Tensor logits;
        std::vector<std::uint16_t> gt;
        unsigned attempt = 0;
        for (;; ++attempt) {
            require(attempt < 200, "check_total_grads: no margin fixture found");
            Rng rng(26000 + 131 * s + attempt);
            w.lambda_ce = rng.uniform(real(0.2), real(1.5));
            w.lambda_lov = rng.uniform(real(0.2), real(1.5));
            logits = randn_tensor(rng, {8, 4}, real(1.5));
            gt = random_labels(rng, 8, 4);
            if (min_error_gap(logits, gt) >= real(1e-3)) break;
        }

        Tensor g(logits.shape());
        total_loss_backward(logits, gt, w, real(1), g);
        const Tensor fd = finite_difference_gradient(
            [&](const Tensor& t) { return total_loss(t, gt, w); }, logits, h);
        worst = std::max(worst, grad_rel_err(g, fd));
    }
    return worst;
}

}  // namespace

std::vector<GradCheck> gradcheck_losses(unsigned seeds) {
    const real tol = gradcheck_default_tol();
    std::vector<GradCheck> out;
    out.push_back(finish("losses.ce", check_ce_grads(seeds), tol));
    out.push_back(finish("losses.lovasz", check_lovasz_grads(seeds), tol));
    out.push_back(finish("losses.total", check_total_grads(seeds), tol));
    return out;
}

std::vector<GradCheck> gradcheck_all(unsigned seeds) {
    std::vector<GradCheck> out;
    auto append = [&out](std::vector<GradCheck> v) {
        for (auto& c : v) out.push_back(std::move(c));
    };
    append(gradcheck_core(seeds));
    append(gradcheck_scene(seeds));
    append(gradcheck_ldfa(seeds));
    append(gradcheck_ebfs(seeds));
    append(gradcheck_aclf(seeds));
    append(gradcheck_head(seeds));
    append(gradcheck_losses(seeds));
    return out;
}

}  // namespace splatocc
