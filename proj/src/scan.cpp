#include "splatocc/scan.hpp"

#include <cmath>

#include "splatocc/linalg.hpp"

namespace splatocc {

ScanParams::ScanParams(std::size_t d, std::size_t n)
    : a_log({d, n}),
      w_delta({d, d}),
      b_delta({d}),
      w_b({n, d}),
      w_c({n, d}),
      d_skip(Tensor::full({d}, real(1))),
      g_a_log({d, n}),
      g_w_delta({d, d}),
      g_b_delta({d}),
      g_w_b({n, d}),
      g_w_c({n, d}),
      g_d_skip({d}) {
    for (std::size_t j = 0; j < d; ++j)
        for (std::size_t i = 0; i < n; ++i)
            a_log.at(j, i) = std::log(real(1) + real(i));
}

void ScanParams::zero_grad() {
    g_a_log.zero();
    g_w_delta.zero();
    g_b_delta.zero();
    g_w_b.zero();
    g_w_c.zero();
    g_d_skip.zero();
}

namespace {

void project_inputs(const Tensor& x, const ScanParams& p, Tensor& delta_pre,
                    Tensor& delta, Tensor& b_seq, Tensor& c_seq) {
    const std::size_t l = x.dim(0), d = p.feat_dim(), n = p.state_dim();
    delta_pre = Tensor({l, d});
    gemm(false, true, l, d, d, real(1), x.data(), d, p.w_delta.data(), d, real(0),
         delta_pre.data(), d);
    for (std::size_t t = 0; t < l; ++t)
        for (std::size_t j = 0; j < d; ++j) delta_pre.at(t, j) += p.b_delta[j];
    delta = Tensor({l, d});
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = softplus(delta_pre[i]);

    b_seq = Tensor({l, n});
    gemm(false, true, l, n, d, real(1), x.data(), d, p.w_b.data(), d, real(0),
         b_seq.data(), n);
    c_seq = Tensor({l, n});
    gemm(false, true, l, n, d, real(1), x.data(), d, p.w_c.data(), d, real(0),
         c_seq.data(), n);
}

}  // namespace

Tensor selective_scan(const Tensor& x, const ScanParams& p, ScanCache* cache) {
    require(x.rank() == 2 && x.dim(1) == p.feat_dim(), "selective_scan: bad input shape");
    const std::size_t l = x.dim(0), d = p.feat_dim(), n = p.state_dim();

    Tensor delta_pre, delta, b_seq, c_seq;
    project_inputs(x, p, delta_pre, delta, b_seq, c_seq);

    Tensor a({d, n});
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(p.a_log[i]);

    Tensor h({l, d, n});
    Tensor abar({l, d, n});
    Tensor y({l, d});

    // Channels are independent given the projections; each owns its slice of
    // h, abar, and y, so the parallel loop is deterministic.
#pragma omp parallel for schedule(static)
    for (long long jj = 0; jj < (long long)d; ++jj) {
        const std::size_t j = std::size_t(jj);
        for (std::size_t t = 0; t < l; ++t) {
            const real dt = delta.at(t, j);
            const real xt = x.at(t, j);
            real acc = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const real ab = std::exp(dt * a.at(j, i));
                const real prev = t > 0 ? h.at(t - 1, j, i) : real(0);
                const real ht = ab * prev + dt * b_seq.at(t, i) * xt;
                h.at(t, j, i) = ht;
                abar.at(t, j, i) = ab;
                acc += c_seq.at(t, i) * ht;
            }
            y.at(t, j) = acc + p.d_skip[j] * xt;
        }
    }

    if (cache) {
        cache->x = x;
        cache->delta_pre = std::move(delta_pre);
        cache->delta = std::move(delta);
        cache->b_seq = std::move(b_seq);
        cache->c_seq = std::move(c_seq);
        cache->h = std::move(h);
        cache->abar = std::move(abar);
    }
    return y;
}

Tensor selective_scan_reference(const Tensor& x, const ScanParams& p) {
    require(x.rank() == 2 && x.dim(1) == p.feat_dim(), "selective_scan: bad input shape");
    const std::size_t l = x.dim(0), d = p.feat_dim(), n = p.state_dim();

    std::vector<real> a(d * n);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(p.a_log[i]);

    std::vector<real> h(d * n, real(0));
    Tensor y({l, d});
    for (std::size_t t = 0; t < l; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
            real pre = p.b_delta[j];
            for (std::size_t k = 0; k < d; ++k) pre += x.at(t, k) * p.w_delta.at(j, k);
            const real dt = softplus(pre);
            const real xt = x.at(t, j);
            real acc = 0;
            for (std::size_t i = 0; i < n; ++i) {
                real bt = 0, ct = 0;
                for (std::size_t k = 0; k < d; ++k) {
                    bt += x.at(t, k) * p.w_b.at(i, k);
                    ct += x.at(t, k) * p.w_c.at(i, k);
                }
                real& hji = h[j * n + i];
                hji = std::exp(dt * a[j * n + i]) * hji + dt * bt * xt;
                acc += ct * hji;
            }
            y.at(t, j) = acc + p.d_skip[j] * xt;
        }
    }
    return y;
}

void selective_scan_backward(ScanParams& p, const ScanCache& cache, const Tensor& gy,
                             Tensor& gx) {
    const std::size_t l = cache.x.dim(0), d = p.feat_dim(), n = p.state_dim();
    require(gy.same_shape(cache.x) && gx.same_shape(cache.x),
            "selective_scan_backward: shape mismatch");

    Tensor a({d, n});
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(p.a_log[i]);

    // Gradient flowing into h_t from the t+1 recurrence step.
    Tensor gh_next({d, n});
    std::vector<real> gdelta(d), gb_t(n), gc_t(n);

    for (std::size_t t = l; t-- > 0;) {
        std::fill(gdelta.begin(), gdelta.end(), real(0));
        std::fill(gb_t.begin(), gb_t.end(), real(0));
        std::fill(gc_t.begin(), gc_t.end(), real(0));

        for (std::size_t j = 0; j < d; ++j) {
            const real gyj = gy.at(t, j);
            const real xt = cache.x.at(t, j);
            const real dt = cache.delta.at(t, j);
            gx.at(t, j) += gyj * p.d_skip[j];
            p.g_d_skip[j] += gyj * xt;

            for (std::size_t i = 0; i < n; ++i) {
                const real gh = gyj * cache.c_seq.at(t, i) + gh_next.at(j, i);
                gc_t[i] += gyj * cache.h.at(t, j, i);

                const real ab = cache.abar.at(t, j, i);
                const real hprev = t > 0 ? cache.h.at(t - 1, j, i) : real(0);
                gh_next.at(j, i) = gh * ab;  // becomes d/dh_{t-1}
                const real gabar = gh * hprev;
                gdelta[j] += gabar * a.at(j, i) * ab + gh * cache.b_seq.at(t, i) * xt;
                // dA/da_log = A itself (A = -exp(a_log)).
                p.g_a_log.at(j, i) += gabar * dt * ab * a.at(j, i);
                gb_t[i] += gh * dt * xt;
                gx.at(t, j) += gh * dt * cache.b_seq.at(t, i);
            }
        }

        // Through the per-step projections.
        for (std::size_t j = 0; j < d; ++j) {
            const real gpre = gdelta[j] * sigmoid(cache.delta_pre.at(t, j));
            p.g_b_delta[j] += gpre;
            for (std::size_t k = 0; k < d; ++k) {
                p.g_w_delta.at(j, k) += gpre * cache.x.at(t, k);
                gx.at(t, k) += gpre * p.w_delta.at(j, k);
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < d; ++k) {
                p.g_w_b.at(i, k) += gb_t[i] * cache.x.at(t, k);
                gx.at(t, k) += gb_t[i] * p.w_b.at(i, k);
                p.g_w_c.at(i, k) += gc_t[i] * cache.x.at(t, k);
                gx.at(t, k) += gc_t[i] * p.w_c.at(i, k);
            }
        }
    }
}

MambaBlock::MambaBlock(std::size_t d, std::size_t n)
    : ln_gain(Tensor::full({d}, real(1))),
      ln_bias({d}),
      g_ln_gain({d}),
      g_ln_bias({d}),
      in_proj(d, d),
      out_proj(d, d),
      scan(d, n) {}

Tensor MambaBlock::forward(const Tensor& x, MambaBlockCache* cache) const {
    Tensor normed = layer_norm(x, ln_gain, ln_bias, eps);
    Tensor u = in_proj.forward(normed);
    ScanCache scache;
    Tensor s = selective_scan(u, scan, cache ? &scache : nullptr);
    Tensor y = out_proj.forward(s);
    y += x;
    if (cache) {
        cache->input = x;
        cache->normed = std::move(normed);
        cache->proj_in = std::move(u);
        cache->scan_out = std::move(s);
        cache->scan = std::move(scache);
    }
    return y;
}

void MambaBlock::backward(const MambaBlockCache& cache, const Tensor& gy, Tensor& gx) {
    gx += gy;  // residual path
    Tensor gs(cache.scan_out.shape());
    out_proj.backward(cache.scan_out, gy, &gs);
    Tensor gu(cache.proj_in.shape());
    selective_scan_backward(scan, cache.scan, gs, gu);
    Tensor gnormed(cache.normed.shape());
    in_proj.backward(cache.normed, gu, &gnormed);
    layer_norm_backward(cache.input, ln_gain, eps, gnormed, gx, g_ln_gain, g_ln_bias);
}

void MambaBlock::zero_grad() {
    g_ln_gain.zero();
    g_ln_bias.zero();
    in_proj.zero_grad();
    out_proj.zero_grad();
    scan.zero_grad();
}

}  // namespace splatocc
