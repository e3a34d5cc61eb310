#include "splatocc/ebfs.hpp"

#include <cmath>

#include "splatocc/ops.hpp"

namespace splatocc {

Tensor to_distribution(const Tensor& f, real tau) {
    require(tau > 0, "to_distribution: temperature must be positive");
    require(f.rank() == 2, "to_distribution: expected (N, C) features");
    return softmax(f, 1, tau);
}

Tensor cross_entropy_map(const Tensor& p, const Tensor& q, real xi) {
    require(p.same_shape(q) && p.rank() == 2,
            "cross_entropy_map: distributions must share an (N, C) shape");
    const std::size_t n = p.dim(0), c_n = p.dim(1);
    Tensor h({n});
    for (std::size_t i = 0; i < n; ++i) {
        real acc = 0;
        for (std::size_t c = 0; c < c_n; ++c) {
            const real pv = p.at(i, c);
            // 0 * log(0) reads as 0 so hand-built point masses work at xi = 0.
            if (pv != 0) acc -= pv * std::log(q.at(i, c) + xi);
        }
        h[i] = acc;
    }
    return h;
}

std::pair<Tensor, Tensor> modulation_weights(const Tensor& h_first,
                                             const Tensor& h_second, real xi) {
    require(h_first.same_shape(h_second) && h_first.rank() == 1,
            "modulation_weights: entropies must share an (N) shape");
    const std::size_t n = h_first.size();
    Tensor w_first({n}), w_second({n});
    for (std::size_t i = 0; i < n; ++i) {
        const real e1 = std::exp(-h_first[i]);
        const real e2 = std::exp(-h_second[i]);
        const real omega = e1 + e2 + xi;
        w_first[i] = e1 / omega;
        w_second[i] = e2 / omega;
    }
    return {std::move(w_first), std::move(w_second)};
}

std::pair<Tensor, Tensor> smooth(const Tensor& f_c, const Tensor& f_l,
                                 const SmoothingConfig& cfg, real epsilon,
                                 bool train, Rng& rng, SmoothCache* cache) {
    require(f_c.same_shape(f_l) && f_c.rank() == 2,
            "smooth: feature streams must share an (N, C) shape");
    // Softmax outputs are strictly positive, so omega stays positive even at
    // xi = 0; only negative floors are rejected.
    require(cfg.xi >= 0, "smooth: xi must be non-negative");

    const bool applied = train ? rng.bernoulli(cfg.p_sel) : true;
    if (!applied) {
        if (cache) *cache = SmoothCache{};
        return {f_c, f_l};
    }

    Tensor p_c = to_distribution(f_c, cfg.tau);
    Tensor p_l = to_distribution(f_l, cfg.tau);
    Tensor h_cl = cross_entropy_map(p_c, p_l, cfg.xi);
    Tensor h_lc = cross_entropy_map(p_l, p_c, cfg.xi);
    auto [w_c, w_l] = modulation_weights(h_cl, h_lc, cfg.xi);

    const std::size_t n = f_c.dim(0), c_n = f_c.dim(1);
    Tensor out_c = f_c, out_l = f_l;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < c_n; ++c) {
            out_c.at(i, c) += epsilon * w_c[i];
            out_l.at(i, c) += epsilon * w_l[i];
        }

    if (cache) {
        cache->applied = true;
        cache->p_c = std::move(p_c);
        cache->p_l = std::move(p_l);
        cache->h_cl = std::move(h_cl);
        cache->h_lc = std::move(h_lc);
        cache->w_c = std::move(w_c);
        cache->w_l = std::move(w_l);
    }
    return {std::move(out_c), std::move(out_l)};
}

void smooth_backward(const Tensor& f_c, const Tensor& f_l,
                     const SmoothingConfig& cfg, real epsilon,
                     const SmoothCache& cache, const Tensor& g_fc_out,
                     const Tensor& g_fl_out, Tensor& g_fc, Tensor& g_fl,
                     real& g_epsilon, real* g_tau) {
    require(g_fc_out.same_shape(f_c) && g_fl_out.same_shape(f_l),
            "smooth_backward: upstream gradient shape mismatch");

    // Residual identity path (also the whole story for a skipped layer).
    g_fc += g_fc_out;
    g_fl += g_fl_out;
    if (!cache.applied) return;

    const std::size_t n = f_c.dim(0), c_n = f_c.dim(1);
    const real xi = cfg.xi;

    // Row sums of the upstream gradients: the broadcast W_i collects them.
    Tensor s_c({n}), s_l({n});
    for (std::size_t i = 0; i < n; ++i) {
        real a = 0, b = 0;
        for (std::size_t c = 0; c < c_n; ++c) {
            a += g_fc_out.at(i, c);
            b += g_fl_out.at(i, c);
        }
        s_c[i] = a;
        s_l[i] = b;
    }

    real eps_acc = 0;
    Tensor g_pc({n, c_n}), g_pl({n, c_n});
    for (std::size_t i = 0; i < n; ++i) {
        eps_acc += s_c[i] * cache.w_c[i] + s_l[i] * cache.w_l[i];

        // out = f + epsilon * w, so the weight gradients carry epsilon.
        const real gwc = epsilon * s_c[i];
        const real gwl = epsilon * s_l[i];

        // Through w = e / omega with omega = e_c + e_l + xi.
        const real e_c = std::exp(-cache.h_cl[i]);
        const real e_l = std::exp(-cache.h_lc[i]);
        const real omega = e_c + e_l + xi;
        const real inv2 = real(1) / (omega * omega);
        const real g_ec = (gwc * (omega - e_c) - gwl * e_l) * inv2;
        const real g_el = (gwl * (omega - e_l) - gwc * e_c) * inv2;
        const real g_hcl = -e_c * g_ec;
        const real g_hlc = -e_l * g_el;

        // H_cl = -sum_c p_c log(p_l + xi) and symmetrically for H_lc.
        for (std::size_t c = 0; c < c_n; ++c) {
            const real pc = cache.p_c.at(i, c), pl = cache.p_l.at(i, c);
            g_pc.at(i, c) = -g_hcl * std::log(pl + xi) - g_hlc * pl / (pc + xi);
            g_pl.at(i, c) = -g_hcl * pc / (pl + xi) - g_hlc * std::log(pc + xi);
        }
    }
    g_epsilon += eps_acc;

    softmax_backward(f_c, cache.p_c, g_pc, 1, cfg.tau, g_fc, g_tau);
    softmax_backward(f_l, cache.p_l, g_pl, 1, cfg.tau, g_fl, g_tau);
}

}  // namespace splatocc
