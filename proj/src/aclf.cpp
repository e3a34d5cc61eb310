#include "splatocc/aclf.hpp"

#include <cmath>

namespace splatocc {

FusionParams::FusionParams(std::size_t d, std::size_t d_p)
    : q_l(d, d),
      k_c(d, d),
      v_c(d, d),
      q_c(d, d),
      k_l(d, d),
      v_l(d, d),
      gate1(d, 2 * d),
      gate2(d, d),
      proj_c(d_p, d),
      proj_l(d_p, d),
      consist_scale({d}),
      consist_bias({d}),
      g_consist_scale({d}),
      g_consist_bias({d}),
      concat_proj(d, 2 * d) {}

void FusionParams::zero_grad() {
    q_l.zero_grad();
    k_c.zero_grad();
    v_c.zero_grad();
    q_c.zero_grad();
    k_l.zero_grad();
    v_l.zero_grad();
    gate1.zero_grad();
    gate2.zero_grad();
    proj_c.zero_grad();
    proj_l.zero_grad();
    g_consist_scale.zero();
    g_consist_bias.zero();
    concat_proj.zero_grad();
}

// ---------------------------------------------------------------------------
// Dual cross-attention.
// ---------------------------------------------------------------------------

std::pair<Tensor, Tensor> dual_cross_attention(const Tensor& f_l, const Tensor& f_c,
                                               const FusionParams& p,
                                               AttentionCache* cache) {
    require(f_l.same_shape(f_c) && f_l.rank() == 2,
            "dual_cross_attention: streams must share an (N, d) shape");
    require(f_l.dim(1) == p.dim(), "dual_cross_attention: feature width mismatch");

    Tensor ql = p.q_l.forward(f_l);
    Tensor kc = p.k_c.forward(f_c);
    Tensor vc = p.v_c.forward(f_c);
    Tensor w_lc;
    Tensor h_l = scaled_dot_attention(ql, kc, vc, &w_lc);
    h_l += f_l;

    Tensor qc = p.q_c.forward(f_c);
    Tensor kl = p.k_l.forward(f_l);
    Tensor vl = p.v_l.forward(f_l);
    Tensor w_cl;
    Tensor h_c = scaled_dot_attention(qc, kl, vl, &w_cl);
    h_c += f_c;

    if (cache) {
        cache->ql = std::move(ql);
        cache->kc = std::move(kc);
        cache->vc = std::move(vc);
        cache->w_lc = std::move(w_lc);
        cache->qc = std::move(qc);
        cache->kl = std::move(kl);
        cache->vl = std::move(vl);
        cache->w_cl = std::move(w_cl);
    }
    return {std::move(h_l), std::move(h_c)};
}

void dual_cross_attention_backward(FusionParams& p, const Tensor& f_l,
                                   const Tensor& f_c, const AttentionCache& cache,
                                   const Tensor& g_hl, const Tensor& g_hc,
                                   Tensor& g_fl, Tensor& g_fc) {
    const std::size_t n = f_l.dim(0), d = f_l.dim(1);

    // Residual identity paths.
    g_fl += g_hl;
    g_fc += g_hc;

    Tensor gq({n, d}), gk({n, d}), gv({n, d});
    scaled_dot_attention_backward(cache.ql, cache.kc, cache.vc, cache.w_lc, g_hl,
                                  gq, gk, gv);
    p.q_l.backward(f_l, gq, &g_fl);
    p.k_c.backward(f_c, gk, &g_fc);
    p.v_c.backward(f_c, gv, &g_fc);

    gq.zero();
    gk.zero();
    gv.zero();
    scaled_dot_attention_backward(cache.qc, cache.kl, cache.vl, cache.w_cl, g_hc,
                                  gq, gk, gv);
    p.q_c.backward(f_c, gq, &g_fc);
    p.k_l.backward(f_l, gk, &g_fl);
    p.v_l.backward(f_l, gv, &g_fl);
}

// ---------------------------------------------------------------------------
// Gated mixing.
// ---------------------------------------------------------------------------

std::pair<Tensor, Tensor> gated_mix(const Tensor& h_l, const Tensor& h_c,
                                    const FusionParams& p, GateCache* cache) {
    require(h_l.same_shape(h_c) && h_l.rank() == 2,
            "gated_mix: streams must share an (N, d) shape");
    const std::size_t n = h_l.dim(0), d = h_l.dim(1);

    Tensor concat({n, 2 * d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) {
            concat.at(i, c) = h_l.at(i, c);
            concat.at(i, d + c) = h_c.at(i, c);
        }

    Tensor hidden_pre = p.gate1.forward(concat);
    Tensor hidden(hidden_pre.shape());
    for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] = gelu(hidden_pre[i]);
    Tensor logits = p.gate2.forward(hidden);
    Tensor m(logits.shape());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = sigmoid(logits[i]);

    Tensor fused({n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c)
            fused.at(i, c) =
                m.at(i, c) * h_l.at(i, c) + (1 - m.at(i, c)) * h_c.at(i, c);

    if (cache) {
        cache->concat = std::move(concat);
        cache->hidden_pre = std::move(hidden_pre);
        cache->hidden = std::move(hidden);
        cache->m_gate = m;
    }
    return {std::move(fused), std::move(m)};
}

void gated_mix_backward(FusionParams& p, const Tensor& h_l, const Tensor& h_c,
                        const GateCache& cache, const Tensor& g_fused,
                        Tensor& g_hl, Tensor& g_hc) {
    const std::size_t n = h_l.dim(0), d = h_l.dim(1);

    Tensor g_logits({n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) {
            const real m = cache.m_gate.at(i, c);
            const real g = g_fused.at(i, c);
            g_hl.at(i, c) += g * m;
            g_hc.at(i, c) += g * (1 - m);
            const real g_m = g * (h_l.at(i, c) - h_c.at(i, c));
            g_logits.at(i, c) = g_m * m * (1 - m);
        }

    Tensor g_hidden({n, d});
    p.gate2.backward(cache.hidden, g_logits, &g_hidden);
    Tensor g_hidden_pre({n, d});
    for (std::size_t i = 0; i < g_hidden_pre.size(); ++i)
        g_hidden_pre[i] = g_hidden[i] * gelu_grad(cache.hidden_pre[i]);
    Tensor g_concat({n, 2 * d});
    p.gate1.backward(cache.concat, g_hidden_pre, &g_concat);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) {
            g_hl.at(i, c) += g_concat.at(i, c);
            g_hc.at(i, c) += g_concat.at(i, d + c);
        }
}

// ---------------------------------------------------------------------------
// Consistency reweighting.
// ---------------------------------------------------------------------------

std::pair<Tensor, Tensor> consistency_reweight(const Tensor& h_fused,
                                               const Tensor& f_c, const Tensor& f_l,
                                               const FusionParams& p,
                                               ConsistCache* cache) {
    require(h_fused.rank() == 2 && f_c.same_shape(f_l) && f_c.same_shape(h_fused),
            "consistency_reweight: streams must share an (N, d) shape");
    const std::size_t n = h_fused.dim(0), d = h_fused.dim(1);
    const std::size_t d_p = p.proj_c.out_dim();

    Tensor pc = p.proj_c.forward(f_c);
    Tensor pl = p.proj_l.forward(f_l);
    Tensor s({n});
    for (std::size_t i = 0; i < n; ++i) {
        const real cosv = cosine_similarity_vec(pc.row(i), pl.row(i), d_p, p.cos_eps);
        s[i] = (1 + cosv) / 2;
    }

    Tensor w({n, d});
    Tensor out({n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) {
            w.at(i, c) = sigmoid(p.consist_scale[c] * s[i] + p.consist_bias[c]);
            out.at(i, c) = h_fused.at(i, c) * w.at(i, c);
        }

    if (cache) {
        cache->pc = std::move(pc);
        cache->pl = std::move(pl);
        cache->s = std::move(s);
        cache->w = w;
    }
    return {std::move(out), std::move(w)};
}

void consistency_reweight_backward(FusionParams& p, const Tensor& h_fused,
                                   const Tensor& f_c, const Tensor& f_l,
                                   const ConsistCache& cache, const Tensor& g_final,
                                   Tensor& g_h_fused, Tensor& g_fc, Tensor& g_fl) {
    const std::size_t n = h_fused.dim(0), d = h_fused.dim(1);
    const std::size_t d_p = p.proj_c.out_dim();

    Tensor g_s({n});
    for (std::size_t i = 0; i < n; ++i) {
        real acc = 0;
        for (std::size_t c = 0; c < d; ++c) {
            const real w = cache.w.at(i, c);
            const real g = g_final.at(i, c);
            g_h_fused.at(i, c) += g * w;
            const real g_pre = g * h_fused.at(i, c) * w * (1 - w);
            p.g_consist_scale[c] += g_pre * cache.s[i];
            p.g_consist_bias[c] += g_pre;
            acc += g_pre * p.consist_scale[c];
        }
        g_s[i] = acc;
    }

    Tensor g_pc(cache.pc.shape()), g_pl(cache.pl.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const real g_cos = g_s[i] / 2;
        cosine_similarity_vec_backward(cache.pc.row(i), cache.pl.row(i), d_p,
                                       p.cos_eps, g_cos, g_pc.row(i), g_pl.row(i));
    }
    p.proj_c.backward(f_c, g_pc, &g_fc);
    p.proj_l.backward(f_l, g_pl, &g_fl);
}

// ---------------------------------------------------------------------------
// Strategy dispatcher.
// ---------------------------------------------------------------------------

Tensor fuse(const Tensor& f_c, const Tensor& f_l, const FusionParams& p,
            FusionMode mode, FuseCache* cache) {
    require(f_c.same_shape(f_l) && f_c.rank() == 2,
            "fuse: streams must share an (N, d) shape");
    const std::size_t n = f_c.dim(0), d = f_c.dim(1);
    if (cache) {
        cache->mode = mode;
        cache->f_c = f_c;
        cache->f_l = f_l;
    }

    switch (mode) {
        case FusionMode::add: {
            Tensor out = f_c;
            out += f_l;
            return out;
        }
        case FusionMode::concat: {
            Tensor concat({n, 2 * d});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < d; ++c) {
                    concat.at(i, c) = f_c.at(i, c);
                    concat.at(i, d + c) = f_l.at(i, c);
                }
            Tensor out = p.concat_proj.forward(concat);
            if (cache) cache->concat_in = std::move(concat);
            return out;
        }
        case FusionMode::aclf:
            break;
    }

    AttentionCache attn;
    auto [h_l, h_c] =
        dual_cross_attention(f_l, f_c, p, cache ? &attn : nullptr);
    GateCache gate;
    auto [h_fused, m_gate] = gated_mix(h_l, h_c, p, cache ? &gate : nullptr);
    ConsistCache consist;
    auto [f_final, w_consist] =
        consistency_reweight(h_fused, f_c, f_l, p, cache ? &consist : nullptr);
    (void)m_gate;
    (void)w_consist;

    if (cache) {
        cache->attn = std::move(attn);
        cache->h_l = std::move(h_l);
        cache->h_c = std::move(h_c);
        cache->gate = std::move(gate);
        cache->h_fused = std::move(h_fused);
        cache->consist = std::move(consist);
    }
    return f_final;
}

void fuse_backward(FusionParams& p, const FuseCache& cache, const Tensor& g_final,
                   Tensor& g_fc, Tensor& g_fl) {
    const std::size_t n = cache.f_c.dim(0), d = cache.f_c.dim(1);
    require(g_final.rank() == 2 && g_final.dim(0) == n && g_final.dim(1) == d,
            "fuse_backward: upstream gradient shape mismatch");

    switch (cache.mode) {
        case FusionMode::add:
            g_fc += g_final;
            g_fl += g_final;
            return;
        case FusionMode::concat: {
            Tensor g_concat({n, 2 * d});
            p.concat_proj.backward(cache.concat_in, g_final, &g_concat);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < d; ++c) {
                    g_fc.at(i, c) += g_concat.at(i, c);
                    g_fl.at(i, c) += g_concat.at(i, d + c);
                }
            return;
        }
        case FusionMode::aclf:
            break;
    }

    Tensor g_h_fused({n, d});
    consistency_reweight_backward(p, cache.h_fused, cache.f_c, cache.f_l,
                                  cache.consist, g_final, g_h_fused, g_fc, g_fl);
    Tensor g_hl({n, d}), g_hc({n, d});
    gated_mix_backward(p, cache.h_l, cache.h_c, cache.gate, g_h_fused, g_hl, g_hc);
    dual_cross_attention_backward(p, cache.f_l, cache.f_c, cache.attn, g_hl, g_hc,
                                  g_fl, g_fc);
}

}  // namespace splatocc
