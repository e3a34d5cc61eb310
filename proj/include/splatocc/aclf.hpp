#pragma once

#include <utility>

#include "splatocc/ops.hpp"
#include "splatocc/tensor.hpp"

namespace splatocc {

// ---------------------------------------------------------------------------
// Adaptive camera/LiDAR fusion: residual cross-attention in both directions
// over the Gaussian sequence, a learned per-channel soft gate mixing the two
// attended streams, and a cosine-consistency channel gate reweighting the
// result. Plain addition and learned concatenation are kept as baseline
// strategies behind the same parameter bundle.
// ---------------------------------------------------------------------------

enum class FusionMode { add, concat, aclf };

struct FusionParams {
    // Cross-attention projections (each d -> d).
    Linear q_l, k_c, v_c;  // LiDAR-dominant stream: F_L queries camera keys/values
    Linear q_c, k_l, v_l;  // camera-dominant stream
    // Gate MLP 2d -> d -> d with a smooth nonlinearity between.
    Linear gate1, gate2;
    // Consistency projections (d -> d_p) and the per-channel affine that maps
    // the scalar consensus signal to a channel gate.
    Linear proj_c, proj_l;
    Tensor consist_scale, consist_bias;      // (d) each
    Tensor g_consist_scale, g_consist_bias;  // gradients
    // Learned projection for the concatenation baseline (d <- 2d).
    Linear concat_proj;
    real cos_eps = real(1e-8);

    FusionParams() = default;
    FusionParams(std::size_t d, std::size_t d_p);

    std::size_t dim() const { return q_l.in_dim(); }
    void zero_grad();
};

struct AttentionCache {
    Tensor ql, kc, vc, w_lc;  // LiDAR-dominant stream pieces; w: (N, N)
    Tensor qc, kl, vl, w_cl;
};

// Eq.-shaped residual cross-attention: h_l = f_l + attn(q_l(f_l), k_c(f_c),
// v_c(f_c)) and symmetrically for h_c. Returns (h_l, h_c).
std::pair<Tensor, Tensor> dual_cross_attention(const Tensor& f_l, const Tensor& f_c,
                                               const FusionParams& p,
                                               AttentionCache* cache = nullptr);

void dual_cross_attention_backward(FusionParams& p, const Tensor& f_l,
                                   const Tensor& f_c, const AttentionCache& cache,
                                   const Tensor& g_hl, const Tensor& g_hc,
                                   Tensor& g_fl, Tensor& g_fc);

struct GateCache {
    Tensor concat;      // (N, 2d) [h_l ; h_c]
    Tensor hidden_pre;  // (N, d)
    Tensor hidden;      // (N, d) after the nonlinearity
    Tensor m_gate;      // (N, d) in (0, 1)
};

// h_fused = m ⊙ h_l + (1 - m) ⊙ h_c with m = logistic(MLP([h_l ; h_c])).
// Returns (h_fused, m_gate).
std::pair<Tensor, Tensor> gated_mix(const Tensor& h_l, const Tensor& h_c,
                                    const FusionParams& p, GateCache* cache = nullptr);

void gated_mix_backward(FusionParams& p, const Tensor& h_l, const Tensor& h_c,
                        const GateCache& cache, const Tensor& g_fused,
                        Tensor& g_hl, Tensor& g_hc);

struct ConsistCache {
    Tensor pc, pl;  // projected latents (N, d_p)
    Tensor s;       // (N) scalar consensus (1 + cos) / 2
    Tensor w;       // (N, d) channel gate in (0, 1)
};

// Per Gaussian: cosine of the projected camera/LiDAR latents mapped to [0,1],
// then through the per-channel affine + logistic; the fused features are
// reweighted elementwise. Returns (f_final, w_consist).
std::pair<Tensor, Tensor> consistency_reweight(const Tensor& h_fused,
                                               const Tensor& f_c, const Tensor& f_l,
                                               const FusionParams& p,
                                               ConsistCache* cache = nullptr);

void consistency_reweight_backward(FusionParams& p, const Tensor& h_fused,
                                   const Tensor& f_c, const Tensor& f_l,
                                   const ConsistCache& cache, const Tensor& g_final,
                                   Tensor& g_h_fused, Tensor& g_fc, Tensor& g_fl);

struct FuseCache {
    FusionMode mode = FusionMode::aclf;
    Tensor f_c, f_l;    // inputs as given
    AttentionCache attn;
    Tensor h_l, h_c;
    GateCache gate;
    Tensor h_fused;
    ConsistCache consist;
    Tensor concat_in;   // concat baseline input (N, 2d)
};

// The configured fusion strategy. add: f_c + f_l. concat: Linear([f_c; f_l]).
// aclf: dual_cross_attention -> gated_mix -> consistency_reweight.
Tensor fuse(const Tensor& f_c, const Tensor& f_l, const FusionParams& p,
            FusionMode mode, FuseCache* cache = nullptr);

void fuse_backward(FusionParams& p, const FuseCache& cache, const Tensor& g_final,
                   Tensor& g_fc, Tensor& g_fl);

}  // namespace splatocc
