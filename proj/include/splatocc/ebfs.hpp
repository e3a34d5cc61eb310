#pragma once

#include <utility>

#include "splatocc/rng.hpp"
#include "splatocc/tensor.hpp"

namespace splatocc {

// ---------------------------------------------------------------------------
// Entropy-based feature smoothing. The camera and LiDAR feature rows of each
// Gaussian are read as channel distributions; the bidirectional cross-entropy
// between them decays into per-Gaussian modulation weights, which drive a
// residual update scaled by a learnable epsilon. Training applies the update
// stochastically per layer; evaluation always applies it.
// ---------------------------------------------------------------------------

struct SmoothingConfig {
    real tau = 1;            // softmax temperature (> 0)
    real xi = real(1e-6);    // log/normalization stabilizer (> 0)
    real p_sel = real(0.5);  // train-mode layer selection probability

    bool operator==(const SmoothingConfig&) const = default;
};

// Rows of f become probability rows: softmax(f / tau) over the channel axis.
Tensor to_distribution(const Tensor& f, real tau);

// Per-row cross entropy H[i] = -sum_c p(i,c) * log(q(i,c) + xi). (N, C) x
// (N, C) -> (N).
Tensor cross_entropy_map(const Tensor& p, const Tensor& q, real xi);

// Exponential-decay weights normalized over the two directions plus xi:
// w_first = exp(-h_first) / (exp(-h_first) + exp(-h_second) + xi), and
// symmetrically for w_second.
std::pair<Tensor, Tensor> modulation_weights(const Tensor& h_first,
                                             const Tensor& h_second, real xi);

struct SmoothCache {
    bool applied = false;
    Tensor p_c, p_l;    // (N, C) distributions
    Tensor h_cl, h_lc;  // (N) cross entropies (camera->lidar, lidar->camera)
    Tensor w_c, w_l;    // (N) modulation weights
};

// The full smoothing layer on a camera/LiDAR feature pair. When train is set
// the update is applied with probability cfg.p_sel (one Bernoulli draw per
// call); in eval mode it is always applied. Returns (f_c_out, f_l_out).
std::pair<Tensor, Tensor> smooth(const Tensor& f_c, const Tensor& f_l,
                                 const SmoothingConfig& cfg, real epsilon,
                                 bool train, Rng& rng,
                                 SmoothCache* cache = nullptr);

// Backward through the applied (or skipped) layer recorded in the cache.
// Accumulates input gradients, the epsilon gradient, and optionally the
// temperature gradient.
void smooth_backward(const Tensor& f_c, const Tensor& f_l,
                     const SmoothingConfig& cfg, real epsilon,
                     const SmoothCache& cache, const Tensor& g_fc_out,
                     const Tensor& g_fl_out, Tensor& g_fc, Tensor& g_fl,
                     real& g_epsilon, real* g_tau = nullptr);

}  // namespace splatocc
