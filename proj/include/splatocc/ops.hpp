#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>

#include "splatocc/tensor.hpp"

namespace splatocc {

// ---------------------------------------------------------------------------
// Scalar helpers (numerically stable forms).
// ---------------------------------------------------------------------------

inline real sigmoid(real x) {
    if (x >= 0) return real(1) / (real(1) + std::exp(-x));
    const real e = std::exp(x);
    return e / (real(1) + e);
}

inline real softplus(real x) {
    return std::max(x, real(0)) + std::log1p(std::exp(-std::abs(x)));
}

// Exact (erf-based) GELU and its derivative.
inline real gelu(real x) {
    return real(0.5) * x * (real(1) + std::erf(x / std::numbers::sqrt2_v<real>));
}

inline real gelu_grad(real x) {
    const real phi = std::exp(real(-0.5) * x * x) *
                     real(0.5) * std::numbers::inv_sqrtpi_v<real> *
                     std::numbers::sqrt2_v<real>;
    return real(0.5) * (real(1) + std::erf(x / std::numbers::sqrt2_v<real>)) + x * phi;
}

// ---------------------------------------------------------------------------
// softmax with temperature along an axis.
// ---------------------------------------------------------------------------

// y = softmax(x / temperature) along `axis`, max-subtracted for stability.
Tensor softmax(const Tensor& x, std::size_t axis, real temperature = real(1));

// Accumulates d(loss)/dx into gx given y = softmax(x, axis, temperature) and
// upstream gy. If g_temperature is non-null the temperature gradient is
// accumulated there too (requires x).
void softmax_backward(const Tensor& x, const Tensor& y, const Tensor& gy,
                      std::size_t axis, real temperature, Tensor& gx,
                      real* g_temperature = nullptr);

// ---------------------------------------------------------------------------
// layer_norm over the last axis.
// ---------------------------------------------------------------------------

// Per-row over the last axis: y = gain * (x - mean) / sqrt(var + eps) + bias.
// Variance is the biased (1/N) estimator.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  real eps = real(1e-5));

void layer_norm_backward(const Tensor& x, const Tensor& gain, real eps,
                         const Tensor& gy, Tensor& gx, Tensor& g_gain,
                         Tensor& g_bias);

// ---------------------------------------------------------------------------
// Scaled dot-product attention.
// ---------------------------------------------------------------------------

// Y = softmax(Q K^T / sqrt(d)) V. Q: (Lq, d), K: (Lk, d), V: (Lk, dv).
// If weights_out is non-null the (Lq, Lk) row-stochastic weight matrix is
// stored there (the backward pass needs it).
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            Tensor* weights_out = nullptr);

void scaled_dot_attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const Tensor& weights, const Tensor& gy,
                                   Tensor& gq, Tensor& gk, Tensor& gv);

// ---------------------------------------------------------------------------
// Cosine similarity.
// ---------------------------------------------------------------------------

// cos(a, b) with denominator max(|a||b|, eps). Rank-1 inputs give a length-1
// tensor; rank-2 (N, d) inputs give one value per row.
Tensor cosine_similarity(const Tensor& a, const Tensor& b, real eps = real(1e-8));

real cosine_similarity_vec(const real* a, const real* b, std::size_t n, real eps);

// Accumulates gradients for a single row pair given upstream scalar g.
void cosine_similarity_vec_backward(const real* a, const real* b, std::size_t n,
                                    real eps, real g, real* ga, real* gb);

// ---------------------------------------------------------------------------
// Finite-difference oracle.
// ---------------------------------------------------------------------------

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
Tensor finite_difference_gradient(const std::function<real(const Tensor&)>& f,
                                  const Tensor& x, real h = real(1e-5));

// ---------------------------------------------------------------------------
// Linear layer (the building block every module's projections use).
// ---------------------------------------------------------------------------

// y = x W^T + b with W stored (out, in). Gradient buffers live next to the
// values so optimizers and the checker can walk them uniformly.
struct Linear {
    Tensor w, b;
    Tensor gw, gb;

    Linear() = default;
    Linear(std::size_t out, std::size_t in);

    std::size_t out_dim() const { return w.dim(0); }
    std::size_t in_dim() const { return w.dim(1); }

    // x: (N, in) -> (N, out).
    Tensor forward(const Tensor& x) const;

    // Accumulates gw, gb, and (if gx non-null) the input gradient.
    void backward(const Tensor& x, const Tensor& gy, Tensor* gx);

    void zero_grad();
};

}  // namespace splatocc
