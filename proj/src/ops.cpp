#include "splatocc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "splatocc/linalg.hpp"

namespace splatocc {

namespace {

// Decompose a shape around `axis` into (outer, extent, inner) so any-axis
// reductions walk contiguous strides.
struct AxisView {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const std::vector<std::size_t>& shape, std::size_t axis) {
    require(axis < shape.size(), "softmax: axis out of range");
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
    v.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
    return v;
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis, real temperature) {
    require(temperature > real(0), "softmax: temperature must be positive");
    check_finite(x, "softmax input");
    const AxisView v = axis_view(x.shape(), axis);
    require(v.extent > 0, "softmax: empty axis");

    Tensor y(x.shape());
    const real* xd = x.data();
    real* yd = y.data();
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.extent * v.inner + in;
            real m = -std::numeric_limits<real>::infinity();
            for (std::size_t e = 0; e < v.extent; ++e)
                m = std::max(m, xd[base + e * v.inner] / temperature);
            real z = 0;
            for (std::size_t e = 0; e < v.extent; ++e) {
                const real t = std::exp(xd[base + e * v.inner] / temperature - m);
                yd[base + e * v.inner] = t;
                z += t;
            }
            for (std::size_t e = 0; e < v.extent; ++e) yd[base + e * v.inner] /= z;
        }
    }
    return y;
}

void softmax_backward(const Tensor& x, const Tensor& y, const Tensor& gy,
                      std::size_t axis, real temperature, Tensor& gx,
                      real* g_temperature) {
    require(x.same_shape(y) && x.same_shape(gy) && x.same_shape(gx),
            "softmax_backward: shape mismatch");
    const AxisView v = axis_view(x.shape(), axis);
    const real* xd = x.data();
    const real* yd = y.data();
    const real* gd = gy.data();
    real* od = gx.data();
    real gt = 0;
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.extent * v.inner + in;
            real dotgy = 0;
            for (std::size_t e = 0; e < v.extent; ++e) {
                const std::size_t i = base + e * v.inner;
                dotgy += gd[i] * yd[i];
            }
            for (std::size_t e = 0; e < v.extent; ++e) {
                const std::size_t i = base + e * v.inner;
                const real gz = yd[i] * (gd[i] - dotgy);  // grad wrt z = x / tau
                od[i] += gz / temperature;
                gt -= gz * xd[i] / (temperature * temperature);
            }
        }
    }
    if (g_temperature) *g_temperature += gt;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  real eps) {
    require(x.rank() >= 1, "layer_norm: rank-0 input");
    const std::size_t n = x.dim(x.rank() - 1);
    require(n > 0, "layer_norm: empty normalized axis");
    require(gain.size() == n && bias.size() == n,
            "layer_norm: gain/bias must match the last-axis extent");
    const std::size_t rows = x.size() / n;

    Tensor y(x.shape());
    const real* xd = x.data();
    real* yd = y.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const real* xr = xd + r * n;
        real* yr = yd + r * n;
        real mean = 0;
        for (std::size_t i = 0; i < n; ++i) mean += xr[i];
        mean /= real(n);
        real var = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const real d = xr[i] - mean;
            var += d * d;
        }
        var /= real(n);
        const real inv = real(1) / std::sqrt(var + eps);
        for (std::size_t i = 0; i < n; ++i)
            yr[i] = gain[i] * (xr[i] - mean) * inv + bias[i];
    }
    return y;
}

void layer_norm_backward(const Tensor& x, const Tensor& gain, real eps,
                         const Tensor& gy, Tensor& gx, Tensor& g_gain,
                         Tensor& g_bias) {
    const std::size_t n = x.dim(x.rank() - 1);
    const std::size_t rows = x.size() / n;
    require(gy.same_shape(x) && gx.same_shape(x), "layer_norm_backward: shape mismatch");
    require(g_gain.size() == n && g_bias.size() == n,
            "layer_norm_backward: gain/bias grad size");

    const real* xd = x.data();
    const real* gd = gy.data();
    real* od = gx.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const real* xr = xd + r * n;
        const real* gr = gd + r * n;
        real* orow = od + r * n;
        real mean = 0;
        for (std::size_t i = 0; i < n; ++i) mean += xr[i];
        mean /= real(n);
        real var = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const real d = xr[i] - mean;
            var += d * d;
        }
        var /= real(n);
        const real inv = real(1) / std::sqrt(var + eps);

        // ghat_i = gy_i * gain_i; gx = inv * (ghat - mean(ghat) - xhat * mean(ghat*xhat))
        real mg = 0, mgx = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const real xhat = (xr[i] - mean) * inv;
            const real gh = gr[i] * gain[i];
            mg += gh;
            mgx += gh * xhat;
            g_gain[i] += gr[i] * xhat;
            g_bias[i] += gr[i];
        }
        mg /= real(n);
        mgx /= real(n);
        for (std::size_t i = 0; i < n; ++i) {
            const real xhat = (xr[i] - mean) * inv;
            orow[i] += inv * (gr[i] * gain[i] - mg - xhat * mgx);
        }
    }
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            Tensor* weights_out) {
    require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2,
            "scaled_dot_attention: rank-2 inputs required");
    const std::size_t lq = q.dim(0), d = q.dim(1);
    const std::size_t lk = k.dim(0), dv = v.dim(1);
    require(d > 0, "scaled_dot_attention: zero inner dim");
    require(k.dim(1) == d, "scaled_dot_attention: Q/K inner dims differ");
    require(v.dim(0) == lk, "scaled_dot_attention: K/V lengths differ");

    Tensor s({lq, lk});
    gemm(false, true, lq, lk, d, real(1) / std::sqrt(real(d)), q.data(), d, k.data(), d,
         real(0), s.data(), lk);
    Tensor a = softmax(s, 1);
    Tensor y({lq, dv});
    gemm(false, false, lq, dv, lk, real(1), a.data(), lk, v.data(), dv, real(0),
         y.data(), dv);
    if (weights_out) *weights_out = std::move(a);
    return y;
}

void scaled_dot_attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const Tensor& weights, const Tensor& gy,
                                   Tensor& gq, Tensor& gk, Tensor& gv) {
    const std::size_t lq = q.dim(0), d = q.dim(1);
    const std::size_t lk = k.dim(0), dv = v.dim(1);
    const real scale = real(1) / std::sqrt(real(d));

    // gV += A^T gY
    gemm(true, false, lk, dv, lq, real(1), weights.data(), lk, gy.data(), dv, real(1),
         gv.data(), dv);

    // gA = gY V^T, then the softmax VJP row-wise into gS.
    Tensor ga({lq, lk});
    gemm(false, true, lq, lk, dv, real(1), gy.data(), dv, v.data(), dv, real(0),
         ga.data(), lk);
    Tensor gs({lq, lk});
    for (std::size_t i = 0; i < lq; ++i) {
        real dotrow = 0;
        for (std::size_t j = 0; j < lk; ++j) dotrow += ga.at(i, j) * weights.at(i, j);
        for (std::size_t j = 0; j < lk; ++j)
            gs.at(i, j) = weights.at(i, j) * (ga.at(i, j) - dotrow);
    }

    // gQ += scale * gS K;  gK += scale * gS^T Q
    gemm(false, false, lq, d, lk, scale, gs.data(), lk, k.data(), d, real(1), gq.data(),
         d);
    gemm(true, false, lk, d, lq, scale, gs.data(), lk, q.data(), d, real(1), gk.data(),
         d);
}

real cosine_similarity_vec(const real* a, const real* b, std::size_t n, real eps) {
    real ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    const real den = std::max(std::sqrt(aa) * std::sqrt(bb), eps);
    return ab / den;
}

void cosine_similarity_vec_backward(const real* a, const real* b, std::size_t n,
                                    real eps, real g, real* ga, real* gb) {
    real ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    const real na = std::sqrt(aa), nb = std::sqrt(bb);
    const real den = na * nb;
    if (den >= eps) {
        const real c = ab / den;
        for (std::size_t i = 0; i < n; ++i) {
            ga[i] += g * (b[i] / den - c * a[i] / aa);
            gb[i] += g * (a[i] / den - c * b[i] / bb);
        }
    } else {
        // Clamped branch: denominator is the constant eps.
        for (std::size_t i = 0; i < n; ++i) {
            ga[i] += g * b[i] / eps;
            gb[i] += g * a[i] / eps;
        }
    }
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, real eps) {
    require(a.same_shape(b), "cosine_similarity: shape mismatch");
    require(eps > real(0), "cosine_similarity: eps must be positive");
    if (a.rank() == 1) {
        Tensor out({1});
        out[0] = cosine_similarity_vec(a.data(), b.data(), a.size(), eps);
        return out;
    }
    require(a.rank() == 2, "cosine_similarity: rank-1 or rank-2 inputs only");
    const std::size_t rows = a.dim(0), n = a.dim(1);
    Tensor out({rows});
    for (std::size_t r = 0; r < rows; ++r)
        out[r] = cosine_similarity_vec(a.row(r), b.row(r), n, eps);
    return out;
}

Tensor finite_difference_gradient(const std::function<real(const Tensor&)>& f,
                                  const Tensor& x, real h) {
    require(h > real(0), "finite_difference_gradient: h must be positive");
    Tensor xp = x;
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const real orig = xp[i];
        xp[i] = orig + h;
        const real fp = f(xp);
        xp[i] = orig - h;
        const real fm = f(xp);
        xp[i] = orig;
        require_finite(fp, "finite_difference_gradient: f(x+h)");
        require_finite(fm, "finite_difference_gradient: f(x-h)");
        g[i] = (fp - fm) / (real(2) * h);
    }
    return g;
}

Linear::Linear(std::size_t out, std::size_t in)
    : w({out, in}), b({out}), gw({out, in}), gb({out}) {}

Tensor Linear::forward(const Tensor& x) const {
    require(x.rank() == 2 && x.dim(1) == in_dim(), "Linear: bad input shape");
    const std::size_t n = x.dim(0), out = out_dim();
    Tensor y({n, out});
    gemm(false, true, n, out, in_dim(), real(1), x.data(), in_dim(), w.data(), in_dim(),
         real(0), y.data(), out);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < out; ++j) y.at(i, j) += b[j];
    return y;
}

void Linear::backward(const Tensor& x, const Tensor& gy, Tensor* gx) {
    const std::size_t n = x.dim(0), out = out_dim(), in = in_dim();
    require(gy.rank() == 2 && gy.dim(0) == n && gy.dim(1) == out,
            "Linear backward: bad upstream shape");
    // gW += gY^T X;  gb += column sums of gY;  gX += gY W.
    gemm(true, false, out, in, n, real(1), gy.data(), out, x.data(), in, real(1),
         gw.data(), in);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < out; ++j) gb[j] += gy.at(i, j);
    if (gx) {
        require(gx->same_shape(x), "Linear backward: gx shape");
        gemm(false, false, n, in, out, real(1), gy.data(), out, w.data(), in, real(1),
             gx->data(), in);
    }
}

void Linear::zero_grad() {
    gw.zero();
    gb.zero();
}

}  // namespace splatocc
