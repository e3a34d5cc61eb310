#include "splatocc/head.hpp"

#include <cmath>
#include <numbers>

namespace splatocc {

namespace {

// Normalization used by the encoder: u = (p - center) / half_extent, so the
// curve bounds map to [-1, 1]. Degenerate bounds get a unit half extent.
void encode_frame(const OrderingCurve& curve, real center[3], real half[3]) {
    for (int a = 0; a < 3; ++a) {
        center[a] = (curve.lo[a] + curve.hi[a]) / 2;
        half[a] = (curve.hi[a] - curve.lo[a]) / 2;
        if (half[a] <= 0) half[a] = real(1);
    }
}

}  // namespace

Tensor positional_encode(const Tensor& means, const OrderingCurve& curve,
                         std::size_t bands) {
    require(means.rank() == 2 && means.dim(1) == 3, "positional_encode: means must be (N,3)");
    const std::size_t n = means.dim(0);
    real center[3], half[3];
    encode_frame(curve, center, half);

    Tensor out({n, 6 * bands});
    for (std::size_t g = 0; g < n; ++g) {
        for (int a = 0; a < 3; ++a) {
            const real u = (means.at(g, std::size_t(a)) - center[a]) / half[a];
            for (std::size_t b = 0; b < bands; ++b) {
                const real omega = 2 * std::numbers::pi_v<real> * real(1ull << b);
                const std::size_t col = (std::size_t(a) * bands + b) * 2;
                out.at(g, col) = std::sin(omega * u);
                out.at(g, col + 1) = std::cos(omega * u);
            }
        }
    }
    return out;
}

void positional_encode_backward(const Tensor& means, const OrderingCurve& curve,
                                std::size_t bands, const Tensor& encoded,
                                const Tensor& g_encoded, Tensor& g_means) {
    const std::size_t n = means.dim(0);
    real center[3], half[3];
    encode_frame(curve, center, half);

    for (std::size_t g = 0; g < n; ++g) {
        for (int a = 0; a < 3; ++a) {
            real acc = 0;
            for (std::size_t b = 0; b < bands; ++b) {
                const real omega = 2 * std::numbers::pi_v<real> * real(1ull << b);
                const std::size_t col = (std::size_t(a) * bands + b) * 2;
                // d sin(wu)/dm = cos(wu) * w / half; the cached cos/sin are the
                // adjacent encoding entries.
                const real s = encoded.at(g, col);
                const real c = encoded.at(g, col + 1);
                acc += (g_encoded.at(g, col) * c - g_encoded.at(g, col + 1) * s) *
                       omega / half[a];
            }
            g_means.at(g, std::size_t(a)) += acc;
        }
    }
}

GaussMambaHead::GaussMambaHead(std::size_t d, std::size_t classes,
                               std::size_t n_blocks, std::size_t state_dim,
                               std::size_t pe_bands)
    : feat_dim(d),
      num_classes(classes),
      bands(pe_bands),
      embed(d, d + 6 * pe_bands),
      delta(11 + classes, d) {
    blocks.reserve(n_blocks);
    for (std::size_t i = 0; i < n_blocks; ++i) blocks.emplace_back(d, state_dim);
}

void GaussMambaHead::zero_grad() {
    embed.zero_grad();
    delta.zero_grad();
    for (auto& b : blocks) b.zero_grad();
}

GaussianSet gauss_mamba_refine(const GaussianSet& set, const OrderingCurve& curve,
                               const GaussMambaHead& head, HeadCache* cache) {
    const std::size_t n = set.size(), d = head.feat_dim;
    require(set.feat_dim() == d, "gauss_mamba_refine: feature dim mismatch");
    require(set.num_classes() == head.num_classes,
            "gauss_mamba_refine: class count mismatch");

    Tensor pe = positional_encode(set.means, curve, head.bands);
    Tensor concat({n, d + 6 * head.bands});
    for (std::size_t g = 0; g < n; ++g) {
        for (std::size_t j = 0; j < d; ++j) concat.at(g, j) = set.features.at(g, j);
        for (std::size_t j = 0; j < 6 * head.bands; ++j)
            concat.at(g, d + j) = pe.at(g, j);
    }
    Tensor f0 = head.embed.forward(concat);

    std::vector<std::size_t> perm = order_3d_to_1d(set, curve);
    Tensor x({n, d});
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t j = 0; j < d; ++j) x.at(t, j) = f0.at(perm[t], j);

    std::vector<MambaBlockCache> bcaches(cache ? head.blocks.size() : 0);
    for (std::size_t i = 0; i < head.blocks.size(); ++i)
        x = head.blocks[i].forward(x, cache ? &bcaches[i] : nullptr);

    Tensor restored({n, d});
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t j = 0; j < d; ++j) restored.at(perm[t], j) = x.at(t, j);

    Tensor deltas = head.delta.forward(restored);

    GaussianSet out = set;  // features pass through unchanged
    Tensor r_pre({n, 4});
    for (std::size_t g = 0; g < n; ++g) {
        for (std::size_t a = 0; a < 3; ++a) {
            out.means.at(g, a) += deltas.at(g, a);
            out.log_scales.at(g, a) += deltas.at(g, 3 + a);
        }
        real norm2 = 0;
        for (std::size_t a = 0; a < 4; ++a) {
            const real v = set.rotations.at(g, a) + deltas.at(g, 6 + a);
            r_pre.at(g, a) = v;
            norm2 += v * v;
        }
        const real norm = std::sqrt(norm2);
        if (!(norm > real(1e-12)))
            throw numeric_error("rotation update collapsed to zero quaternion");
        for (std::size_t a = 0; a < 4; ++a)
            out.rotations.at(g, a) = r_pre.at(g, a) / norm;
        out.opacity_logits[g] += deltas.at(g, 10);
        for (std::size_t c = 0; c < head.num_classes; ++c)
            out.class_logits.at(g, c) += deltas.at(g, 11 + c);
    }

    if (cache) {
        cache->perm = std::move(perm);
        cache->concat = std::move(concat);
        cache->blocks = std::move(bcaches);
        cache->restored = std::move(restored);
        cache->r_pre = std::move(r_pre);
    }
    return out;
}

void gauss_mamba_backward(GaussMambaHead& head, const GaussianSet& set,
                          const OrderingCurve& curve, const HeadCache& cache,
                          const GaussianSet& g_out, GaussianSet& g_set) {
    const std::size_t n = set.size(), d = head.feat_dim;

    // Upstream gradients land both on the deltas and (through the additive
    // update) directly on the input fields.
    Tensor g_deltas({n, head.delta_dim()});
    for (std::size_t g = 0; g < n; ++g) {
        for (std::size_t a = 0; a < 3; ++a) {
            g_deltas.at(g, a) = g_out.means.at(g, a);
            g_set.means.at(g, a) += g_out.means.at(g, a);
            g_deltas.at(g, 3 + a) = g_out.log_scales.at(g, a);
            g_set.log_scales.at(g, a) += g_out.log_scales.at(g, a);
        }
        // Through r' = v / |v| at v = r + delta_r: gv = (g - u (u . g)) / |v|.
        real norm2 = 0, udotg = 0;
        for (std::size_t a = 0; a < 4; ++a) norm2 += cache.r_pre.at(g, a) * cache.r_pre.at(g, a);
        const real norm = std::sqrt(norm2);
        for (std::size_t a = 0; a < 4; ++a)
            udotg += cache.r_pre.at(g, a) / norm * g_out.rotations.at(g, a);
        for (std::size_t a = 0; a < 4; ++a) {
            const real u = cache.r_pre.at(g, a) / norm;
            const real gv = (g_out.rotations.at(g, a) - u * udotg) / norm;
            g_deltas.at(g, 6 + a) = gv;
            g_set.rotations.at(g, a) += gv;
        }
        g_deltas.at(g, 10) = g_out.opacity_logits[g];
        g_set.opacity_logits[g] += g_out.opacity_logits[g];
        for (std::size_t c = 0; c < head.num_classes; ++c) {
            g_deltas.at(g, 11 + c) = g_out.class_logits.at(g, c);
            g_set.class_logits.at(g, c) += g_out.class_logits.at(g, c);
        }
        for (std::size_t j = 0; j < d; ++j)
            g_set.features.at(g, j) += g_out.features.at(g, j);
    }

    Tensor g_restored({n, d});
    head.delta.backward(cache.restored, g_deltas, &g_restored);

    Tensor gx({n, d});
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t j = 0; j < d; ++j) gx.at(t, j) = g_restored.at(cache.perm[t], j);

    for (std::size_t i = head.blocks.size(); i-- > 0;) {
        Tensor gprev({n, d});
        head.blocks[i].backward(cache.blocks[i], gx, gprev);
        gx = std::move(gprev);
    }

    Tensor g_f0({n, d});
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t j = 0; j < d; ++j) g_f0.at(cache.perm[t], j) = gx.at(t, j);

    Tensor g_concat({n, d + 6 * head.bands});
    head.embed.backward(cache.concat, g_f0, &g_concat);

    Tensor g_pe({n, 6 * head.bands});
    for (std::size_t g = 0; g < n; ++g) {
        for (std::size_t j = 0; j < d; ++j)
            g_set.features.at(g, j) += g_concat.at(g, j);
        for (std::size_t j = 0; j < 6 * head.bands; ++j)
            g_pe.at(g, j) = g_concat.at(g, d + j);
    }

    // The cached concat columns beyond d are exactly the encoding values.
    Tensor pe({n, 6 * head.bands});
    for (std::size_t g = 0; g < n; ++g)
        for (std::size_t j = 0; j < 6 * head.bands; ++j)
            pe.at(g, j) = cache.concat.at(g, d + j);
    positional_encode_backward(set.means, curve, head.bands, pe, g_pe, g_set.means);
}

VoxelGrid predict_occupancy(const GaussianSet& set, const GridSpec& spec,
                            real cutoff_k) {
    VoxelGrid grid = splat(set, spec, cutoff_k);
    grid.labels = argmax_labels(grid);
    return grid;
}

}  // namespace splatocc
