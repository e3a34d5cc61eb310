#pragma once

#include <string>
#include <vector>

#include "splatocc/common.hpp"
#include "splatocc/gaussian.hpp"
#include "splatocc/rng.hpp"
#include "splatocc/tensor.hpp"

namespace splatocc {

// One finite-difference comparison: hand-derived gradient vs the central
// difference oracle, reported as the worst elementwise error
// |a - b| / max(1, |a|, |b|) across all checked inputs and seeds.
struct GradCheck {
    std::string name;
    real max_err = 0;
    real tol = 0;
    bool pass = false;
};

real gradcheck_default_tol();   // 1e-5 at 64-bit, 1e-3 at 32-bit
real gradcheck_default_step();  // 1e-5 at 64-bit, 1e-2 at 32-bit

// Gaussian-filled tensor, shared by checks and tests.
Tensor randn_tensor(Rng& rng, std::vector<std::size_t> shape, real scale = real(1));

// Random Gaussian set inside the grid bounds (unit random rotations, scales
// in [0.25, 0.75) m) — the shared fixture generator for checks and tests.
GaussianSet random_scene_set(Rng& rng, std::size_t n, const GridSpec& spec,
                             std::size_t feat_dim = 0);

// Elementwise error metric shared by every check.
real grad_rel_err(const Tensor& a, const Tensor& b);

// Per-module sweeps; `seeds` independent random draws per operation.
std::vector<GradCheck> gradcheck_core(unsigned seeds = 20);
std::vector<GradCheck> gradcheck_scene(unsigned seeds = 20);
std::vector<GradCheck> gradcheck_ldfa(unsigned seeds = 20);
std::vector<GradCheck> gradcheck_ebfs(unsigned seeds = 20);
std::vector<GradCheck> gradcheck_aclf(unsigned seeds = 20);
std::vector<GradCheck> gradcheck_head(unsigned seeds = 20);
std::vector<GradCheck> gradcheck_losses(unsigned seeds = 20);

// Full end-to-end pipeline on a tiny fixture (looser tolerance, 1e-4).
std::vector<GradCheck> gradcheck_pipeline();

// Everything above, in order.
std::vector<GradCheck> gradcheck_all(unsigned seeds = 20);

bool all_pass(const std::vector<GradCheck>& checks);

}  // namespace splatocc
