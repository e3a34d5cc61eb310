#pragma once

#include <cstddef>

#include "splatocc/common.hpp"

namespace splatocc {

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C, where op transposes
// when the corresponding flag is set. A is m x k (after op), B is k x n,
// C is m x n. Dispatches to BLAS when built with it, otherwise a plain
// OpenMP triple loop.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          real alpha, const real* a, std::size_t lda, const real* b, std::size_t ldb,
          real beta, real* c, std::size_t ldc);

// Convenience: C[m x n] = A[m x k] * B[k x n], all dense row-major.
void matmul(const real* a, const real* b, real* c, std::size_t m, std::size_t k,
            std::size_t n);

}  // namespace splatocc
