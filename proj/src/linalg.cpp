#include "splatocc/linalg.hpp"

#ifdef SPLATOCC_USE_BLAS
#include <cblas.h>
#endif

namespace splatocc {

#ifdef SPLATOCC_USE_BLAS

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          real alpha, const real* a, std::size_t lda, const real* b, std::size_t ldb,
          real beta, real* c, std::size_t ldc) {
    const CBLAS_TRANSPOSE ta = trans_a ? CblasTrans : CblasNoTrans;
    const CBLAS_TRANSPOSE tb = trans_b ? CblasTrans : CblasNoTrans;
#ifdef SPLATOCC_REAL32
    cblas_sgemm(CblasRowMajor, ta, tb, int(m), int(n), int(k), alpha, a, int(lda), b,
                int(ldb), beta, c, int(ldc));
#else
    cblas_dgemm(CblasRowMajor, ta, tb, int(m), int(n), int(k), alpha, a, int(lda), b,
                int(ldb), beta, c, int(ldc));
#endif
}

#else  // naive fallback

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          real alpha, const real* a, std::size_t lda, const real* b, std::size_t ldb,
          real beta, real* c, std::size_t ldc) {
    auto at = [&](std::size_t i, std::size_t p) {
        return trans_a ? a[p * lda + i] : a[i * lda + p];
    };
    auto bt = [&](std::size_t p, std::size_t j) {
        return trans_b ? b[j * ldb + p] : b[p * ldb + j];
    };
#pragma omp parallel for schedule(static)
    for (long long ii = 0; ii < (long long)m; ++ii) {
        const std::size_t i = std::size_t(ii);
        for (std::size_t j = 0; j < n; ++j) {
            real acc = 0;
            for (std::size_t p = 0; p < k; ++p) acc += at(i, p) * bt(p, j);
            // beta == 0 must not read C (it may be uninitialized), matching BLAS.
            c[i * ldc + j] = beta == real(0) ? alpha * acc
                                             : alpha * acc + beta * c[i * ldc + j];
        }
    }
}

#endif

void matmul(const real* a, const real* b, real* c, std::size_t m, std::size_t k,
            std::size_t n) {
    gemm(false, false, m, n, k, real(1), a, k, b, n, real(0), c, n);
}

}  // namespace splatocc
