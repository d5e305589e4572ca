#include "pctgan/gemm.hpp"

#include <vector>

#ifdef PCTGAN_WITH_OPENBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace pctgan::detail {

#ifdef PCTGAN_WITH_OPENBLAS

namespace {
struct BlasInit {
    BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit blas_init;
}  // namespace

void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, float alpha,
          const float* a, std::int64_t lda, const float* b, std::int64_t ldb, float beta, float* c,
          std::int64_t ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda),
                b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, double alpha,
          const double* a, std::int64_t lda, const double* b, std::int64_t ldb, double beta, double* c,
          std::int64_t ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda),
                b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

#else  // reference path

namespace {

template <typename T>
void gemm_ref(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
              const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c, std::int64_t ldc) {
    auto at = [&](std::int64_t i, std::int64_t j) { return trans_a ? a[j * lda + i] : a[i * lda + j]; };
    auto bt = [&](std::int64_t i, std::int64_t j) { return trans_b ? b[j * ldb + i] : b[i * ldb + j]; };
    // Pack a row of op(A) once per i; inner loop stays contiguous over op(B)
    // rows when B is untransposed.
    std::vector<T> arow(static_cast<std::size_t>(k));
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) arow[static_cast<std::size_t>(p)] = at(i, p);
        T* crow = c + i * ldc;
        for (std::int64_t j = 0; j < n; ++j) crow[j] = beta == T(0) ? T(0) : crow[j] * beta;
        if (!trans_b) {
            for (std::int64_t p = 0; p < k; ++p) {
                const T av = alpha * arow[static_cast<std::size_t>(p)];
                const T* brow = b + p * ldb;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        } else {
            for (std::int64_t j = 0; j < n; ++j) {
                T acc = T(0);
                for (std::int64_t p = 0; p < k; ++p) acc += arow[static_cast<std::size_t>(p)] * bt(p, j);
                crow[j] += alpha * acc;
            }
        }
    }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, float alpha,
          const float* a, std::int64_t lda, const float* b, std::int64_t ldb, float beta, float* c,
          std::int64_t ldc) {
    gemm_ref(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, double alpha,
          const double* a, std::int64_t lda, const double* b, std::int64_t ldb, double beta, double* c,
          std::int64_t ldc) {
    gemm_ref(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

#endif

}  // namespace pctgan::detail
