#pragma once

#include <cstdint>

// Row-major GEMM: C = alpha * op(A) @ op(B) + beta * C.
// Backed by single-threaded OpenBLAS when available; falls back to a blocked
// reference implementation. Single-threaded execution keeps results
// bit-reproducible across runs.

namespace pctgan::detail {

void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, float alpha,
          const float* a, std::int64_t lda, const float* b, std::int64_t ldb, float beta, float* c,
          std::int64_t ldc);

void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, double alpha,
          const double* a, std::int64_t lda, const double* b, std::int64_t ldb, double beta, double* c,
          std::int64_t ldc);

}  // namespace pctgan::detail
