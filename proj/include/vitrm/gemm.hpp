#pragma once

namespace vitrm::detail {

// C = alpha * op(A) * op(B) + beta * C, row-major.
// m, n are the extents of C; k is the contraction extent. lda/ldb/ldc are the
// row strides of the matrices as stored (before any transposition).
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
          const float* a, int lda, const float* b, int ldb, float beta,
          float* c, int ldc);
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc);

}  // namespace vitrm::detail
