#include "vitrm/gemm.hpp"

#ifdef VITRM_WITH_CBLAS
#include <cblas.h>
#endif

namespace vitrm::detail {

#ifdef VITRM_WITH_CBLAS

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
          const float* a, int lda, const float* b, int ldb, float beta,
          float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

#else

namespace {

// Portable fallback: fixed i-k-j loop order, deterministic reduction order.
template <class T>
void gemm_impl(bool trans_a, bool trans_b, int m, int n, int k, T alpha,
               const T* a, int lda, const T* b, int ldb, T beta, T* c,
               int ldc) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<long>(i) * ldc;
    for (int j = 0; j < n; ++j) crow[j] *= beta;
    for (int p = 0; p < k; ++p) {
      const T aval = trans_a ? a[static_cast<long>(p) * lda + i]
                             : a[static_cast<long>(i) * lda + p];
      if (aval == T(0)) continue;
      const T scaled = alpha * aval;
      if (!trans_b) {
        const T* brow = b + static_cast<long>(p) * ldb;
        for (int j = 0; j < n; ++j) crow[j] += scaled * brow[j];
      } else {
        for (int j = 0; j < n; ++j)
          crow[j] += scaled * b[static_cast<long>(j) * ldb + p];
      }
    }
  }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
          const float* a, int lda, const float* b, int ldb, float beta,
          float* c, int ldc) {
  gemm_impl(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc) {
  gemm_impl(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

#endif

}  // namespace vitrm::detail
