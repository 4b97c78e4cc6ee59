#pragma once

#include <cstddef>
#include <cstdlib>

#ifdef ENVFORMER_USE_CBLAS
#include <cblas.h>
#endif

namespace envformer {

namespace detail {

#ifdef ENVFORMER_USE_CBLAS
// The library is single-threaded by design; stop the BLAS backend from
// spawning its own pool. Using the environment variable keeps us independent
// of which BLAS implementation is linked. Set before the first BLAS call.
inline const bool blas_single_thread = [] {
#ifdef _WIN32
  return true;
#else
  ::setenv("OPENBLAS_NUM_THREADS", "1", 0);
  ::setenv("OMP_NUM_THREADS", "1", 0);
  return true;
#endif
}();
#endif

template <typename T>
void gemm_naive(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                std::size_t k, T alpha, const T* a, std::size_t lda,
                const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      c[i * ldc + j] = alpha * acc + beta * c[i * ldc + j];
    }
  }
}

}  // namespace detail

/// Row-major GEMM: C = alpha * op(A) [m,k] * op(B) [k,n] + beta * C.
/// Leading dimensions are the stored column counts of A, B, C.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, T alpha, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T beta, T* c, std::size_t ldc) {
  detail::gemm_naive(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c,
                     ldc);
}

#ifdef ENVFORMER_USE_CBLAS
template <>
inline void gemm<double>(bool trans_a, bool trans_b, std::size_t m,
                         std::size_t n, std::size_t k, double alpha,
                         const double* a, std::size_t lda, const double* b,
                         std::size_t ldb, double beta, double* c,
                         std::size_t ldc) {
  (void)detail::blas_single_thread;
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}

template <>
inline void gemm<float>(bool trans_a, bool trans_b, std::size_t m,
                        std::size_t n, std::size_t k, float alpha,
                        const float* a, std::size_t lda, const float* b,
                        std::size_t ldb, float beta, float* c,
                        std::size_t ldc) {
  (void)detail::blas_single_thread;
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}
#endif

}  // namespace envformer
