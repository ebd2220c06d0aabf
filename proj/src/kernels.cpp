#include "glscl/kernels.hpp"

#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace glscl::kern {

bool& parallel_enabled() {
#ifdef _OPENMP
  static bool on = true;
#else
  static bool on = false;
#endif
  return on;
}

namespace {

// One output row; the k-loop runs in fixed order so the result does not
// depend on how rows are distributed across threads.
template <typename T>
inline void gemm_row(int64_t i, int64_t n, int64_t k,
                     const T* a, const T* b, T* c, bool accumulate) {
  T* crow = c + i * n;
  if (!accumulate) std::memset(crow, 0, sizeof(T) * static_cast<size_t>(n));
  const T* arow = a + i * k;
  for (int64_t l = 0; l < k; ++l) {
    const T ail = arow[l];
    const T* brow = b + l * n;
    for (int64_t j = 0; j < n; ++j) crow[j] += ail * brow[j];
  }
}

}  // namespace

template <typename T>
void gemm_serial(int64_t m, int64_t n, int64_t k,
                 const T* a, const T* b, T* c, bool accumulate) {
  for (int64_t i = 0; i < m; ++i) gemm_row(i, n, k, a, b, c, accumulate);
}

template <typename T>
void gemm_parallel(int64_t m, int64_t n, int64_t k,
                   const T* a, const T* b, T* c, bool accumulate) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t i = 0; i < m; ++i) gemm_row(i, n, k, a, b, c, accumulate);
}

template <typename T>
void gemm(int64_t m, int64_t n, int64_t k,
          const T* a, const T* b, T* c, bool accumulate) {
  // Tiny problems are not worth a fork-join.
  if (parallel_enabled() && m * n * k >= (1 << 16)) {
    gemm_parallel(m, n, k, a, b, c, accumulate);
  } else {
    gemm_serial(m, n, k, a, b, c, accumulate);
  }
}

template <typename T>
void bgemm_serial(int64_t batch, int64_t m, int64_t n, int64_t k,
                  const T* a, const T* b, T* c, bool accumulate) {
  for (int64_t p = 0; p < batch; ++p)
    gemm_serial(m, n, k, a + p * m * k, b + p * k * n, c + p * m * n, accumulate);
}

template <typename T>
void bgemm_parallel(int64_t batch, int64_t m, int64_t n, int64_t k,
                    const T* a, const T* b, T* c, bool accumulate) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t p = 0; p < batch; ++p)
    gemm_serial(m, n, k, a + p * m * k, b + p * k * n, c + p * m * n, accumulate);
}

template <typename T>
void bgemm(int64_t batch, int64_t m, int64_t n, int64_t k,
           const T* a, const T* b, T* c, bool accumulate) {
  if (parallel_enabled() && batch > 1 && batch * m * n * k >= (1 << 16)) {
    bgemm_parallel(batch, m, n, k, a, b, c, accumulate);
  } else {
    bgemm_serial(batch, m, n, k, a, b, c, accumulate);
  }
}

template <typename T>
void transpose(int64_t m, int64_t k, const T* src, T* dst) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < k; ++j) dst[j * m + i] = src[i * k + j];
}

#define GLSCL_INSTANTIATE(T)                                                  \
  template void gemm_serial<T>(int64_t, int64_t, int64_t, const T*, const T*, \
                               T*, bool);                                     \
  template void gemm_parallel<T>(int64_t, int64_t, int64_t, const T*,         \
                                 const T*, T*, bool);                         \
  template void gemm<T>(int64_t, int64_t, int64_t, const T*, const T*, T*,    \
                        bool);                                                \
  template void bgemm_serial<T>(int64_t, int64_t, int64_t, int64_t, const T*, \
                                const T*, T*, bool);                          \
  template void bgemm_parallel<T>(int64_t, int64_t, int64_t, int64_t,         \
                                  const T*, const T*, T*, bool);              \
  template void bgemm<T>(int64_t, int64_t, int64_t, int64_t, const T*,        \
                         const T*, T*, bool);                                 \
  template void transpose<T>(int64_t, int64_t, const T*, T*);

GLSCL_INSTANTIATE(float)
GLSCL_INSTANTIATE(double)
#undef GLSCL_INSTANTIATE

}  // namespace glscl::kern
