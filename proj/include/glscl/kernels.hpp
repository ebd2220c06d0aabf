#pragma once

#include <cstdint>

// Dense kernels behind the tensor library. Every kernel has a serial
// reference implementation and an OpenMP variant that parallelizes over
// independent output rows only, so both produce bitwise-identical results.

namespace glscl::kern {

// Global switch; defaults to true when compiled with OpenMP.
bool& parallel_enabled();

// C[m,n] = A[m,k] * B[k,n], row-major. accumulate adds into C.
template <typename T>
void gemm_serial(int64_t m, int64_t n, int64_t k,
                 const T* a, const T* b, T* c, bool accumulate);

template <typename T>
void gemm_parallel(int64_t m, int64_t n, int64_t k,
                   const T* a, const T* b, T* c, bool accumulate);

template <typename T>
void gemm(int64_t m, int64_t n, int64_t k,
          const T* a, const T* b, T* c, bool accumulate);

// Batched: a [batch,m,k], b [batch,k,n], c [batch,m,n].
template <typename T>
void bgemm_serial(int64_t batch, int64_t m, int64_t n, int64_t k,
                  const T* a, const T* b, T* c, bool accumulate);

template <typename T>
void bgemm_parallel(int64_t batch, int64_t m, int64_t n, int64_t k,
                    const T* a, const T* b, T* c, bool accumulate);

template <typename T>
void bgemm(int64_t batch, int64_t m, int64_t n, int64_t k,
           const T* a, const T* b, T* c, bool accumulate);

// dst[k,m] = src[m,k]^T
template <typename T>
void transpose(int64_t m, int64_t k, const T* src, T* dst);

}  // namespace glscl::kern
