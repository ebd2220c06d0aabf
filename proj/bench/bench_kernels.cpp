#include <benchmark/benchmark.h>

#include <cstdint>
#include <random>
#include <vector>

#include "glscl/kernels.hpp"

// Serial reference vs OpenMP row-parallel kernels at the matrix shapes the
// desk-scale model actually hits (token count x dim, dim x ffn).

namespace {

std::vector<float> rand_vec(int64_t n, uint32_t seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<float> d(-1.f, 1.f);
  std::vector<float> v(static_cast<size_t>(n));
  for (auto& x : v) x = d(gen);
  return v;
}

void bm_gemm_serial(benchmark::State& state) {
  int64_t m = state.range(0), k = state.range(1), n = state.range(2);
  auto a = rand_vec(m * k, 1), b = rand_vec(k * n, 2);
  std::vector<float> c(static_cast<size_t>(m * n));
  for (auto _ : state) {
    glscl::kern::gemm_serial(m, n, k, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * m * n * k);
}

void bm_gemm_parallel(benchmark::State& state) {
  int64_t m = state.range(0), k = state.range(1), n = state.range(2);
  auto a = rand_vec(m * k, 1), b = rand_vec(k * n, 2);
  std::vector<float> c(static_cast<size_t>(m * n));
  for (auto _ : state) {
    glscl::kern::gemm_parallel(m, n, k, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * m * n * k);
}

void bm_bgemm_serial(benchmark::State& state) {
  int64_t batch = state.range(0), m = state.range(1), k = state.range(2);
  auto a = rand_vec(batch * m * k, 1), b = rand_vec(batch * k * m, 2);
  std::vector<float> c(static_cast<size_t>(batch * m * m));
  for (auto _ : state) {
    glscl::kern::bgemm_serial(batch, m, m, k, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * batch * 2 * m * m * k);
}

void bm_bgemm_parallel(benchmark::State& state) {
  int64_t batch = state.range(0), m = state.range(1), k = state.range(2);
  auto a = rand_vec(batch * m * k, 1), b = rand_vec(batch * k * m, 2);
  std::vector<float> c(static_cast<size_t>(batch * m * m));
  for (auto _ : state) {
    glscl::kern::bgemm_parallel(batch, m, m, k, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * batch * 2 * m * m * k);
}

// {tokens, dim, dim}, {tokens, dim, 4*dim}, and a square sanity point.
void gemm_shapes(benchmark::internal::Benchmark* b) {
  b->Args({272, 64, 64})->Args({272, 64, 256})->Args({256, 256, 256});
}

// attention scores: {batch*heads, seq, head_dim}
void bgemm_shapes(benchmark::internal::Benchmark* b) {
  b->Args({64, 17, 16})->Args({64, 68, 16});
}

BENCHMARK(bm_gemm_serial)->Apply(gemm_shapes);
BENCHMARK(bm_gemm_parallel)->Apply(gemm_shapes);
BENCHMARK(bm_bgemm_serial)->Apply(bgemm_shapes);
BENCHMARK(bm_bgemm_parallel)->Apply(bgemm_shapes);

}  // namespace

BENCHMARK_MAIN();
