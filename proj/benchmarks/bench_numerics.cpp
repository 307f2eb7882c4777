#include <benchmark/benchmark.h>

#include "ketlab/numerics.hpp"
#include "ketlab/rng.hpp"

using namespace ketlab::numerics;

namespace {

Matrix random_matrix(uint64_t seed, int r, int c) {
  Rng rng(seed);
  Matrix m(r, c);
  for (float& x : m.data) x = static_cast<float>(rng.normal(0.0, 1.0));
  return m;
}

void BM_matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Matrix a = random_matrix(1, n, n);
  Matrix b = random_matrix(2, n, n);
  for (auto _ : state) {
    Matrix c = matmul(a, b);
    benchmark::DoNotOptimize(c.data.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}
BENCHMARK(BM_matmul)->Arg(64)->Arg(256);

void BM_solve_spd(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Matrix a = random_matrix(3, n, n);
  Matrix c = matmul_tn(a, a);
  for (int i = 0; i < n; ++i) c.at(i, i) += n;
  Matrix b = random_matrix(4, n, 1);
  for (auto _ : state) {
    Matrix x = solve_spd(c, b);
    benchmark::DoNotOptimize(x.data.data());
  }
}
BENCHMARK(BM_solve_spd)->Arg(64)->Arg(256);

void BM_adamw(benchmark::State& state) {
  Matrix p = random_matrix(5, 256, 64);
  Matrix g = random_matrix(6, 256, 64);
  AdamState st(p);
  long step = 0;
  for (auto _ : state) adamw_step(p, g, st, ++step, 1e-3, 0.9, 0.999, 1e-8, 0.01);
  state.SetItemsProcessed(state.iterations() * static_cast<long>(p.size()));
}
BENCHMARK(BM_adamw);

}  // namespace

BENCHMARK_MAIN();
