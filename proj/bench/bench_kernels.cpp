// Serial reference vs OpenMP kernels. Set OMP_NUM_THREADS to vary the
// thread count of the parallel rows.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "dear/kernels.hpp"

using dear::AttentionMask;
using dear::kernels::Exec;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <Exec E>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    dear::kernels::gemm_nn(a.data(), b.data(), c.data(), n, n, n, false, E);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

template <Exec E>
void BM_Attention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t heads = 4, d = 64;
  const auto q = random_values(n * d, 3), k = random_values(n * d, 4), v = random_values(n * d, 5);
  std::vector<double> out(n * d), probs(heads * n * n);
  std::vector<AttentionMask> masks(heads, AttentionMask::causal(n));
  for (auto _ : state) {
    dear::kernels::attention_forward(q.data(), k.data(), v.data(), out.data(), probs.data(), n, d, heads, masks, E);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * heads * n * n * (d / heads)));
}

template <Exec E>
void BM_MaskedSoftmax(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto s = random_values(n * n, 6);
  std::vector<double> out(n * n);
  const AttentionMask mask = AttentionMask::causal(n);
  for (auto _ : state) {
    dear::kernels::masked_softmax(s.data(), out.data(), n, n, &mask, E);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<Exec::kSerial>)->Arg(32)->Arg(128)->Arg(256)->Name("gemm/serial");
BENCHMARK(BM_Gemm<Exec::kParallel>)->Arg(32)->Arg(128)->Arg(256)->Name("gemm/parallel");
BENCHMARK(BM_Attention<Exec::kSerial>)->Arg(27)->Arg(128)->Arg(512)->Name("attention/serial");
BENCHMARK(BM_Attention<Exec::kParallel>)->Arg(27)->Arg(128)->Arg(512)->Name("attention/parallel");
BENCHMARK(BM_MaskedSoftmax<Exec::kSerial>)->Arg(64)->Arg(512)->Name("masked_softmax/serial");
BENCHMARK(BM_MaskedSoftmax<Exec::kParallel>)->Arg(64)->Arg(512)->Name("masked_softmax/parallel");

BENCHMARK_MAIN();
