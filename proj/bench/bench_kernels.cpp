// Serial reference vs OpenMP kernels on study-sized inputs: one prompt cell
// of 500 texts at 768 dimensions, and the moments pass of a model fit.

#include <benchmark/benchmark.h>

#include <random>
#include <span>
#include <vector>

#include "hbias/kernels.hpp"

namespace {

std::vector<float> random_matrix(std::size_t n, std::size_t dim) {
  std::mt19937_64 rng(42);
  std::normal_distribution<float> normal(0.0F, 1.0F);
  std::vector<float> m(n * dim);
  for (auto& x : m) x = normal(rng);
  return m;
}

template <auto Kernel>
void BM_PairwiseCosine(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto dim = static_cast<std::size_t>(state.range(1));
  const auto m = random_matrix(n, dim);
  std::vector<double> out(hbias::kernels::pair_count(n));
  for (auto _ : state) {
    Kernel(m.data(), n, dim, out.data());
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * out.size()));
}

template <auto Kernel>
void BM_BlockMoments(benchmark::State& state) {
  const auto blocks_n = static_cast<std::size_t>(state.range(0));
  const auto per_block = static_cast<std::size_t>(state.range(1));
  std::mt19937_64 rng(7);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> storage(blocks_n, std::vector<double>(per_block));
  for (auto& b : storage) {
    for (auto& x : b) x = normal(rng);
  }
  std::vector<std::span<const double>> blocks(storage.begin(), storage.end());
  std::vector<hbias::kernels::Moments> out(blocks_n);
  for (auto _ : state) {
    Kernel(blocks, out.data());
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * blocks_n * per_block));
}

}  // namespace

BENCHMARK(BM_PairwiseCosine<hbias::kernels::serial::pairwise_cosine>)
    ->Name("pairwise_cosine/serial")
    ->Args({100, 768})
    ->Args({500, 768})
    ->Unit(benchmark::kMillisecond);
BENCHMARK(BM_PairwiseCosine<hbias::kernels::parallel::pairwise_cosine>)
    ->Name("pairwise_cosine/parallel")
    ->Args({100, 768})
    ->Args({500, 768})
    ->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BlockMoments<hbias::kernels::serial::block_moments>)
    ->Name("block_moments/serial")
    ->Args({104, 124750})
    ->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BlockMoments<hbias::kernels::parallel::block_moments>)
    ->Name("block_moments/parallel")
    ->Args({104, 124750})
    ->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
