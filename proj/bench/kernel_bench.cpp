#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "petlab/kernels.hpp"
#include "petlab/runtime.hpp"
#include "petlab/trainer.hpp"
#include "petlab/transformer.hpp"

using namespace petlab;

namespace {

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <auto Gemm>
void bm_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const kernels::GemmDims dims{n, n, n};
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Gemm(a, b, c, dims, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

// One Adam step of full fine-tuning on the reference backbone.
void bm_train_step(benchmark::State& state) {
  runtime_init();
  ModelConfig mc;
  Backbone model(mc, 1);
  TaskSpec ts;
  ts.train_size = 256;
  ts.val_size = 32;
  ts.test_size = 32;
  const SyntheticTask task = gen_task(ts);
  TrainConfig tc;
  tc.max_steps = 1;
  tc.eval_every = 1000;
  FullFineTune ft(model);
  Trainer trainer(model, ft, tc);
  const Batch batch = task.train.slice(0, 32);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step(batch));
}

}  // namespace

BENCHMARK(bm_gemm<kernels::serial::gemm_nn>)->Name("gemm_nn/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(bm_gemm<kernels::omp::gemm_nn>)->Name("gemm_nn/omp")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(bm_gemm<kernels::serial::gemm_tn>)->Name("gemm_tn/serial")->Arg(128);
BENCHMARK(bm_gemm<kernels::omp::gemm_tn>)->Name("gemm_tn/omp")->Arg(128);
BENCHMARK(bm_gemm<kernels::serial::gemm_nt>)->Name("gemm_nt/serial")->Arg(128);
BENCHMARK(bm_gemm<kernels::omp::gemm_nt>)->Name("gemm_nt/omp")->Arg(128);
BENCHMARK(bm_train_step)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
