// Serial vs OpenMP kernels. Run with OMP_NUM_THREADS to vary parallelism.
#include <benchmark/benchmark.h>

#include "sagelab/attention_tiled.hpp"
#include "sagelab/quant.hpp"

using namespace sagelab;

namespace {

AttentionInputs inputs(std::size_t n, std::size_t d) {
    Rng rng(1);
    Matrix q = gaussian_matrix(n, d, 1.0, rng), k = gaussian_matrix(n, d, 1.0, rng);
    Matrix v = gaussian_matrix(n, d, 1.0, rng), d_o = gaussian_matrix(n, d, 1.0, rng);
    return AttentionInputs::make(q, k, v, d_o);
}

TilingConfig tiling() {
    TilingConfig cfg;
    cfg.smoothing.k = true;
    return cfg;
}

void BM_MatmulSerial(benchmark::State& st) {
    Rng rng(2);
    const auto n = static_cast<std::size_t>(st.range(0));
    const Matrix a = gaussian_matrix(n, n, 1.0, rng), b = gaussian_matrix(n, n, 1.0, rng);
    for (auto _ : st) benchmark::DoNotOptimize(serial::matmul(a, b));
}

void BM_MatmulParallel(benchmark::State& st) {
    Rng rng(2);
    const auto n = static_cast<std::size_t>(st.range(0));
    const Matrix a = gaussian_matrix(n, n, 1.0, rng), b = gaussian_matrix(n, n, 1.0, rng);
    for (auto _ : st) benchmark::DoNotOptimize(matmul(a, b));
}

void BM_QuantizedMatmul(benchmark::State& st) {
    Rng rng(3);
    const QuantizedBlock a = quantize_per_block(gaussian_matrix(64, 64, 1.0, rng));
    const QuantizedBlock b = quantize_per_block(gaussian_matrix(64, 64, 1.0, rng));
    for (auto _ : st) benchmark::DoNotOptimize(quantized_matmul(a, b, Trans::none, Trans::transpose));
}

void BM_ForwardSerial(benchmark::State& st) {
    const auto in = inputs(static_cast<std::size_t>(st.range(0)), 64);
    const auto cfg = tiling();
    for (auto _ : st) benchmark::DoNotOptimize(serial::sagebwd_forward(in, cfg));
}

void BM_ForwardParallel(benchmark::State& st) {
    const auto in = inputs(static_cast<std::size_t>(st.range(0)), 64);
    const auto cfg = tiling();
    for (auto _ : st) benchmark::DoNotOptimize(sagebwd_forward(in, cfg));
}

void BM_BackwardSerial(benchmark::State& st) {
    const auto in = inputs(static_cast<std::size_t>(st.range(0)), 64);
    const auto cfg = tiling();
    const auto fwd = serial::sagebwd_forward(in, cfg);
    for (auto _ : st) benchmark::DoNotOptimize(serial::sagebwd_backward(fwd, in, cfg));
}

void BM_BackwardParallel(benchmark::State& st) {
    const auto in = inputs(static_cast<std::size_t>(st.range(0)), 64);
    const auto cfg = tiling();
    const auto fwd = sagebwd_forward(in, cfg);
    for (auto _ : st) benchmark::DoNotOptimize(sagebwd_backward(fwd, in, cfg));
}

}  // namespace

BENCHMARK(BM_MatmulSerial)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MatmulParallel)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_QuantizedMatmul)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ForwardSerial)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ForwardParallel)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BackwardSerial)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BackwardParallel)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
