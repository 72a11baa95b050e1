#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "kbc/kernels.hpp"

namespace k = kbc::kernels;

namespace {

std::vector<std::uint8_t> random_bits(std::size_t n, double p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution bit(p);
    std::vector<std::uint8_t> v(n);
    for (auto& x : v) x = bit(rng);
    return v;
}

std::vector<double> random_reals(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

template <bool Parallel>
void BM_RowCosine(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_bits(n * n, 0.05, 1), b = random_bits(n * n, 0.05, 2);
    for (auto _ : state) {
        auto r = Parallel ? k::row_cosine(a, b, n) : k::serial::row_cosine(a, b, n);
        benchmark::DoNotOptimize(r);
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}

template <bool Parallel>
void BM_LabelConfusion(benchmark::State& state) {
    const auto rows = static_cast<std::size_t>(state.range(0));
    const std::size_t cols = 80;
    auto scores = random_reals(rows * cols, 3);
    for (auto& s : scores) s = (s + 1.0) / 2.0;
    const auto gold = random_bits(rows * cols, 0.1, 4);
    for (auto _ : state) {
        auto r = Parallel ? k::label_confusion(scores, gold, rows, cols, 0.5)
                          : k::serial::label_confusion(scores, gold, rows, cols, 0.5);
        benchmark::DoNotOptimize(r);
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows * cols));
}

template <bool Parallel>
void BM_AveragePrecision(benchmark::State& state) {
    const auto rows = static_cast<std::size_t>(state.range(0));
    const std::size_t cols = 80;
    const auto scores = random_reals(rows * cols, 5);
    const auto gold = random_bits(rows * cols, 0.1, 6);
    for (auto _ : state) {
        auto r = Parallel ? k::label_average_precision(scores, gold, rows, cols)
                          : k::serial::label_average_precision(scores, gold, rows, cols);
        benchmark::DoNotOptimize(r);
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows * cols));
}

template <bool Parallel>
void BM_PairwiseCosine(benchmark::State& state) {
    const auto count = static_cast<std::size_t>(state.range(0));
    const std::size_t dim = 512;
    const auto lhs = random_reals(count * dim, 7), rhs = random_reals(count * dim, 8);
    for (auto _ : state) {
        auto r = Parallel ? k::pairwise_cosine(lhs, rhs, count, dim) : k::serial::pairwise_cosine(lhs, rhs, count, dim);
        benchmark::DoNotOptimize(r);
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(count * dim));
}

}  // namespace

BENCHMARK(BM_RowCosine<false>)->Name("row_cosine/serial")->Arg(16)->Arg(256)->Arg(1024);
BENCHMARK(BM_RowCosine<true>)->Name("row_cosine/openmp")->Arg(16)->Arg(256)->Arg(1024);
BENCHMARK(BM_LabelConfusion<false>)->Name("label_confusion/serial")->Arg(1000)->Arg(40000);
BENCHMARK(BM_LabelConfusion<true>)->Name("label_confusion/openmp")->Arg(1000)->Arg(40000);
BENCHMARK(BM_AveragePrecision<false>)->Name("average_precision/serial")->Arg(1000)->Arg(40000);
BENCHMARK(BM_AveragePrecision<true>)->Name("average_precision/openmp")->Arg(1000)->Arg(40000);
BENCHMARK(BM_PairwiseCosine<false>)->Name("pairwise_cosine/serial")->Arg(64)->Arg(4096);
BENCHMARK(BM_PairwiseCosine<true>)->Name("pairwise_cosine/openmp")->Arg(64)->Arg(4096);

BENCHMARK_MAIN();
