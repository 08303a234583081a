// SPDX-License-Identifier: Apache-2.0
//
// OpenMP kernels against the serial reference, plus the end-to-end fold.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "foldkit/clustering.hpp"
#include "foldkit/folding.hpp"
#include "foldkit/harness.hpp"
#include "foldkit/kernels.hpp"

namespace k = foldkit::kernels;

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <bool Parallel>
void BM_DenseForward(benchmark::State& st) {
  const std::size_t batch = 256, in = static_cast<std::size_t>(st.range(0)), out = in;
  const auto x = noise(batch * in, 1), w = noise(out * in, 2), b = noise(out, 3);
  std::vector<double> y(batch * out);
  for (auto _ : st) {
    if constexpr (Parallel) k::dense_forward(x.data(), w.data(), b.data(), y.data(), batch, in, out);
    else k::reference::dense_forward(x.data(), w.data(), b.data(), y.data(), batch, in, out);
    benchmark::DoNotOptimize(y.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * batch * in * out));
}

template <bool Parallel>
void BM_DenseBackwardWeight(benchmark::State& st) {
  const std::size_t batch = 256, in = static_cast<std::size_t>(st.range(0)), out = in;
  const auto dy = noise(batch * out, 1), x = noise(batch * in, 2);
  std::vector<double> dw(out * in), db(out);
  for (auto _ : st) {
    if constexpr (Parallel) k::dense_backward_weight(dy.data(), x.data(), dw.data(), db.data(), batch, in, out);
    else k::reference::dense_backward_weight(dy.data(), x.data(), dw.data(), db.data(), batch, in, out);
    benchmark::DoNotOptimize(dw.data());
  }
}

k::ConvGeometry geometry(std::size_t channels) {
  k::ConvGeometry g;
  g.batch = 32;
  g.in_channels = g.out_channels = channels;
  g.in_h = g.in_w = 8;
  g.kernel_h = g.kernel_w = 3;
  g.padding = 1;
  return g;
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& st) {
  const auto g = geometry(static_cast<std::size_t>(st.range(0)));
  const auto x = noise(g.batch * g.in_channels * g.in_h * g.in_w, 1);
  const auto w = noise(g.out_channels * g.in_channels * 9, 2), b = noise(g.out_channels, 3);
  std::vector<double> y(g.batch * g.out_channels * g.out_h() * g.out_w());
  for (auto _ : st) {
    if constexpr (Parallel) k::conv2d_forward(x.data(), w.data(), b.data(), y.data(), g);
    else k::reference::conv2d_forward(x.data(), w.data(), b.data(), y.data(), g);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_NearestCentroid(benchmark::State& st) {
  const std::size_t n = 4096, kk = static_cast<std::size_t>(st.range(0)), d = 64;
  const auto p = noise(n * d, 1), c = noise(kk * d, 2);
  std::vector<std::uint32_t> labels(n);
  std::vector<double> dist(n);
  for (auto _ : st) {
    if constexpr (Parallel) k::nearest_centroid(p.data(), c.data(), n, kk, d, labels.data(), dist.data());
    else k::reference::nearest_centroid(p.data(), c.data(), n, kk, d, labels.data(), dist.data());
    benchmark::DoNotOptimize(dist.data());
  }
}

void BM_KMeans(benchmark::State& st) {
  const std::size_t n = static_cast<std::size_t>(st.range(0)), d = 129;
  const foldkit::Matrix x(n, d, noise(n * d, 4));
  for (auto _ : st) benchmark::DoNotOptimize(foldkit::kmeans(x, n / 2, 7).cost);
}

void BM_FoldCatalogMlp(benchmark::State& st) {
  const auto net = foldkit::make_network({foldkit::Architecture::MlpBn, 128}, {16}, 8, 1);
  const auto plan = foldkit::uniform_plan(net, 0.5, foldkit::Coupling::BnAr, 3);
  for (auto _ : st) benchmark::DoNotOptimize(foldkit::fold_network(net, plan).report.total_cost);
}

}  // namespace

BENCHMARK(BM_DenseForward<false>)->Name("dense_forward/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_DenseForward<true>)->Name("dense_forward/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_DenseBackwardWeight<false>)->Name("dense_backward_weight/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_DenseBackwardWeight<true>)->Name("dense_backward_weight/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_ConvForward<false>)->Name("conv2d_forward/serial")->Arg(16)->Arg(32);
BENCHMARK(BM_ConvForward<true>)->Name("conv2d_forward/omp")->Arg(16)->Arg(32);
BENCHMARK(BM_NearestCentroid<false>)->Name("nearest_centroid/serial")->Arg(16)->Arg(64);
BENCHMARK(BM_NearestCentroid<true>)->Name("nearest_centroid/omp")->Arg(16)->Arg(64);
BENCHMARK(BM_KMeans)->Arg(64)->Arg(128);
BENCHMARK(BM_FoldCatalogMlp);

BENCHMARK_MAIN();
