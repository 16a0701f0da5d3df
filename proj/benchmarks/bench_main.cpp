#include <benchmark/benchmark.h>

#include <random>

#include "latentcsi/encoder.hpp"
#include "latentcsi/latent_backend.hpp"
#include "latentcsi/metrics.hpp"
#include "latentcsi/nn/layers.hpp"
#include "latentcsi/nn/tape.hpp"
#include "latentcsi/toy_backend.hpp"

using namespace latentcsi;

namespace {

std::vector<float> randn(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd;
  std::vector<float> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

// 3x3 convolution forward and backward at a given channel count on 16x16.
void BM_Conv3x3(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0)), n = 8, hw = 16;
  const auto x = randn(static_cast<std::size_t>(n) * c * hw * hw, 1);
  const auto w = randn(static_cast<std::size_t>(c) * c * 9, 2);
  const auto b = randn(c, 3);
  for (auto _ : state) {
    nn::Tape<float> t;
    auto xv = t.constant({n, c, hw, hw}, x);
    auto wv = t.constant({c, c, 3, 3}, w);
    auto bv = t.constant({c}, b);
    auto y = t.conv2d(xv, wv, bv, 1, 1);
    benchmark::DoNotOptimize(t.value(y).data());
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Conv3x3)->Arg(8)->Arg(32)->Arg(64);

void BM_EncoderForward(benchmark::State& state) {
  const int batch = static_cast<int>(state.range(0));
  const auto spec = model_spec(desk_encoder_config(64));
  const auto w = build_model(spec, 1);
  const auto x = randn(static_cast<std::size_t>(batch) * spec.s, 4);
  for (auto _ : state) benchmark::DoNotOptimize(forward_batch(w, spec, x, batch));
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_EncoderForward)->Arg(1)->Arg(32);

void BM_BaselineForward(benchmark::State& state) {
  const int batch = static_cast<int>(state.range(0));
  const auto spec = model_spec(desk_baseline_config(64));
  const auto w = build_model(spec, 1);
  const auto x = randn(static_cast<std::size_t>(batch) * spec.s, 4);
  for (auto _ : state) benchmark::DoNotOptimize(forward_batch(w, spec, x, batch));
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_BaselineForward)->Arg(1)->Arg(32);

void BM_Img2Img(benchmark::State& state) {
  const auto backend = ToyBackend::initialize(ToyBackendConfig{}, 1);
  LatentTensor z(4, 8, 8);
  z.data = randn(z.size(), 5);
  Img2ImgParams p;
  p.steps = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(img2img(z, p, *backend).image.data.data());
}
BENCHMARK(BM_Img2Img)->Arg(10)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_Ssim(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  RgbImage a(s, s), b(s, s);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> u;
  for (auto& v : a.data) v = u(rng);
  for (auto& v : b.data) v = u(rng);
  for (auto _ : state) benchmark::DoNotOptimize(ssim(a, b));
}
BENCHMARK(BM_Ssim)->Arg(64)->Arg(256);

void BM_Fid(benchmark::State& state) {
  const int k = static_cast<int>(state.range(0));
  FeatureSet f, g;
  f.n = g.n = 500;
  f.k = g.k = k;
  f.data.resize(f.n * k);
  g.data.resize(g.n * k);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  for (auto& v : f.data) v = nd(rng);
  for (auto& v : g.data) v = nd(rng) + 0.1;
  for (auto _ : state) benchmark::DoNotOptimize(fid(f, g));
}
BENCHMARK(BM_Fid)->Arg(64)->Arg(256);

void BM_ToyFeatures(benchmark::State& state) {
  ToyFeatureExtractor fx;
  std::vector<RgbImage> imgs(64, RgbImage(64, 64, 0.5f));
  for (auto _ : state) benchmark::DoNotOptimize(fx.extract(imgs).data.data());
  state.SetItemsProcessed(state.iterations() * imgs.size());
}
BENCHMARK(BM_ToyFeatures);

}  // namespace

BENCHMARK_MAIN();
