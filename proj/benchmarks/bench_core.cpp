// Microbenchmarks for the hot paths: autodiff matmul round trips, residual
// quantization of a full grid, tower encode, and one backbone forward.

#include <benchmark/benchmark.h>

#include <random>

#include "rqunify/generator.hpp"
#include "rqunify/quantizer.hpp"
#include "rqunify/tower.hpp"

using namespace rqunify;

static void BM_MatmulForwardBackward(benchmark::State& state) {
  const int64_t n = state.range(0);
  std::mt19937_64 rng(1);
  auto a = randn_tensor<float>({n, n}, rng, 1.0f);
  auto b = randn_tensor<float>({n, n}, rng, 1.0f);
  for (auto _ : state) {
    a.zero_grad();
    b.zero_grad();
    auto loss = sum(matmul(a, b));
    backward(loss);
    benchmark::DoNotOptimize(a.grad().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_MatmulForwardBackward)->Arg(64)->Arg(128)->Arg(256);

static void BM_ResidualQuantizeGrid(benchmark::State& state) {
  QuantizerConfig qc;
  qc.codebook_size = 64;
  qc.dim = 64;
  qc.depth = 4;
  std::mt19937_64 rng(2);
  CodebookT<float> cb(qc, rng);
  std::normal_distribution<float> nd(0.f, 1.f);
  std::vector<std::vector<float>> zs(64, std::vector<float>(64));
  for (auto& z : zs)
    for (auto& v : z) v = nd(rng);
  for (auto _ : state)
    for (const auto& z : zs)
      benchmark::DoNotOptimize(residual_quantize(z, cb, qc.depth).stack);
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_ResidualQuantizeGrid);

static void BM_TowerEncode(benchmark::State& state) {
  TowerConfig tc;
  tc.text_vocab = TextVocab{}.size();
  QuantizerConfig qc;
  qc.codebook_size = 64;
  qc.dim = tc.embed_dim;
  qc.depth = 4;
  std::mt19937_64 rng(3);
  TowerT<float> tower(tc, qc, rng);
  SyntheticSpec spec;
  auto img = render_image(spec, Attributes::from_label(9));
  for (auto _ : state)
    benchmark::DoNotOptimize(tower.encode_image(img).data());
}
BENCHMARK(BM_TowerEncode);

static void BM_BackboneForward(benchmark::State& state) {
  UnifiedVocab uv{TextVocab{}};
  BackboneConfig bc;
  bc.vocab = uv.size();
  bc.code_dim = 64;
  std::mt19937_64 rng(4);
  QuantizerConfig qc;
  qc.codebook_size = bc.codebook_size;
  qc.dim = bc.code_dim;
  qc.depth = bc.depth;
  CodebookT<float> cb(qc, rng);
  GeneratorT<float> gen(bc, rng);
  CodeGrid grid;
  grid.height = grid.width = 8;
  for (int64_t p = 0; p < 64; ++p)
    grid.stacks.push_back({p % 64, (p + 7) % 64, (p + 13) % 64, (p + 29) % 64});
  auto s = build_sample(DataForm::TextImage, uv, {0, 1, 2, 3, 4, 5}, {grid});
  for (auto _ : state)
    benchmark::DoNotOptimize(gen.forward(s, cb).data());
}
BENCHMARK(BM_BackboneForward);

BENCHMARK_MAIN();
