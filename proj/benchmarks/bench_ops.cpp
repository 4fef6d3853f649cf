#include <benchmark/benchmark.h>

#include "kwcap/attention.hpp"
#include "kwcap/ops.hpp"

using namespace kwcap;

namespace {

Tensor filled(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({r, c});
  for (double& x : t.data()) x = rng.uniform(-1, 1);
  return t;
}

void BM_MatmulForward(benchmark::State& state) {
  auto n = static_cast<std::size_t>(state.range(0));
  Tensor a = filled(n, n, 1), b = filled(n, n, 2);
  for (auto _ : state) {
    Tape t;
    benchmark::DoNotOptimize(matmul(t.constant(a), t.constant(b)).value().data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_MatmulForward)->Arg(16)->Arg(64)->Arg(256);

void BM_MatmulBackward(benchmark::State& state) {
  auto n = static_cast<std::size_t>(state.range(0));
  Tensor a = filled(n, n, 1), b = filled(n, n, 2);
  for (auto _ : state) {
    Tape t;
    Var x = t.leaf(a, true), y = t.leaf(b, true);
    Gradients g = t.backward(sum(matmul(x, y)));
    benchmark::DoNotOptimize(g.of(x).data().data());
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(16)->Arg(64)->Arg(256);

void BM_Softmax(benchmark::State& state) {
  Tensor a = filled(64, static_cast<std::size_t>(state.range(0)), 3);
  for (auto _ : state) {
    Tape t;
    benchmark::DoNotOptimize(softmax_lastdim(t.constant(a)).value().data().data());
  }
}
BENCHMARK(BM_Softmax)->Arg(64)->Arg(1024);

// Self-attention over `rows` positions with the decoder's causal mask.
void BM_MultiHeadAttention(benchmark::State& state) {
  auto rows = static_cast<std::size_t>(state.range(0));
  Tensor x = filled(rows, 64, 4);
  Tensor mask = causal_mask(rows, rows);
  for (auto _ : state) {
    Tape t;
    Var v = t.leaf(x, true);
    Attention a = multi_head_attention(v, v, v, 8, &mask);
    Gradients g = t.backward(sum(a.output));
    benchmark::DoNotOptimize(g.of(v).data().data());
  }
}
BENCHMARK(BM_MultiHeadAttention)->Arg(16)->Arg(50);

}  // namespace
