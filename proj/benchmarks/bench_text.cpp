#include <benchmark/benchmark.h>

#include <filesystem>

#include "kwcap/datasynth.hpp"
#include "kwcap/metrics.hpp"
#include "kwcap/text.hpp"

using namespace kwcap;

namespace {

std::pair<std::vector<Sentence>, std::vector<Sentence>> corpus(std::size_t n) {
  SynthSpec s;
  s.seed = 3;
  s.n_records = 2 * n;
  auto recs = generate(s);
  std::vector<Sentence> cands, refs;
  for (std::size_t i = 0; i < n; ++i) {
    cands.push_back(preprocess(recs[i].description));
    refs.push_back(preprocess(recs[n + i].description));
  }
  return {cands, refs};
}

void BM_Bleu4(benchmark::State& state) {
  auto [c, r] = corpus(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(bleu(c, r, 4));
}
BENCHMARK(BM_Bleu4)->Arg(400);

void BM_Cider(benchmark::State& state) {
  auto [c, r] = corpus(static_cast<std::size_t>(state.range(0)));
  std::vector<std::vector<Sentence>> sets;
  for (const auto& s : r) sets.push_back({s});
  for (auto _ : state) benchmark::DoNotOptimize(corpus_cider(c, sets));
}
BENCHMARK(BM_Cider)->Arg(400);

void BM_EvaluateCorpus(benchmark::State& state) {
  auto [c, r] = corpus(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_corpus(c, r).bleu_avg);
}
BENCHMARK(BM_EvaluateCorpus)->Arg(400)->Unit(benchmark::kMillisecond);

void BM_JsonlRoundTrip(benchmark::State& state) {
  SynthSpec s;
  s.n_records = static_cast<std::size_t>(state.range(0));
  auto recs = generate(s);
  auto path = std::filesystem::temp_directory_path() / "kwcap_bench.jsonl";
  for (auto _ : state) {
    save_jsonl(path, recs);
    benchmark::DoNotOptimize(load_jsonl(path).size());
  }
  std::filesystem::remove(path);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_JsonlRoundTrip)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_Synthesise(benchmark::State& state) {
  SynthSpec s;
  s.n_records = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(generate(s).size());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Synthesise)->Arg(1000)->Unit(benchmark::kMillisecond);

}  // namespace
