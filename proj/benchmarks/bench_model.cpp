#include <benchmark/benchmark.h>

#include "kwcap/datasynth.hpp"
#include "kwcap/trainer.hpp"

using namespace kwcap;

namespace {

struct Fixture {
  std::vector<Record> records;
  CaptionModel model;
  std::vector<Example> examples;
};

Fixture make(DecoderKind decoder, FusionStrategy fusion) {
  SynthSpec s;
  s.seed = 5;
  s.n_records = 32;
  auto recs = generate(s);
  HyperConfig cfg = HyperConfig::preset("desk");
  cfg.decoder = decoder;
  cfg.fusion = fusion;
  cfg.min_count = 1;
  Fixture f{recs, CaptionModel::from_records(cfg, recs), {}};
  for (const auto& r : recs) f.examples.push_back(f.model.prepare(r));
  return f;
}

std::pair<DecoderKind, FusionStrategy> pipeline(std::int64_t i) {
  switch (i) {
    case 0:
      return {DecoderKind::Transformer, FusionStrategy::TransFuser};
    case 1:
      return {DecoderKind::Transformer, FusionStrategy::CoAttention};
    default:
      return {DecoderKind::Lstm, FusionStrategy::TransFuser};
  }
}

const char* pipeline_name(std::int64_t i) {
  static const char* names[] = {"transformer/transfuser", "transformer/coattention", "lstm/transfuser"};
  return names[i];
}

// One teacher-forced loss plus backward pass on a single example.
void BM_LossAndGradient(benchmark::State& state) {
  auto [dec, fusion] = pipeline(state.range(0));
  Fixture f = make(dec, fusion);
  std::size_t i = 0;
  for (auto _ : state) {
    Tape t;
    Binder b(t, f.model.params(), true);
    auto loss = f.model.caption_loss(b, f.examples[i++ % f.examples.size()], Mode::Train);
    ParamGrads g = b.gradients(t.backward(loss.nll));
    benchmark::DoNotOptimize(g.size());
  }
  state.SetLabel(pipeline_name(state.range(0)));
}
BENCHMARK(BM_LossAndGradient)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

// Full caption for one example, greedy or beam 3.
void BM_Generate(benchmark::State& state) {
  auto [dec, fusion] = pipeline(state.range(0));
  Fixture f = make(dec, fusion);
  auto beam = static_cast<std::size_t>(state.range(1));
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(f.model.generate(f.examples[i++ % f.examples.size()], beam).log_prob);
  state.SetLabel(pipeline_name(state.range(0)));
}
BENCHMARK(BM_Generate)->ArgsProduct({{0, 1, 2}, {1, 3}})->Unit(benchmark::kMillisecond);

void BM_TrainEpoch(benchmark::State& state) {
  for (auto _ : state) {
    state.PauseTiming();
    Fixture f = make(DecoderKind::Transformer, FusionStrategy::TransFuser);
    state.ResumeTiming();
    benchmark::DoNotOptimize(train_captioner(f.model, f.examples).steps);
  }
}
BENCHMARK(BM_TrainEpoch)->Iterations(1)->Unit(benchmark::kSecond);

}  // namespace
