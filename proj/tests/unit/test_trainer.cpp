#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "kwcap/datasynth.hpp"
#include "kwcap/errors.hpp"
#include "kwcap/trainer.hpp"

using namespace kwcap;
using kwcap::testing::check_params;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) { return fs::path(::testing::TempDir()) / name; }

HyperConfig micro(DecoderKind decoder, FusionStrategy fusion = FusionStrategy::TransFuser) {
  HyperConfig c = HyperConfig::preset("desk");
  c.decoder = decoder;
  c.fusion = fusion;
  c.image_dim = 4;
  c.embed_dim = 6;
  c.fusion_hidden = 5;
  c.fusion_ffn = 7;
  c.lstm_hidden = 4;
  c.transformer_hidden = 4;
  c.heads = 2;
  c.transformer_ffn = 5;
  c.transformer_blocks = 1;
  c.keyword_encoder_blocks = 1;
  c.predictor_hidden = 3;
  c.min_count = 1;
  c.batch = 4;
  c.epochs = 2;
  c.seed = 3;
  return c;
}

std::vector<Record> records(std::uint64_t seed, std::size_t n) {
  SynthSpec s;
  s.seed = seed;
  s.n_records = n;
  return generate(s);
}

struct Setup {
  CaptionModel model;
  std::vector<Example> examples;
};

Setup setup(const HyperConfig& cfg, std::size_t n = 8) {
  auto recs = records(11, n);
  Setup s{CaptionModel::from_records(cfg, recs), {}};
  for (const auto& r : recs) s.examples.push_back(s.model.prepare(r));
  return s;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
  ParamStore p;
  p.add("x", Tensor::matrix({{1.5, -2.0}}));
  AdamState st;
  AdamConfig h;
  ParamGrads g{{"x", Tensor::matrix({{1.0, 1.0}})}};
  adam_step(p, g, st, h);
  Tensor m = st.m.at("x"), v = st.v.at("x");
  ParamGrads zero{{"x", Tensor::zeros({1, 2})}};
  adam_step(p, zero, st, h);
  // moments decay; the step is driven by the decayed first moment only
  EXPECT_DOUBLE_EQ(st.m.at("x")[0], 0.9 * m[0]);
  EXPECT_DOUBLE_EQ(st.v.at("x")[0], 0.999 * v[0]);

  ParamStore q;
  q.add("y", Tensor::matrix({{3.0}}));
  AdamState fresh;
  adam_step(q, ParamGrads{{"y", Tensor::zeros({1, 1})}}, fresh, h);
  EXPECT_EQ(q.get("y")[0], 3.0);
}

TEST(Adam, FirstStepIsLearningRate) {
  for (double lr : {1e-3, 0.1, 1.0}) {
    ParamStore p;
    p.add("x", Tensor::matrix({{0.0}}));
    AdamState st;
    AdamConfig h;
    h.lr = lr;
    adam_step(p, ParamGrads{{"x", Tensor::matrix({{1.0}})}}, st, h);
    // m_hat = 1, v_hat = 1
    EXPECT_NEAR(p.get("x")[0], -lr / (1.0 + 1e-8), 1e-15);
    EXPECT_EQ(st.t, 1u);
  }
}

TEST(Adam, MinimisesSquare) {
  ParamStore p;
  p.add("x", Tensor::matrix({{5.0}}));
  AdamState st;
  AdamConfig h;
  h.lr = 0.1;
  for (int i = 0; i < 100; ++i) {
    double x = p.get("x")[0];
    adam_step(p, ParamGrads{{"x", Tensor::matrix({{2 * x}})}}, st, h);
  }
  EXPECT_LT(std::abs(p.get("x")[0]), 0.5);
}

TEST(Adam, ShapeMismatchIsContractError) {
  ParamStore p;
  p.add("x", Tensor::zeros({2, 2}));
  AdamState st;
  EXPECT_THROW(adam_step(p, ParamGrads{{"x", Tensor::zeros({1, 2})}}, st, AdamConfig{}), ContractError);
  EXPECT_THROW(adam_step(p, ParamGrads{{"nope", Tensor::zeros({1, 1})}}, st, AdamConfig{}), ContractError);
  EXPECT_EQ(st.t, 0u);
}

TEST(ClipGlobalNorm, ScalesJointNorm) {
  ParamGrads g{{"a", Tensor::matrix({{3.0}})}, {"b", Tensor::matrix({{4.0}})}};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_DOUBLE_EQ(g["a"][0], 0.6);
  EXPECT_DOUBLE_EQ(g["b"][0], 0.8);
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 10.0), 1.0);
  EXPECT_DOUBLE_EQ(g["a"][0], 0.6);
}

TEST(Train, ZeroLearningRateGivesConstantLoss) {
  HyperConfig cfg = micro(DecoderKind::Transformer);
  cfg.lr = 0;
  cfg.batch = 8;  // every step sees the full set
  cfg.epochs = 4;
  auto s = setup(cfg);
  ParamStore before = s.model.params();
  auto res = train_captioner(s.model, s.examples);
  ASSERT_EQ(res.losses.size(), 4u);
  for (double l : res.losses) EXPECT_NEAR(l, res.losses[0], 1e-12 * res.losses[0]);
  EXPECT_EQ(s.model.params(), before);
  EXPECT_NEAR(evaluate_loss(s.model, s.examples), res.losses[0], 1e-12 * res.losses[0]);
}

TEST(Train, SeededRunsIdenticalBitwise) {
  for (auto dec : {DecoderKind::Lstm, DecoderKind::Transformer}) {
    HyperConfig cfg = micro(dec);
    cfg.dropout = 0.1;
    auto a = setup(cfg), b = setup(cfg);
    auto ra = train_captioner(a.model, a.examples), rb = train_captioner(b.model, b.examples);
    EXPECT_EQ(ra.losses, rb.losses);
    EXPECT_EQ(a.model.params(), b.model.params());
    EXPECT_EQ(ra.steps, 4u);
  }
}

TEST(Train, StepCapStopsEarly) {
  HyperConfig cfg = micro(DecoderKind::Transformer);
  cfg.max_steps = 3;
  cfg.epochs = 100;
  auto s = setup(cfg);
  std::vector<std::size_t> seen;
  auto res = train_captioner(s.model, s.examples, [&](std::size_t step, double) { seen.push_back(step); });
  EXPECT_EQ(res.steps, 3u);
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(Train, EmptySplitIsContractError) {
  auto s = setup(micro(DecoderKind::Lstm));
  std::vector<Example> none;
  EXPECT_THROW(train_captioner(s.model, none), ContractError);
  EXPECT_THROW(train_heads(s.model, none), ContractError);
}

TEST(Train, HeadsLossFalls) {
  HyperConfig cfg = micro(DecoderKind::Transformer);
  cfg.predictor_epochs = 40;
  cfg.predictor_lr = 1e-2;
  auto s = setup(cfg, 16);
  auto res = train_heads(s.model, s.examples);
  ASSERT_GT(res.losses.size(), 10u);
  EXPECT_LT(res.losses.back(), res.losses.front());
}

TEST(Checkpoint, RoundTripBitwise) {
  for (auto dec : {DecoderKind::Lstm, DecoderKind::Transformer}) {
    auto s = setup(micro(dec));
    train_captioner(s.model, s.examples);
    auto path = temp_file("model.kwck");
    save_checkpoint(path, s.model, 4);
    Checkpoint ck = load_checkpoint(path);
    EXPECT_EQ(ck.step, 4u);
    EXPECT_EQ(ck.config, s.model.config());
    EXPECT_EQ(ck.vocab, s.model.vocab());
    EXPECT_EQ(ck.keyword_labels, s.model.keyword_labels());
    EXPECT_EQ(ck.params, s.model.params());
    CaptionModel back = model_from_checkpoint(std::move(ck));
    for (const auto& ex : s.examples) {
      Tape t1, t2;
      Binder b1(t1, s.model.params(), false), b2(t2, back.params(), false);
      EXPECT_EQ(s.model.caption_loss(b1, ex, Mode::Eval).nll.value()[0],
                back.caption_loss(b2, ex, Mode::Eval).nll.value()[0]);
      EXPECT_EQ(s.model.generate(ex, 2).tokens, back.generate(ex, 2).tokens);
    }
  }
}

TEST(Checkpoint, RejectsForeignFiles) {
  auto path = temp_file("junk.kwck");
  {
    std::ofstream out(path, std::ios::binary);
    out << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint(path), DataError);
  auto s = setup(micro(DecoderKind::Lstm));
  save_checkpoint(path, s.model, 0);
  fs::resize_file(path, fs::file_size(path) - 5);
  EXPECT_THROW(load_checkpoint(path), DataError);
  EXPECT_THROW(load_checkpoint(temp_file("missing.kwck")), DataError);
}

TEST(LossCsv, StepsFromOne) {
  auto path = temp_file("loss.csv");
  std::vector<double> l{0.5, 0.25};
  write_loss_csv(path, l);
  std::ifstream in(path);
  std::string all((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(all, "step,loss\n1,0.5\n2,0.25\n");
}

// Gradient of the full caption loss with respect to every parameter group,
// on micro widths so central differences stay cheap.
class FullModelGradient : public ::testing::TestWithParam<std::pair<DecoderKind, FusionStrategy>> {};

TEST_P(FullModelGradient, MatchesCentralDifferences) {
  auto [dec, fusion] = GetParam();
  HyperConfig cfg = micro(dec, fusion);
  cfg.max_len = 12;
  auto s = setup(cfg, 3);
  Rng rng(5);
  for (auto& [name, p] : s.model.params())
    if (name.ends_with(".b") || name.ends_with(".beta")) p = kwcap::testing::random_tensor(p.shape(), rng, -0.2, 0.2);
  const Example& ex = s.examples[1];
  // The summed NLL is large next to some gradients (keys), so a smaller
  // step only adds rounding noise.
  auto res = check_params([&](Binder& b) { return s.model.caption_loss(b, ex, Mode::Eval).nll; }, s.model.params(),
                          1e-4, 24);
  EXPECT_LT(res.worst, 1e-4) << res.worst_name;
  EXPECT_EQ(res.checked, s.model.params().size());
}

INSTANTIATE_TEST_SUITE_P(Pipelines, FullModelGradient,
                         ::testing::Values(std::pair{DecoderKind::Lstm, FusionStrategy::TransFuser},
                                           std::pair{DecoderKind::Transformer, FusionStrategy::TransFuser},
                                           std::pair{DecoderKind::Transformer, FusionStrategy::CoAttention},
                                           std::pair{DecoderKind::Lstm, FusionStrategy::Sum}));
