// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "cli.hpp"
#include "gradcheck.hpp"
#include "json.hpp"
#include "kwcap/datasynth.hpp"
#include "kwcap/decoders.hpp"
#include "kwcap/encoders.hpp"
#include "kwcap/errors.hpp"
#include "kwcap/fusion.hpp"
#include "kwcap/heads.hpp"
#include "kwcap/metrics.hpp"
#include "kwcap/search.hpp"
#include "kwcap/trainer.hpp"
#include "oracles.hpp"

using namespace kwcap;
using kwcap::testing::check_inputs;
using kwcap::testing::check_params;
using kwcap::testing::random_tensor;
using kwcap::testing::readout;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Collects failed expectations for one criterion.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    ++total_;
    if (!ok && failures_.size() < 8) failures_.push_back(what);
    failed_ += !ok;
  }
  void note(const std::string& s) { notes_.push_back(s); }
  bool passed() const { return failed_ == 0; }
  std::string summary() const {
    std::string s = std::to_string(total_ - failed_) + "/" + std::to_string(total_) + " checks";
    for (const auto& n : notes_) s += "; " + n;
    for (const auto& f : failures_) s += "\n    failed: " + f;
    return s;
  }

 private:
  std::size_t total_ = 0, failed_ = 0;
  std::vector<std::string> failures_, notes_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream o;
  o.precision(precision);
  o << v;
  return o.str();
}

int run_cli(const std::vector<std::string>& args, std::string* out_text = nullptr) {
  std::ostringstream out, err;
  int code = cli::run(args, out, err);
  if (out_text) *out_text = out.str();
  if (code != cli::kOk) std::cerr << "kwcap " << args.front() << " exited " << code << ": " << err.str();
  return code;
}

std::vector<Record> records(std::uint64_t seed, std::size_t n) {
  SynthSpec s;
  s.seed = seed;
  s.n_records = n;
  return generate(s);
}

HyperConfig micro(DecoderKind decoder, FusionStrategy fusion) {
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
  c.max_len = 12;
  c.seed = 3;
  return c;
}

// --- 1 -----------------------------------------------------------------------

bool gradient_integrity(const fs::path&, Checks& c) {
  auto t0 = Clock::now();
  constexpr double kTol = 1e-4;
  Rng rng(1);
  auto grid = [&](std::size_t r, std::size_t k) { return random_tensor({r, k}, rng); };
  Tensor away_from_kink = grid(4, 5);
  for (double& v : away_from_kink.data())
    if (std::fabs(v) < 0.05) v = 0.3;
  std::vector<std::int32_t> targets{2, -1, 0}, gather_ids{1, 3, 1, 0};
  std::vector<TokenId> gold{2, 0, kwcap::special::kPad};
  bool valid[] = {true, false, true, true};
  Tensor bce_t = Tensor::matrix({{1, 0, 1}, {0, 0, 1}, {1, 1, 0}});
  Tensor pad_mask = key_padding_mask(3, std::span<const bool>(valid, 4));
  Tensor causal = causal_mask(4, 4);
  using Fn = kwcap::testing::InputFn;
  using V = const std::vector<Var>&;

  struct Case {
    const char* name;
    Fn f;
    std::vector<Tensor> inputs;
  };
  std::vector<Case> cases = {
      {"matmul", [](Tape&, V v) { return readout(matmul(v[0], v[1])); }, {grid(3, 4), grid(4, 2)}},
      {"transpose", [](Tape&, V v) { return readout(transpose(v[0])); }, {grid(3, 4)}},
      {"add", [](Tape&, V v) { return readout(add(v[0], v[1])); }, {grid(3, 3), grid(3, 3)}},
      {"sub", [](Tape&, V v) { return readout(sub(v[0], v[1])); }, {grid(3, 3), grid(3, 3)}},
      {"mul", [](Tape&, V v) { return readout(mul(v[0], v[1])); }, {grid(3, 3), grid(3, 3)}},
      {"scale", [](Tape&, V v) { return readout(scale(v[0], -0.7)); }, {grid(3, 3)}},
      {"add_row", [](Tape&, V v) { return readout(add_row(v[0], v[1])); }, {grid(3, 4), random_tensor({4}, rng)}},
      {"relu", [](Tape&, V v) { return readout(relu(v[0])); }, {away_from_kink}},
      {"sigmoid", [](Tape&, V v) { return readout(sigmoid(v[0])); }, {grid(4, 5)}},
      {"tanh", [](Tape&, V v) { return readout(tanh(v[0])); }, {grid(4, 5)}},
      {"softmax", [](Tape&, V v) { return readout(softmax_lastdim(v[0])); }, {grid(3, 5)}},
      {"layer_norm", [](Tape&, V v) { return readout(layer_norm(v[0], v[1], v[2])); },
       {grid(3, 6), random_tensor({6}, rng, 0.5, 1.5), random_tensor({6}, rng)}},
      {"concat_lastdim", [](Tape&, V v) { return readout(concat_lastdim({v[0], v[1]})); }, {grid(2, 3), grid(2, 2)}},
      {"concat_rows", [](Tape&, V v) { return readout(concat_rows({v[0], v[1]})); }, {grid(2, 3), grid(1, 3)}},
      {"slice_lastdim", [](Tape&, V v) { return readout(slice_lastdim(v[0], 1, 2)); }, {grid(3, 4)}},
      {"slice_rows", [](Tape&, V v) { return readout(slice_rows(v[0], 1, 2)); }, {grid(4, 3)}},
      {"gather_rows", [&](Tape&, V v) { return readout(gather_rows(v[0], gather_ids)); }, {grid(4, 3)}},
      {"reshape", [](Tape&, V v) { return readout(reshape(v[0], {2, 6})); }, {grid(3, 4)}},
      {"sum", [](Tape&, V v) { return sum(mul(v[0], v[0])); }, {grid(3, 4)}},
      {"dropout",
       [](Tape&, V v) {
         Rng r(8);  // same mask on every evaluation
         return readout(dropout(v[0], 0.3, Mode::Train, r));
       },
       {grid(4, 4)}},
      {"nll_from_logits", [&](Tape&, V v) { return nll_from_logits(v[0], targets); }, {grid(3, 4)}},
      {"nll_from_probs", [&](Tape&, V v) { return nll_from_probs(softmax_lastdim(v[0]), targets); }, {grid(3, 4)}},
      {"bce_with_logits", [&](Tape&, V v) { return bce_with_logits(v[0], bce_t); }, {grid(3, 3)}},
      {"cross_entropy_loss", [&](Tape&, V v) { return cross_entropy_loss(softmax_lastdim(v[0]), gold); },
       {grid(3, 4)}},
      {"scaled_dot_attention",
       [&](Tape&, V v) { return readout(scaled_dot_attention(v[0], v[1], v[2], &pad_mask, 3.0).output); },
       {grid(3, 3), grid(4, 3), grid(4, 2)}},
      {"multi_head_attention",
       [&](Tape&, V v) { return readout(multi_head_attention(v[0], v[1], v[2], 2, &causal).output); },
       {grid(4, 4), grid(4, 4), grid(4, 4)}},
      {"mean_rows", [](Tape&, V v) { return readout(mean_rows(v[0])); }, {grid(3, 4)}},
      {"masked_mean_rows",
       [&](Tape&, V v) { return readout(masked_mean_rows(v[0], std::span<const bool>(valid, 4))); },
       {grid(4, 3)}},
  };
  double worst_op = 0;
  for (auto& k : cases) {
    double err = check_inputs(k.f, k.inputs);
    worst_op = std::max(worst_op, err);
    c.expect(err <= kTol, std::string(k.name) + " rel err " + fmt(err));
  }

  // Full pipelines, every parameter tensor, every element.
  double worst_model = 0;
  std::size_t tensors = 0;
  auto recs = records(11, 3);
  std::vector<std::pair<DecoderKind, FusionStrategy>> pipes = {
      {DecoderKind::Lstm, FusionStrategy::TransFuser},        {DecoderKind::Transformer, FusionStrategy::TransFuser},
      {DecoderKind::Transformer, FusionStrategy::CoAttention}, {DecoderKind::Lstm, FusionStrategy::Contextual},
      {DecoderKind::Transformer, FusionStrategy::Mul},
  };
  for (auto [dec, fusion] : pipes) {
    HyperConfig cfg = micro(dec, fusion);
    CaptionModel model = CaptionModel::from_records(cfg, recs);
    Rng jitter(5);
    for (auto& [name, p] : model.params())
      if (name.ends_with(".b") || name.ends_with(".beta")) p = random_tensor(p.shape(), jitter, -0.2, 0.2);
    Example ex = model.prepare(recs[1]);
    std::string tag = std::string(to_string(dec)) + "/" + std::string(to_string(fusion));
    // Two estimates per tensor. Some gradients are ~1e-8 next to a summed NLL
    // of ~30 and drown in rounding at small steps; the five-point stencil at
    // h = 1e-3 handles those. Wide steps can straddle a relu kink (64 patch
    // rows share fuse.q.b), which h = 1e-4 avoids. A wrong gradient fails both.
    auto loss = [&](Binder& b) { return model.caption_loss(b, ex, Mode::Eval).nll; };
    auto wide = check_params(loss, model.params(), 1e-3, 0, {}, true);
    auto narrow = check_params(loss, model.params(), 1e-4, 0);
    for (const auto& [name, err] : wide.errors) {
      double best = std::min(err, narrow.errors.at(name));
      worst_model = std::max(worst_model, best);
      ++tensors;
      c.expect(best <= kTol, tag + " " + name + " rel err " + fmt(best));
    }
    if (dec == DecoderKind::Transformer && fusion == FusionStrategy::TransFuser) {
      // the heads read detached image features, so only head.* is theirs
      auto heads = check_params(
          [&](Binder& b) { return add(model.keyword_predictor_loss(b, ex), model.classifier_loss(b, ex)); },
          model.params(), 1e-5, 0, [](const std::string& name) { return name.starts_with("head."); });
      worst_model = std::max(worst_model, heads.worst);
      c.expect(heads.worst <= kTol, "heads worst " + heads.worst_name + " " + fmt(heads.worst));
    }
  }
  double secs = seconds_since(t0);
  c.expect(secs < 60.0, "took " + fmt(secs) + " s");
  c.note(std::to_string(cases.size()) + " ops worst " + fmt(worst_op, 2) + ", " + std::to_string(pipes.size()) +
         " pipelines (" + std::to_string(tensors) + " tensors) worst " + fmt(worst_model, 2) + ", " + fmt(secs, 3) +
         " s");
  return c.passed();
}

// --- 2 -----------------------------------------------------------------------

// Rows with at least one unmasked entry sum to one; masked entries are zero.
void check_rows(Checks& c, const Tensor& w, const std::function<bool(std::size_t, std::size_t)>& allowed,
                const std::string& what, double& worst) {
  for (std::size_t i = 0; i < w.rows(); ++i) {
    long double s = 0;
    for (std::size_t j = 0; j < w.cols(); ++j) {
      s += w.at(i, j);
      if (!allowed(i, j)) c.expect(w.at(i, j) == 0.0, what + " masked entry (" + std::to_string(i) + "," +
                                                           std::to_string(j) + ") = " + fmt(w.at(i, j)));
    }
    double dev = std::fabs(static_cast<double>(s) - 1.0);
    worst = std::max(worst, dev);
    c.expect(dev <= 1e-9, what + " row " + std::to_string(i) + " sums to 1 + " + fmt(dev));
  }
}

double max_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

bool attention_invariants(const fs::path&, Checks& c) {
  Rng rng(2);
  double worst_sum = 0, worst_perm = 0;
  auto any = [](std::size_t, std::size_t) { return true; };
  auto lower = [](std::size_t i, std::size_t j) { return j <= i; };

  for (int trial = 0; trial < 10; ++trial) {
    std::size_t nq = 1 + rng.below(5), nk = 2 + rng.below(6);
    std::vector<char> flags(nk);
    for (auto& f : flags) f = rng.uniform() < 0.6;
    flags[rng.below(nk)] = 1;
    bool valid[16];
    for (std::size_t j = 0; j < nk; ++j) valid[j] = flags[j];
    Tensor mask = key_padding_mask(nq, std::span<const bool>(valid, nk));
    Tape t;
    auto a = scaled_dot_attention(t.constant(random_tensor({nq, 4}, rng, -3, 3)),
                                  t.constant(random_tensor({nk, 4}, rng, -3, 3)), t.constant(random_tensor({nk, 3}, rng)),
                                  &mask, 4.0);
    check_rows(c, a.weights, [&](std::size_t, std::size_t j) { return valid[j]; }, "padded attention", worst_sum);
    Tensor cm = causal_mask(nk, nk);
    Var x = t.constant(random_tensor({nk, 6}, rng, -3, 3));
    auto m = multi_head_attention(x, x, x, 3, &cm);
    check_rows(c, m.weights, lower, "causal multi-head", worst_sum);
  }

  // Keyword encoder self-attention and the transformer decoder.
  auto recs = records(21, 12);
  HyperConfig cfg = micro(DecoderKind::Transformer, FusionStrategy::Contextual);
  cfg.keyword_encoder_blocks = 2;
  cfg.transformer_blocks = 2;
  CaptionModel model = CaptionModel::from_records(cfg, recs);
  for (const auto& r : recs) {
    Example ex = model.prepare(r);
    Tape t;
    Binder b(t, model.params(), false);
    KeywordEncoderConfig kc{cfg.embed_dim, cfg.fusion_hidden, cfg.fusion_ffn, cfg.keyword_encoder_blocks};
    auto enc = contextual_keyword_encode(b, "kwenc", kc, b("embed.tokens"), ex.keyword_ids);
    for (const auto& w : enc.attention) check_rows(c, w, lower, "keyword encoder", worst_sum);
  }

  TransformerConfig tc = model.transformer_config();
  for (int trial = 0; trial < 5; ++trial) {
    Example ex = model.prepare(recs[static_cast<std::size_t>(trial)]);
    auto ids = ex.description.valid();
    std::vector<TokenId> tokens(ids.begin(), ids.end() - 1);
    Tape t;
    Binder b(t, model.params(), false);
    auto ctx = model.encode(b, ex);
    Tensor memory = ctx.memory.value();
    auto run = [&](const std::vector<TokenId>& toks) {
      Tape tt;
      Binder bb(tt, model.params(), false);
      auto out = transformer_forward(bb, "dec", tc, bb("embed.tokens"), toks, tt.constant(memory));
      return std::make_tuple(Tensor(out.logits.value()), out.self_attention, out.cross_attention);
    };
    auto [logits, self, cross] = run(tokens);
    for (const auto& w : self) check_rows(c, w, lower, "decoder self-attention", worst_sum);
    for (const auto& w : cross) check_rows(c, w, any, "decoder cross-attention", worst_sum);
    // Changing any later token leaves every earlier row bitwise unchanged.
    for (std::size_t j = 1; j < tokens.size(); ++j) {
      auto changed = tokens;
      for (std::size_t r = j; r < changed.size(); ++r)
        changed[r] = static_cast<TokenId>(5 + rng.below(model.vocab().size() - 5));
      auto [l2, s2, c2] = run(changed);
      bool same = true;
      for (std::size_t i = 0; i < j; ++i)
        for (std::size_t v = 0; v < logits.cols(); ++v) same = same && l2.at(i, v) == logits.at(i, v);
      c.expect(same, "decoder causality broken at position " + std::to_string(j));
    }
  }

  // Fusion blocks: padded keywords get zero weight, order does not matter.
  for (FusionStrategy s : {FusionStrategy::TransFuser, FusionStrategy::CoAttention}) {
    ParamStore store;
    FusionConfig fc{6, 5, 7, 9};
    if (s == FusionStrategy::TransFuser)
      init_transfuser(store, "fuse", fc, rng);
    else
      init_coattention(store, "fuse", fc, rng);
    for (auto& [name, p] : store)
      if (name.ends_with(".b") || name.ends_with(".beta")) p = random_tensor(p.shape(), rng, -0.3, 0.3);
    for (int trial = 0; trial < 10; ++trial) {
      std::size_t nk = 2 + rng.below(5), rows = s == FusionStrategy::TransFuser ? 1 : 64;
      Tensor img = random_tensor({rows, 6}, rng), kw = random_tensor({nk, 5}, rng);
      bool valid[8];
      for (std::size_t j = 0; j < nk; ++j) valid[j] = j + 1 < nk || trial % 2 == 0;  // odd trials end with PAD
      std::vector<std::size_t> perm(nk);
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(std::span<std::size_t>(perm));
      Tensor kw_p({nk, 5});
      bool valid_p[8];
      for (std::size_t j = 0; j < nk; ++j) {
        for (std::size_t d = 0; d < 5; ++d) kw_p.at(j, d) = kw.at(perm[j], d);
        valid_p[j] = valid[perm[j]];
      }
      auto fuse = [&](const Tensor& k, const bool* v) {
        Tape t;
        Binder b(t, store, false);
        auto out = s == FusionStrategy::TransFuser
                       ? transfuse(b, "fuse", t.constant(img), t.constant(k), std::span<const bool>(v, nk))
                       : coattend_patches(b, "fuse", t.constant(img), t.constant(k), std::span<const bool>(v, nk));
        return std::make_pair(Tensor(out.k_final.value()), out.attention);
      };
      auto [base, att] = fuse(kw, valid);
      auto [moved, att_p] = fuse(kw_p, valid_p);
      std::string name(to_string(s));
      check_rows(c, att, [&](std::size_t, std::size_t j) { return valid[j]; }, name, worst_sum);
      double d = max_diff(base, moved);
      worst_perm = std::max(worst_perm, d);
      c.expect(d <= 1e-9, name + " permutation changed k_final by " + fmt(d));
    }
  }
  c.note("worst row-sum deviation " + fmt(worst_sum, 2) + ", worst permutation difference " + fmt(worst_perm, 2));
  return c.passed();
}

// --- 3 -----------------------------------------------------------------------

Sentence words(const std::string& s) {
  std::istringstream in(s);
  Sentence out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

bool metric_oracles(const fs::path&, Checks& c) {
  static const char* vocab[] = {"the", "a", "cat", "dog", "sat", "on", "mat", "red"};
  double worst = 0;
  auto close = [&](double got, long double want, const std::string& what) {
    double d = std::fabs(got - static_cast<double>(want));
    worst = std::max(worst, d);
    c.expect(d <= 1e-9, what + " off by " + fmt(d));
  };
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    Rng rng(seed);
    auto sentence = [&](std::size_t lo, std::size_t hi) {
      Sentence s;
      for (std::size_t i = 0, n = lo + rng.below(hi - lo + 1); i < n; ++i) s.push_back(vocab[rng.below(8)]);
      return s;
    };
    std::vector<Sentence> cands, refs;
    std::vector<std::vector<Sentence>> sets;
    for (int i = 0; i < 20; ++i) {
      Sentence ref = sentence(3, 9), cand;
      for (const auto& w : ref) {
        double u = rng.uniform();
        if (u < 0.15) continue;
        cand.push_back(u < 0.3 ? vocab[rng.below(8)] : w);
      }
      if (cand.empty()) cand.push_back("the");
      cands.push_back(cand);
      refs.push_back(ref);
      sets.push_back({ref});
    }
    std::string tag = "seed " + std::to_string(seed) + " ";
    for (int n = 1; n <= 4; ++n) close(bleu(cands, refs, n), oracle::bleu(cands, sets, n), tag + "BLEU-" + std::to_string(n));
    auto want_cider = oracle::cider(cands, sets);
    long double mean = 0;
    for (auto v : want_cider) mean += v;
    close(corpus_cider(cands, sets), mean / 20, tag + "CIDEr");
    for (std::size_t i = 0; i < 20; ++i) {
      close(rouge_l(cands[i], refs[i]), oracle::rouge_l(cands[i], refs[i]), tag + "ROUGE-L " + std::to_string(i));
      close(meteor(cands[i], refs[i]), oracle::meteor(cands[i], refs[i]), tag + "METEOR " + std::to_string(i));
    }
    // the same with two references per candidate
    std::vector<std::vector<Sentence>> two;
    for (std::size_t i = 0; i < 20; ++i) two.push_back({refs[i], refs[(i + 1) % 20]});
    for (int n = 1; n <= 4; ++n) close(bleu(cands, two, n), oracle::bleu(cands, two, n), tag + "multi-ref BLEU");
    auto want_two = oracle::cider(cands, two);
    long double mean_two = 0;
    for (auto v : want_two) mean_two += v;
    close(corpus_cider(cands, two), mean_two / 20, tag + "multi-ref CIDEr");
  }

  // worked examples
  std::vector<Sentence> bc{words("the cat sat")}, br{words("the cat sat down")};
  close(bleu(bc, br, 1), std::exp(1.0L - 4.0L / 3.0L), "brevity example");
  c.expect(std::fabs(bleu(bc, br, 1) - 0.716531) < 5e-7, "brevity example 0.716531");
  std::vector<Sentence> same{words("a b c d e")};
  for (int n = 1; n <= 4; ++n) close(bleu(same, same, n), 1.0L, "identical BLEU");
  std::vector<Sentence> clip{words("the the the")}, clip_ref{words("the cat")};
  close(bleu(clip, clip_ref, 1), 1.0L / 3, "clipped unigram");
  close(rouge_l(words("a b c d"), words("a c d")), 6.0L / 7, "ROUGE-L 6/7");
  close(meteor(words("a b"), words("a b")), 0.9375L, "METEOR identical pair");
  close(meteor(words("a c b"), words("a b c")), 0.5L, "METEOR three chunks");
  std::vector<std::vector<Sentence>> self{{words("a red cat sat on")},
                                          {words("the dog ran far away")},
                                          {words("one two three four five")},
                                          {words("six seven eight nine ten")}};
  CiderStats stats(self);
  close(cider(self[0][0], self[0], stats), 1.0L, "CIDEr self match");
  std::vector<std::vector<Sentence>> idf_sets{{words("a b")}, {words("a c")}, {words("d e")}};
  CiderStats idf(idf_sets, 2);
  close(idf.idf("d"), std::log(1.5L), "CIDEr idf");
  c.note("worst |delta| " + fmt(worst, 2));
  return c.passed();
}

// --- 4 -----------------------------------------------------------------------

class FnModel : public StepModel {
 public:
  using Fn = std::function<std::vector<double>(const std::vector<TokenId>&)>;
  explicit FnModel(Fn fn) : fn_(std::move(fn)) {}
  Step advance(const State&, std::span<const TokenId> prefix) override {
    return Step{fn_(std::vector<TokenId>(prefix.begin() + 1, prefix.end())), nullptr};
  }

 private:
  Fn fn_;
};

std::vector<double> log_normalised(std::vector<double> p) {
  double z = std::accumulate(p.begin(), p.end(), 0.0);
  std::vector<double> out;
  for (double x : p) out.push_back(x > 0 ? std::log(x / z) : -std::numeric_limits<double>::infinity());
  return out;
}

FnModel::Fn seeded_model(std::uint64_t seed, std::size_t vocab) {
  return [seed, vocab](const std::vector<TokenId>& body) {
    std::uint64_t h = splitmix64(seed);
    for (TokenId t : body) h = splitmix64(h ^ static_cast<std::uint64_t>(t + 17));
    Rng rng(h);
    std::vector<double> p(vocab);
    for (double& x : p) x = std::exp(rng.uniform(-3, 3));
    p[special::kStart] = 0;
    if (vocab > 4) p[special::kPad] = 0;
    return log_normalised(p);
  };
}

bool search_correctness(const fs::path&, Checks& c) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    FnModel m(seeded_model(seed, 9));
    auto g = greedy_decode(m, 12), b = beam_decode(m, 1, 12);
    c.expect(g.tokens == b.tokens && g.log_prob == b.log_prob && g.finished == b.finished,
             "k=1 differs from greedy, seed " + std::to_string(seed));
  }
  // Three live symbols (ids 0, 1 and END); START is never emitted.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto fn = seeded_model(seed + 1000, 4);
    std::pair<std::vector<TokenId>, double> best{{}, kNegInf};
    std::function<void(std::vector<TokenId>&, double)> walk = [&](std::vector<TokenId>& body, double lp) {
      if (body.size() == 3) return;
      auto lps = fn(body);
      for (TokenId t = 0; t < 4; ++t) {
        if (lps[static_cast<std::size_t>(t)] == kNegInf) continue;
        body.push_back(t);
        double total = lp + lps[static_cast<std::size_t>(t)];
        if (t == special::kEnd) {
          if (total > best.second || (total == best.second && body < best.first)) best = {body, total};
        } else {
          walk(body, total);
        }
        body.pop_back();
      }
    };
    std::vector<TokenId> body;
    walk(body, 0.0);
    FnModel m(fn);
    auto r = beam_decode(m, 27, 3);
    c.expect(r.tokens == best.first && r.log_prob == best.second,
             "k=27 misses the exhaustive argmax, seed " + std::to_string(seed));
  }
  // Greedy takes A, A, END; a width-2 beam keeps B and finds B, B, END.
  constexpr TokenId kA = 1, kB = 4;
  auto over = [](double a, double b, double e) {
    std::vector<double> p(6, 0.0);
    p[kA] = a;
    p[kB] = b;
    p[special::kEnd] = e;
    return log_normalised(p);
  };
  FnModel::Fn fn = [&](const std::vector<TokenId>& body) {
    using V = std::vector<TokenId>;
    if (body.empty()) return over(0.50, 0.45, 0.05);
    if (body == V{kA}) return over(0.41, 0.39, 0.20);
    if (body == V{kB}) return over(0.05, 0.90, 0.05);
    if (body == V{kA, kA}) return over(0.260, 0.251, 0.489);
    if (body == V{kB, kB}) return over(0.316, 0.315, 0.369);
    return over(0.35, 0.35, 0.30);
  };
  FnModel m(fn);
  auto g = greedy_decode(m, 3), b = beam_decode(m, 2, 3);
  c.expect(g.tokens == std::vector<TokenId>{kA, kA, special::kEnd}, "greedy path of the counterexample");
  c.expect(b.tokens == std::vector<TokenId>{kB, kB, special::kEnd}, "beam path of the counterexample");
  c.expect(b.log_prob > g.log_prob, "k=2 does not beat greedy");
  c.note("counterexample greedy " + fmt(g.log_prob) + " vs k=2 " + fmt(b.log_prob));
  return c.passed();
}

// --- 5 -----------------------------------------------------------------------

bool overfit(const fs::path&, Checks& c) {
  auto t0 = Clock::now();
  auto recs = records(7, 32);
  HyperConfig cfg = HyperConfig::preset("desk");
  cfg.fusion = FusionStrategy::TransFuser;
  cfg.decoder = DecoderKind::Transformer;
  cfg.lr = 1e-3;
  cfg.batch = 8;
  cfg.max_steps = 500;
  cfg.epochs = 1000;  // the step cap ends training
  cfg.min_count = 1;
  CaptionModel model = CaptionModel::from_records(cfg, recs);
  std::vector<Example> ex;
  for (const auto& r : recs) ex.push_back(model.prepare(r));
  TrainResult res = train_captioner(model, ex);
  double ce = evaluate_loss(model, ex);
  std::size_t exact = 0;
  for (const auto& e : ex) exact += model.caption(model.generate(e, 1)) == decode(e.description.valid(), model.vocab());
  double secs = seconds_since(t0);
  c.expect(res.steps <= 500, "steps " + std::to_string(res.steps));
  c.expect(ce < 0.1, "per-token cross-entropy " + fmt(ce));
  c.expect(exact * 10 >= ex.size() * 9, "exact greedy reproductions " + std::to_string(exact) + "/32");
  c.expect(secs < 300, "took " + fmt(secs) + " s");
  c.note(std::to_string(res.steps) + " steps, CE " + fmt(ce) + ", exact " + std::to_string(exact) + "/32, " +
         fmt(secs, 3) + " s");
  return c.passed();
}

// --- 6 -----------------------------------------------------------------------

// ablation.csv rows keyed by "fusion,modality,decoder,beam".
std::map<std::string, double> read_bleu_avg(const fs::path& csv) {
  std::ifstream in(csv);
  std::map<std::string, double> out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) cols.push_back(x);
    if (cols.size() < 9) continue;
    out[cols[0] + "," + cols[1] + "," + cols[2] + "," + cols[3]] = std::stod(cols[8]);
  }
  return out;
}

bool ablation(const fs::path& work, Checks& c) {
  auto t0 = Clock::now();
  // The fusion and input comparisons are made on the hybrid LSTM decoder,
  // the decoder TransFuser feeds.
  const std::string decoder = "lstm";
  const std::vector<std::string> train_sets = {"--preset", "desk", "--set", "epochs=5", "--set", "batch=16",
                                               "--decoders", decoder};
  struct Gaps {
    double vs_image = 0, vs_keywords = 0, vs_sum = 0, vs_mul = 0, beam = 0;
  };
  std::vector<Gaps> per_seed;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    fs::path dir = work / ("ablation_seed" + std::to_string(seed));
    std::string s = std::to_string(seed);
    if (run_cli({"synth-data", "--seed", s, "--n", "2000", "--out", (dir / "data").string()}) != cli::kOk) {
      c.expect(false, "synth-data failed for seed " + s);
      return false;
    }
    auto ablate = [&](const std::string& fusions, const std::string& modalities, const std::string& beams,
                      const std::string& name) {
      std::vector<std::string> args{"ablate", "--data", (dir / "data" / "data.jsonl").string(), "--splits",
                                    (dir / "data" / "splits.txt").string()};
      args.insert(args.end(), train_sets.begin(), train_sets.end());
      args.insert(args.end(), {"--set", "seed=" + s, "--fusions", fusions, "--modalities", modalities, "--beams", beams,
                               "--out", (dir / name).string()});
      if (run_cli(args) != cli::kOk) throw DataError("ablate " + name + " failed for seed " + s);
      return read_bleu_avg(dir / name / "ablation.csv");
    };
    auto inputs = ablate("transfuser", "image+keywords,image,keywords", "1,3", "inputs");
    auto fusion = ablate("sum,mul", "image+keywords", "1", "fusion");
    inputs.insert(fusion.begin(), fusion.end());
    auto at = [&](const std::string& cell, const char* beam = "1") {
      auto it = inputs.find(cell + "," + decoder + "," + beam);
      if (it == inputs.end()) throw DataError("ablation.csv has no row for " + cell);
      return it->second;
    };
    double full = at("transfuser,image+keywords");
    Gaps g;
    g.vs_image = full - at("transfuser,image");
    g.vs_keywords = full - at("transfuser,keywords");
    g.vs_sum = full - at("sum,image+keywords");
    g.vs_mul = full - at("mul,image+keywords");
    g.beam = at("transfuser,image+keywords", "3") - full;
    per_seed.push_back(g);
    std::cout << "  seed " << seed << ": image+keywords " << fmt(full) << ", gaps image " << fmt(g.vs_image)
              << ", keywords " << fmt(g.vs_keywords) << ", sum " << fmt(g.vs_sum) << ", mul " << fmt(g.vs_mul)
              << ", beam " << fmt(g.beam) << " (" << fmt(seconds_since(t0), 3) << " s)" << std::endl;
  }
  Gaps mean;
  for (const auto& g : per_seed) {
    mean.vs_image += g.vs_image / 3;
    mean.vs_keywords += g.vs_keywords / 3;
    mean.vs_sum += g.vs_sum / 3;
    mean.vs_mul += g.vs_mul / 3;
    mean.beam += g.beam / 3;
  }
  // A gap holds when its mean over the seeds is at least 0.01 and no seed
  // reverses its direction.
  auto gap = [&](double Gaps::*field, const std::string& name) {
    bool direction = true;
    for (const auto& g : per_seed) direction = direction && g.*field > 0;
    c.expect(mean.*field >= 0.01 && direction, name + " mean gap " + fmt(mean.*field) +
                                                   (direction ? "" : ", reversed on some seed"));
  };
  gap(&Gaps::vs_image, "(a) image+keywords over image-only");
  gap(&Gaps::vs_keywords, "(a) image+keywords over keywords-only");
  gap(&Gaps::vs_sum, "(b) transfuser over sum");
  gap(&Gaps::vs_mul, "(b) transfuser over mul");
  gap(&Gaps::beam, "(c) beam 3 over beam 1");
  double secs = seconds_since(t0);
  c.expect(secs < 1800, "took " + fmt(secs) + " s");
  c.note("mean gaps image " + fmt(mean.vs_image) + ", keywords " + fmt(mean.vs_keywords) + ", sum " +
         fmt(mean.vs_sum) + ", mul " + fmt(mean.vs_mul) + ", beam " + fmt(mean.beam) + "; " + fmt(secs, 4) + " s");
  return c.passed();
}

// --- 7 -----------------------------------------------------------------------

std::map<std::string, std::string> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  std::map<std::string, std::string> kv;
  for (std::string line; std::getline(in, line);) {
    auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

bool prec_at_k_check(const fs::path& work, Checks& c) {
  // hand table: gold ranks 3, 1 and 2
  std::vector<std::vector<std::size_t>> table{{1, 0, 2}, {0, 2, 1}, {2, 1, 0}};
  std::vector<std::size_t> gold{2, 0, 1};
  for (std::size_t k = 1; k <= 3; ++k) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < 3; ++i)
      hits += std::find(table[i].begin(), table[i].begin() + static_cast<long>(k), gold[i]) !=
              table[i].begin() + static_cast<long>(k);
    c.expect(prec_at_k(table, gold, k) == static_cast<double>(hits) / 3.0, "hand table k=" + std::to_string(k));
  }
  c.expect(prec_at_k(table, gold, 1) == 1.0 / 3.0 && prec_at_k(table, gold, 3) == 1.0, "hand table values");

  // Trained disease classifiers, evaluated on every split.
  std::size_t evaluations = 0;
  for (std::uint64_t seed : {1u, 2u}) {
    auto recs = records(seed + 40, 150);
    auto sp = split_indices(recs.size(), SplitSpec{}, seed);
    std::vector<Record> train;
    for (auto i : sp.train) train.push_back(recs[i]);
    HyperConfig cfg = micro(DecoderKind::Transformer, FusionStrategy::TransFuser);
    cfg.image_dim = 16;
    cfg.predictor_hidden = 16;
    cfg.predictor_epochs = 5;
    cfg.predictor_lr = 1e-2;
    cfg.seed = seed;
    CaptionModel model = CaptionModel::from_records(cfg, train);
    std::vector<Example> ex;
    for (const auto& r : train) ex.push_back(model.prepare(r));
    train_heads(model, ex);
    for (const auto* part : {&sp.train, &sp.val, &sp.test}) {
      std::vector<std::vector<std::size_t>> ranks;
      std::vector<std::size_t> golds;
      for (auto i : *part) {
        std::vector<std::size_t> ids;
        for (const auto& rc : model.classify(model.prepare(recs[i]))) ids.push_back(rc.id);
        ranks.push_back(ids);
        golds.push_back(static_cast<std::size_t>(recs[i].disease));
      }
      double p1 = prec_at_k(ranks, golds, 1), p5 = prec_at_k(ranks, golds, 5);
      c.expect(p1 <= p5, "Prec@1 " + fmt(p1) + " > Prec@5 " + fmt(p5));
      ++evaluations;
    }
  }

  // The same through generate and evaluate.
  fs::path dir = work / "prec";
  bool ok = run_cli({"synth-data", "--seed", "9", "--n", "60", "--out", (dir / "data").string()}) == cli::kOk &&
            run_cli({"train", "--data", (dir / "data" / "data.jsonl").string(), "--splits",
                     (dir / "data" / "splits.txt").string(), "--set", "max_steps=5", "--set", "predictor_epochs=3",
                     "--set", "embed_dim=16", "--set", "transformer_hidden=16", "--set", "transformer_ffn=32",
                     "--set", "min_count=1", "--out", (dir / "model").string()}) == cli::kOk;
  c.expect(ok, "CLI training for Prec@k");
  for (std::string subset : {"train", "val", "test"}) {
    if (!ok) break;
    fs::path g = dir / ("gen_" + subset), e = dir / ("eval_" + subset);
    bool run = run_cli({"generate", "--ckpt", (dir / "model" / "model.kwck").string(), "--data",
                        (dir / "data" / "data.jsonl").string(), "--splits", (dir / "data" / "splits.txt").string(),
                        "--subset", subset, "--out", g.string()}) == cli::kOk &&
               run_cli({"evaluate", "--cand", (g / "captions.txt").string(), "--ref", (g / "references.txt").string(),
                        "--classes", (g / "classes.txt").string(), "--out", e.string()}) == cli::kOk;
    c.expect(run, "generate/evaluate on " + subset);
    if (!run) continue;
    auto kv = read_metrics(e / "metrics.txt");
    bool present = kv.count("prec_at_1") && kv.count("prec_at_5");
    c.expect(present, "metrics.txt lacks Prec@k for " + subset);
    if (present) c.expect(std::stod(kv["prec_at_1"]) <= std::stod(kv["prec_at_5"]), "CLI Prec@1 > Prec@5 on " + subset);
    ++evaluations;
  }
  c.note(std::to_string(evaluations) + " evaluations");
  return c.passed();
}

// --- 8 -----------------------------------------------------------------------

// Hashes every file named in a manifest's outputs, relative to `dir`.
bool outputs_match(const fs::path& manifest, const fs::path& dir, std::string& why) {
  json m = json::parse(std::ifstream(manifest));
  for (const auto& [rel, hash] : m.at("outputs").items()) {
    fs::path p = dir / rel;
    if (!fs::exists(p)) {
      why = rel + " missing";
      return false;
    }
    if (cli::sha256_file(p) != hash.get<std::string>()) {
      why = rel + " differs";
      return false;
    }
  }
  return true;
}

bool reproducibility(const fs::path& work, Checks& c) {
  fs::path dir = work / "repro";
  fs::remove_all(dir);
  std::string data = (dir / "data" / "data.jsonl").string(), splits = (dir / "data" / "splits.txt").string();
  std::vector<std::string> small{"--set", "embed_dim=12", "--set", "image_dim=8", "--set", "fusion_hidden=8",
                                 "--set", "fusion_ffn=16", "--set", "lstm_hidden=8", "--set", "transformer_hidden=8",
                                 "--set", "heads=2", "--set", "transformer_ffn=16", "--set", "max_steps=15",
                                 "--set", "predictor_epochs=2", "--set", "min_count=1"};
  auto with = [](std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  std::vector<std::pair<std::string, std::vector<std::string>>> commands = {
      {"data", {"synth-data", "--seed", "4", "--n", "40", "--out", (dir / "data").string()}},
      {"coatt", with({"train", "--preset", "coattention", "--data", data, "--splits", splits, "--set",
                      "dropout=0.1", "--out", (dir / "coatt").string()},
                     small)},
      {"lstm", with({"train", "--preset", "lstm", "--data", data, "--splits", splits, "--out",
                     (dir / "lstm").string()},
                    small)},
      {"gen", {"generate", "--ckpt", (dir / "coatt" / "model.kwck").string(), "--data", data, "--splits", splits,
               "--beam", "3", "--keywords", "predicted", "--report", "--attention", "--out", (dir / "gen").string()}},
      {"gen_lstm", {"generate", "--ckpt", (dir / "lstm" / "model.kwck").string(), "--data", data, "--splits", splits,
                    "--report", "--out", (dir / "gen_lstm").string()}},
      {"eval", {"evaluate", "--cand", (dir / "gen" / "captions.txt").string(), "--ref",
                (dir / "gen" / "references.txt").string(), "--classes", (dir / "gen" / "classes.txt").string(),
                "--out", (dir / "eval").string()}},
      {"export", {"export-attention", "--ckpt", (dir / "coatt" / "model.kwck").string(), "--data", data, "--record",
                  "3", "--beam", "2", "--out", (dir / "export").string()}},
      {"ablate", with({"ablate", "--data", data, "--splits", splits, "--fusions", "transfuser,sum", "--modalities",
                       "image+keywords,keywords", "--beams", "1,2", "--out", (dir / "ablate").string()},
                      small)},
  };
  for (const auto& [name, args] : commands) {
    if (run_cli(args) != cli::kOk) {
      c.expect(false, name + " failed");
      return false;
    }
  }
  for (const auto& [name, args] : commands) {
    fs::path manifest = dir / name / "manifest.json", again = dir / "rerun" / name;
    std::string out;
    int code = run_cli({"rerun", "--manifest", manifest.string(), "--out", again.string()}, &out);
    c.expect(code == cli::kOk && out.find("reproduced") != std::string::npos, name + " rerun exit " +
                                                                                  std::to_string(code));
    std::string why;
    c.expect(outputs_match(manifest, again, why), name + " rerun output " + why);
  }

  // Checkpoint round trip, both decoders.
  std::size_t compared = 0;
  for (const char* m : {"coatt", "lstm"}) {
    fs::path ck = dir / m / "model.kwck";
    Checkpoint loaded = load_checkpoint(ck);
    std::size_t step = loaded.step;
    CaptionModel a = model_from_checkpoint(std::move(loaded));
    fs::path copy = dir / (std::string(m) + "_copy.kwck");
    save_checkpoint(copy, a, step);
    c.expect(cli::sha256_file(copy) == cli::sha256_file(ck), std::string(m) + " re-saved checkpoint differs");
    CaptionModel b = model_from_checkpoint(load_checkpoint(copy));
    for (const auto& r : load_jsonl(data)) {
      Example ea = a.prepare(r), eb = b.prepare(r);
      Tape ta, tb;
      Binder ba(ta, a.params(), false), bb(tb, b.params(), false);
      c.expect(a.caption_loss(ba, ea, Mode::Eval).nll.value() == b.caption_loss(bb, eb, Mode::Eval).nll.value(),
               std::string(m) + " loss differs");
      auto ga = a.generate(ea, 2), gb = b.generate(eb, 2);
      c.expect(ga.tokens == gb.tokens && ga.log_prob == gb.log_prob, std::string(m) + " generation differs");
      auto ca = a.classify(ea), cb = b.classify(eb);
      bool same = ca.size() == cb.size();
      for (std::size_t i = 0; same && i < ca.size(); ++i) same = ca[i].id == cb[i].id && ca[i].score == cb[i].score;
      c.expect(same, std::string(m) + " classifier differs");
      c.expect(a.predict_keywords(ea) == b.predict_keywords(eb), std::string(m) + " keyword predictor differs");
      ++compared;
    }
  }
  c.note(std::to_string(commands.size()) + " commands re-run, " + std::to_string(compared) +
         " records compared after checkpoint round trips");
  return c.passed();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kwcap acceptance run"};
  std::string workdir = (fs::temp_directory_path() / "kwcap_acceptance").string();
  std::vector<int> only;
  app.add_option("--workdir", workdir, "Scratch directory for datasets and runs")->capture_default_str();
  app.add_option("--only", only, "Run just these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(workdir);

  struct Criterion {
    int id;
    const char* name;
    std::function<bool(const fs::path&, Checks&)> run;
  };
  std::vector<Criterion> all = {
      {1, "gradient integrity", gradient_integrity},   {2, "attention invariants", attention_invariants},
      {3, "metric oracle equivalence", metric_oracles}, {4, "search correctness", search_correctness},
      {5, "overfit", overfit},                           {6, "directional ablation", ablation},
      {7, "Prec@k", prec_at_k_check},                   {8, "reproducibility", reproducibility},
  };
  int failed = 0;
  for (const auto& cr : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), cr.id) == only.end()) continue;
    Checks c;
    bool ok = false;
    auto t0 = Clock::now();
    try {
      ok = cr.run(workdir, c);
    } catch (const std::exception& e) {
      c.expect(false, std::string("exception: ") + e.what());
    }
    ok = ok && c.passed();
    failed += !ok;
    std::cout << "criterion " << cr.id << " " << (ok ? "PASS" : "FAIL") << " " << cr.name << " (" << c.summary()
              << ") [" << fmt(seconds_since(t0), 3) << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
