#include "kwcap/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "kwcap/errors.hpp"

namespace kwcap {

namespace {

// std::vector<bool> has no contiguous storage, so spans go through this.
struct Flags {
  std::unique_ptr<bool[]> data;
  std::size_t n;
  explicit Flags(std::size_t size, bool value = true) : data(new bool[size == 0 ? 1 : size]), n(size) {
    std::fill(data.get(), data.get() + n, value);
  }
  std::span<const bool> span() const { return {data.get(), n}; }
};

class TransformerSteps : public StepModel {
 public:
  TransformerSteps(const CaptionModel& model, Tensor memory) : model_(model), memory_(std::move(memory)) {}

  Step advance(const State& state, std::span<const TokenId> prefix) override {
    Tape tape;
    Binder bind(tape, model_.params(), false);
    const auto* cache = static_cast<const TransformerCache*>(state.get());
    std::size_t done = cache ? cache->length : 0;
    if (prefix.size() <= done) throw ContractError("decoder step: prefix did not grow");
    TransformerOutput out = transformer_forward(bind, "dec", model_.transformer_config(), bind("embed.tokens"),
                                                prefix.subspan(done), tape.constant(memory_), Mode::Eval, nullptr,
                                                cache);
    const Tensor& logits = out.logits.value();
    Step s;
    s.log_probs = log_softmax(logits.row(logits.rows() - 1));
    s.state = std::make_shared<const TransformerCache>(std::move(out.cache));
    return s;
  }

 private:
  const CaptionModel& model_;
  Tensor memory_;
};

class LstmSteps : public StepModel {
 public:
  LstmSteps(const CaptionModel& model, LstmDecodeContext ctx) : model_(model), ctx_(std::move(ctx)) {}

  Step advance(const State& state, std::span<const TokenId> prefix) override {
    Tape tape;
    Binder bind(tape, model_.params(), false);
    LstmInferenceState s;
    if (state) s = *static_cast<const LstmInferenceState*>(state.get());
    Tensor logits =
        lstm_infer_step(bind, "dec", model_.lstm_config(), ctx_, bind("embed.tokens"), prefix.back(), s);
    return Step{log_softmax(logits.data()), std::make_shared<const LstmInferenceState>(std::move(s))};
  }

 private:
  const CaptionModel& model_;
  LstmDecodeContext ctx_;
};

}  // namespace

std::vector<double> log_softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  double lz = mx + std::log(z);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

CaptionModel::CaptionModel(HyperConfig cfg, Vocabulary vocab, std::vector<std::string> keyword_labels,
                           std::size_t classes)
    : cfg_(std::move(cfg)), vocab_(std::move(vocab)), labels_(std::move(keyword_labels)), classes_(classes) {
  cfg_.validate();
  init_params();
}

CaptionModel::CaptionModel(HyperConfig cfg, Vocabulary vocab, std::vector<std::string> keyword_labels,
                           std::size_t classes, ParamStore params)
    : CaptionModel(std::move(cfg), std::move(vocab), std::move(keyword_labels), classes) {
  if (params.names() != params_.names())
    throw DataError("checkpoint parameters do not match the configured model");
  for (auto& [name, t] : params_) {
    const Tensor& src = params.get(name);
    if (src.shape() != t.shape())
      throw DataError("checkpoint parameter '" + name + "' has shape " + shape_string(src.shape()) + ", expected " +
                      shape_string(t.shape()));
  }
  params_ = std::move(params);
}

CaptionModel CaptionModel::from_records(const HyperConfig& cfg, std::span<const Record> train) {
  if (train.empty()) throw ContractError("cannot build a model from an empty training split");
  std::vector<std::vector<std::string>> desc, kw;
  std::set<std::string> labels;
  int max_class = 0;
  for (const auto& r : train) {
    desc.push_back(preprocess(r.description));
    for (const auto& k : r.keywords) {
      kw.push_back(preprocess(k));
      labels.insert(k);
    }
    max_class = std::max(max_class, r.disease);
  }
  Vocabulary vocab = build_vocab(desc, kw, /*include_keywords=*/true, cfg.min_count);
  return CaptionModel(cfg, std::move(vocab), std::vector<std::string>(labels.begin(), labels.end()),
                      static_cast<std::size_t>(max_class) + 1);
}

std::size_t CaptionModel::context_dim() const {
  bool doubled = cfg_.fusion == FusionStrategy::Concat || cfg_.fusion == FusionStrategy::Contextual;
  return doubled ? 2 * cfg_.fusion_hidden : cfg_.fusion_hidden;
}

LstmConfig CaptionModel::lstm_config() const {
  return LstmConfig{cfg_.image_dim, cfg_.embed_dim, context_dim(), cfg_.lstm_hidden, vocab_.size(),
                    cfg_.lstm_bidirectional};
}

TransformerConfig CaptionModel::transformer_config() const {
  return TransformerConfig{cfg_.embed_dim, cfg_.transformer_hidden, cfg_.heads,  cfg_.transformer_ffn,
                           cfg_.transformer_blocks, context_dim(), vocab_.size(), cfg_.max_len,
                           cfg_.dropout};
}

void CaptionModel::init_params() {
  Rng rng(cfg_.seed);
  std::size_t p = cfg_.patch_size * cfg_.patch_size;
  params_.add("embed.tokens", embedding_init(vocab_.size(), cfg_.embed_dim, rng));
  init_linear(params_, "image", p, cfg_.image_dim, rng);
  FusionConfig fc{cfg_.image_dim, cfg_.embed_dim, cfg_.fusion_hidden, cfg_.fusion_ffn};
  switch (cfg_.fusion) {
    case FusionStrategy::TransFuser:
      init_transfuser(params_, "fuse", fc, rng);
      break;
    case FusionStrategy::CoAttention:
      init_coattention(params_, "fuse", fc, rng);
      break;
    case FusionStrategy::Sum:
    case FusionStrategy::Mul:
      init_linear(params_, "fuse.img", cfg_.image_dim, cfg_.fusion_hidden, rng);
      init_linear(params_, "fuse.kw", cfg_.max_keyword_len * cfg_.embed_dim, cfg_.fusion_hidden, rng);
      break;
    case FusionStrategy::Average:
    case FusionStrategy::Concat:
      init_linear(params_, "fuse.img", cfg_.image_dim, cfg_.fusion_hidden, rng);
      init_linear(params_, "fuse.kw", cfg_.embed_dim, cfg_.fusion_hidden, rng);
      break;
    case FusionStrategy::Contextual:
      init_linear(params_, "fuse.img", cfg_.image_dim, cfg_.fusion_hidden, rng);
      init_keyword_encoder(params_, "kwenc",
                           KeywordEncoderConfig{cfg_.embed_dim, cfg_.fusion_hidden, cfg_.fusion_ffn,
                                                cfg_.keyword_encoder_blocks},
                           rng);
      break;
  }
  if (cfg_.decoder == DecoderKind::Lstm)
    init_lstm_decoder(params_, "dec", lstm_config(), rng);
  else
    init_transformer_decoder(params_, "dec", transformer_config(), rng);
  if (!labels_.empty())
    init_keyword_predictor(params_, "head.keywords",
                           KeywordPredictorConfig{cfg_.image_dim, cfg_.predictor_hidden, labels_.size(), cfg_.tau},
                           rng);
  if (classes_ > 0) init_classifier(params_, "head.disease", cfg_.image_dim, classes_, rng);
}

Example CaptionModel::prepare(const Record& r) const {
  Example ex;
  std::size_t p = cfg_.patch_size * cfg_.patch_size;
  if (!r.features.empty()) {
    if (r.features.size() % p != 0)
      throw DataError("feature vector of length " + std::to_string(r.features.size()) +
                      " is not a whole number of " + std::to_string(p) + "-value patches");
    ex.patches = Tensor({r.features.size() / p, p}, r.features);
  } else {
    ex.patches = extract_patches(r.image, cfg_.patch_size).patches;
    for (double& v : ex.patches.data()) v = (v / 255.0 - 0.5) * cfg_.pixel_scale;
  }
  ex.description = encode_description(preprocess(r.description), vocab_, cfg_.max_len);
  ex.disease = r.disease;
  return with_keywords(std::move(ex), r.keywords);
}

Example CaptionModel::with_keywords(Example ex, std::vector<std::string> keywords) const {
  ex.keywords = std::move(keywords);
  ex.keyword_ids = encode_keywords(ex.keywords, vocab_, cfg_.max_keyword_len);
  ex.keyword_targets = Tensor::zeros({1, labels_.size()});
  for (const auto& k : ex.keywords) {
    auto it = std::lower_bound(labels_.begin(), labels_.end(), k);
    if (it != labels_.end() && *it == k) ex.keyword_targets[static_cast<std::size_t>(it - labels_.begin())] = 1.0;
  }
  return ex;
}

ImageFeatures CaptionModel::image_features(Binder& bind, const Tensor& patches) const {
  return patch_embed(bind.tape().leaf_ref(patches, false), bind("image.w"), bind("image.b"));
}

CaptionModel::Context CaptionModel::encode(Binder& bind, const Example& ex) const {
  Tape& tape = bind.tape();
  Context ctx;
  if (cfg_.modality == Modality::KeywordsOnly)
    ctx.image = patch_embed(tape.constant(Tensor::zeros(ex.patches.shape())), bind("image.w"), bind("image.b"));
  else
    ctx.image = image_features(bind, ex.patches);

  bool use_keywords = cfg_.modality != Modality::ImageOnly;
  TokenSequence kw = use_keywords ? ex.keyword_ids : pad_or_truncate({}, cfg_.max_keyword_len);
  auto ids = kw.valid();
  Var table = bind("embed.tokens");
  auto keyword_rows = [&] { return gather_rows(table, ids); };

  switch (cfg_.fusion) {
    case FusionStrategy::TransFuser: {
      Flags valid(ids.size());
      ctx.fused = transfuse(bind, "fuse", ctx.image.pooled, keyword_rows(), valid.span());
      break;
    }
    case FusionStrategy::CoAttention: {
      Flags valid(ids.size());
      ctx.fused = coattend_patches(bind, "fuse", ctx.image.features, keyword_rows(), valid.span());
      break;
    }
    case FusionStrategy::Sum:
    case FusionStrategy::Mul: {
      // Order-dependent keyword vector: the whole padded embedding sequence,
      // flattened and projected.
      Var seq = gather_rows(table, kw.ids);
      Var flat = reshape(seq, {1, kw.ids.size() * cfg_.embed_dim});
      ctx.fused = fuse_baseline(cfg_.fusion, apply_linear(bind, "fuse.img", ctx.image.pooled),
                                apply_linear(bind, "fuse.kw", flat));
      break;
    }
    case FusionStrategy::Average:
    case FusionStrategy::Concat: {
      Var mean = ids.empty() ? tape.constant(Tensor::zeros({1, cfg_.embed_dim})) : mean_rows(keyword_rows());
      ctx.fused = fuse_baseline(cfg_.fusion, apply_linear(bind, "fuse.img", ctx.image.pooled),
                                apply_linear(bind, "fuse.kw", mean));
      break;
    }
    case FusionStrategy::Contextual: {
      ContextualKeywords ck = contextual_keyword_encode(
          bind, "kwenc",
          KeywordEncoderConfig{cfg_.embed_dim, cfg_.fusion_hidden, cfg_.fusion_ffn, cfg_.keyword_encoder_blocks},
          table, kw);
      ctx.fused = fuse_baseline(FusionStrategy::Contextual, apply_linear(bind, "fuse.img", ctx.image.pooled),
                                ck.representation);
      ctx.fused.image_only = ck.all_pad;
      break;
    }
  }
  ctx.memory = ctx.fused.k_final;
  return ctx;
}

CaptionModel::CaptionLoss CaptionModel::caption_loss(Binder& bind, const Example& ex, Mode mode, Rng* rng) const {
  auto ids = ex.description.valid();
  if (ids.size() < 2) throw DataError("description encodes to fewer than two tokens");
  Context ctx = encode(bind, ex);
  Var table = bind("embed.tokens");
  std::size_t n = ids.size() - 1;
  std::vector<std::int32_t> targets(ids.begin() + 1, ids.end());
  if (cfg_.decoder == DecoderKind::Transformer) {
    TransformerOutput out =
        transformer_forward(bind, "dec", transformer_config(), table, ids.first(n), ctx.memory, mode, rng);
    return {nll_from_logits(out.logits, targets), n};
  }
  Var e_t = lstm_image_embedding(bind, "dec", ctx.image.pooled);
  Var k = ctx.memory.rows() > 1 ? mean_rows(ctx.memory) : ctx.memory;
  TeacherForced tf = lstm_teacher_forced(bind, "dec", lstm_config(), table, e_t, k, ex.description);
  Var nll = nll_from_logits(tf.logits, tf.targets);
  if (tf.backward_logits.valid()) nll = scale(add(nll, nll_from_logits(tf.backward_logits, tf.backward_targets)), 0.5);
  return {nll, n};
}

std::unique_ptr<StepModel> CaptionModel::step_model(const Example& ex) const {
  Tape tape;
  Binder bind(tape, params_, false);
  Context ctx = encode(bind, ex);
  if (cfg_.decoder == DecoderKind::Transformer)
    return std::make_unique<TransformerSteps>(*this, ctx.memory.value());
  Var e_t = lstm_image_embedding(bind, "dec", ctx.image.pooled);
  Var k = ctx.memory.rows() > 1 ? mean_rows(ctx.memory) : ctx.memory;
  return std::make_unique<LstmSteps>(*this, lstm_decode_context(bind, "dec", lstm_config(), e_t, k));
}

SearchResult CaptionModel::generate(const Example& ex, std::size_t beam, std::size_t max_len) const {
  if (max_len == 0) max_len = cfg_.max_len - 1;
  auto model = step_model(ex);
  return beam <= 1 ? greedy_decode(*model, max_len) : beam_decode(*model, beam, max_len);
}

Var CaptionModel::keyword_predictor_loss(Binder& bind, const Example& ex) const {
  Tape scratch;
  Binder sb(scratch, params_, false);
  Var pooled = bind.tape().constant(image_features(sb, ex.patches).pooled.value());
  return keyword_loss(keyword_logits(bind, "head.keywords", pooled), ex.keyword_targets);
}

std::vector<std::string> CaptionModel::predict_keywords(const Example& ex) const {
  if (labels_.empty()) return {};
  Tape tape;
  Binder bind(tape, params_, false);
  Var pooled = image_features(bind, ex.patches).pooled;
  std::vector<std::string> out;
  for (std::size_t i : select_keywords(keyword_logits(bind, "head.keywords", pooled).value().data(), cfg_.tau))
    out.push_back(labels_[i]);
  return out;
}

Var CaptionModel::classifier_loss(Binder& bind, const Example& ex) const {
  Tape scratch;
  Binder sb(scratch, params_, false);
  Var pooled = bind.tape().constant(image_features(sb, ex.patches).pooled.value());
  std::int32_t gold = ex.disease;
  return nll_from_logits(classifier_logits(bind, "head.disease", pooled), std::span<const std::int32_t>(&gold, 1));
}

std::vector<RankedClass> CaptionModel::classify(const Example& ex) const {
  Tape tape;
  Binder bind(tape, params_, false);
  Var pooled = image_features(bind, ex.patches).pooled;
  return rank_classes(classifier_logits(bind, "head.disease", pooled).value().data());
}

Tensor CaptionModel::cross_attention(const Example& ex, std::span<const TokenId> generated) const {
  if (cfg_.decoder != DecoderKind::Transformer)
    throw ContractError("attention export needs a transformer decoder; this model uses an LSTM");
  if (generated.empty()) return Tensor::zeros({0, 0});
  Tape tape;
  Binder bind(tape, params_, false);
  Context ctx = encode(bind, ex);
  std::vector<TokenId> inputs{special::kStart};
  inputs.insert(inputs.end(), generated.begin(), generated.end() - 1);
  TransformerOutput out = transformer_forward(bind, "dec", transformer_config(), bind("embed.tokens"), inputs,
                                              ctx.memory, Mode::Eval);
  return out.cross_attention.back();
}

}  // namespace kwcap
