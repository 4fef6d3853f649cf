#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kwcap/config.hpp"
#include "kwcap/datasynth.hpp"
#include "kwcap/decoders.hpp"
#include "kwcap/encoders.hpp"
#include "kwcap/fusion.hpp"
#include "kwcap/heads.hpp"
#include "kwcap/search.hpp"
#include "kwcap/text.hpp"

namespace kwcap {

/// A record turned into model inputs.
struct Example {
  Tensor patches;  // N x P
  std::vector<std::string> keywords;
  TokenSequence keyword_ids;
  TokenSequence description;
  Tensor keyword_targets;  // 1 x L multi-hot over the model's keyword labels
  int disease = 0;
};

/// Image encoder, fusion block, caption decoder and the two prediction heads
/// over one parameter store.
///
/// Parameter groups: embed.tokens (shared by descriptions and keywords),
/// image.*, fuse.*, kwenc.* (contextual encoder), dec.*, head.keywords.*,
/// head.disease.*.
class CaptionModel {
 public:
  /// Fresh parameters drawn from cfg.seed.
  CaptionModel(HyperConfig cfg, Vocabulary vocab, std::vector<std::string> keyword_labels, std::size_t classes);
  /// Parameters taken from `params`; names and shapes must match.
  CaptionModel(HyperConfig cfg, Vocabulary vocab, std::vector<std::string> keyword_labels, std::size_t classes,
               ParamStore params);

  /// Vocabulary, keyword labels and class count from training records.
  static CaptionModel from_records(const HyperConfig& cfg, std::span<const Record> train);

  Example prepare(const Record& r) const;
  /// Same example with its keyword set replaced.
  Example with_keywords(Example ex, std::vector<std::string> keywords) const;

  struct Context {
    ImageFeatures image;
    FusedContext fused;
    Var memory;  // fused.k_final
  };
  Context encode(Binder& bind, const Example& ex) const;

  struct CaptionLoss {
    Var nll;  // summed over target tokens
    std::size_t tokens = 0;
  };
  CaptionLoss caption_loss(Binder& bind, const Example& ex, Mode mode = Mode::Train, Rng* rng = nullptr) const;

  /// Incremental decoder over one example for the search routines.
  std::unique_ptr<StepModel> step_model(const Example& ex) const;
  /// Greedy when beam == 1. `max_len` counts generated tokens (END included);
  /// 0 means config max_len - 1.
  SearchResult generate(const Example& ex, std::size_t beam, std::size_t max_len = 0) const;
  std::string caption(const SearchResult& r) const { return decode(r.tokens, vocab_); }

  /// Mean BCE of the keyword predictor on detached pooled image features.
  Var keyword_predictor_loss(Binder& bind, const Example& ex) const;
  std::vector<std::string> predict_keywords(const Example& ex) const;
  /// Softmax cross-entropy of the disease head on detached pooled features.
  Var classifier_loss(Binder& bind, const Example& ex) const;
  std::vector<RankedClass> classify(const Example& ex) const;

  /// Last-block cross-attention, averaged over heads, for a teacher-forced
  /// run over `generated`: row t is the attention while predicting
  /// generated[t]. Transformer decoder only.
  Tensor cross_attention(const Example& ex, std::span<const TokenId> generated) const;

  const HyperConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  const std::vector<std::string>& keyword_labels() const { return labels_; }
  std::size_t classes() const { return classes_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  std::size_t context_dim() const;
  LstmConfig lstm_config() const;
  TransformerConfig transformer_config() const;

 private:
  void init_params();
  ImageFeatures image_features(Binder& bind, const Tensor& patches) const;

  HyperConfig cfg_;
  Vocabulary vocab_;
  std::vector<std::string> labels_;
  std::size_t classes_;
  ParamStore params_;
};

/// Row-wise log-softmax of plain values.
std::vector<double> log_softmax(std::span<const double> logits);

}  // namespace kwcap
