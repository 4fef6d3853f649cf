#pragma once

#include <span>
#include <string>
#include <vector>

#include "kwcap/attention.hpp"

namespace kwcap {

/// Multi-label keyword predictor: pooled image features -> ReLU MLP -> one
/// logit per keyword label. Each label is an independent logistic.
struct KeywordPredictorConfig {
  std::size_t input_dim = 64;
  std::size_t hidden = 64;
  std::size_t labels = 0;
  double threshold = 0.5;  // tau
};

void init_keyword_predictor(ParamStore& store, const std::string& prefix, const KeywordPredictorConfig& cfg, Rng& rng);

/// 1 x L logits.
Var keyword_logits(Binder& bind, const std::string& prefix, Var pooled);

/// Label ids whose probability sigmoid(logit) is strictly above `threshold`,
/// ascending.
std::vector<std::size_t> select_keywords(std::span<const double> logits, double threshold = 0.5);

std::vector<std::size_t> predict_keywords(Binder& bind, const std::string& prefix, const KeywordPredictorConfig& cfg,
                                          Var pooled);

/// Mean binary cross-entropy over labels.
Var keyword_loss(Var logits, const Tensor& targets);

/// Disease classifier: a linear layer to C classes.
void init_classifier(ParamStore& store, const std::string& prefix, std::size_t input_dim, std::size_t classes,
                     Rng& rng);
Var classifier_logits(Binder& bind, const std::string& prefix, Var pooled);

struct RankedClass {
  std::size_t id = 0;
  double score = 0.0;  // softmax probability
};

/// Classes by descending softmax score; equal scores keep ascending id order.
std::vector<RankedClass> rank_classes(std::span<const double> logits);

/// Fraction of examples whose gold label is among the first k ranked ids.
/// Every ranking must cover all C classes; k > C is a contract violation.
double prec_at_k(std::span<const std::vector<std::size_t>> rankings, std::span<const std::size_t> gold, std::size_t k);

}  // namespace kwcap
