#include "kwcap/heads.hpp"

#include <algorithm>
#include <cmath>

#include "kwcap/errors.hpp"

namespace kwcap {

void init_keyword_predictor(ParamStore& store, const std::string& prefix, const KeywordPredictorConfig& cfg,
                            Rng& rng) {
  if (cfg.labels == 0) throw ConfigError("keyword predictor needs at least one label");
  if (!(cfg.threshold > 0.0 && cfg.threshold < 1.0)) throw ConfigError("keyword threshold must lie in (0, 1)");
  init_ffn(store, prefix, cfg.input_dim, cfg.hidden, cfg.labels, rng);
}

Var keyword_logits(Binder& bind, const std::string& prefix, Var pooled) { return apply_ffn(bind, prefix, pooled); }

std::vector<std::size_t> select_keywords(std::span<const double> logits, double threshold) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double p = 1.0 / (1.0 + std::exp(-logits[i]));
    if (p > threshold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> predict_keywords(Binder& bind, const std::string& prefix, const KeywordPredictorConfig& cfg,
                                          Var pooled) {
  return select_keywords(keyword_logits(bind, prefix, pooled).value().data(), cfg.threshold);
}

Var keyword_loss(Var logits, const Tensor& targets) {
  return scale(bce_with_logits(logits, targets), 1.0 / static_cast<double>(targets.size()));
}

void init_classifier(ParamStore& store, const std::string& prefix, std::size_t input_dim, std::size_t classes,
                     Rng& rng) {
  if (classes == 0) throw ConfigError("classifier needs at least one class");
  init_linear(store, prefix, input_dim, classes, rng);
}

Var classifier_logits(Binder& bind, const std::string& prefix, Var pooled) { return apply_linear(bind, prefix, pooled); }

std::vector<RankedClass> rank_classes(std::span<const double> logits) {
  std::vector<RankedClass> out(logits.size());
  if (logits.empty()) return out;
  double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = {i, std::exp(logits[i] - mx) / z};
  std::stable_sort(out.begin(), out.end(), [](const RankedClass& a, const RankedClass& b) { return a.score > b.score; });
  return out;
}

double prec_at_k(std::span<const std::vector<std::size_t>> rankings, std::span<const std::size_t> gold, std::size_t k) {
  if (k == 0) throw ContractError("prec_at_k: k must be at least 1");
  if (rankings.size() != gold.size()) throw ContractError("prec_at_k: rankings and gold labels differ in count");
  if (rankings.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < rankings.size(); ++i) {
    const auto& r = rankings[i];
    if (k > r.size()) {
      throw ContractError("prec_at_k: k = " + std::to_string(k) + " exceeds the " + std::to_string(r.size()) +
                          " ranked classes");
    }
    if (std::find(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(k), gold[i]) != r.begin() + k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

}  // namespace kwcap
