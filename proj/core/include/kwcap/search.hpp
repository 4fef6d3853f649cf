#pragma once

#include <memory>
#include <span>
#include <vector>

#include "kwcap/text.hpp"

namespace kwcap {

/// Incremental next-token model. `advance` consumes the last token of
/// `prefix` (prefix[0] is START) given the state returned for the shorter
/// prefix, or a null state for the first call, and returns next-token
/// log-probabilities along with the new state.
class StepModel {
 public:
  using State = std::shared_ptr<const void>;
  struct Step {
    std::vector<double> log_probs;
    State state;
  };

  virtual ~StepModel() = default;
  virtual Step advance(const State& state, std::span<const TokenId> prefix) = 0;
};

struct SearchResult {
  std::vector<TokenId> tokens;  // generated ids after START; ends with END when finished
  double log_prob = 0.0;        // exact sum of the chosen steps' log-probabilities
  bool finished = false;

  /// START + tokens, padded to `max_length`.
  TokenSequence sequence(std::size_t max_length = kMaxDescriptionLength) const;
};

/// Argmax at every step, lowest id on ties, until END or `max_len`
/// generated tokens.
SearchResult greedy_decode(StepModel& model, std::size_t max_len);

/// Keeps the k best prefixes by cumulative log-probability each step, with
/// finished beams competing in the same pool. Ties prefer the
/// lexicographically smaller prefix. Returns the best finished beam, or the
/// best live one when nothing finished within `max_len`. No length
/// normalisation.
SearchResult beam_decode(StepModel& model, std::size_t k, std::size_t max_len);

}  // namespace kwcap
