#include "kwcap/search.hpp"

#include <algorithm>
#include <numeric>

#include "kwcap/errors.hpp"

namespace kwcap {

TokenSequence SearchResult::sequence(std::size_t max_length) const {
  std::vector<TokenId> ids{special::kStart};
  ids.insert(ids.end(), tokens.begin(), tokens.end());
  return pad_or_truncate(std::move(ids), max_length);
}

namespace {

struct Beam {
  std::vector<TokenId> prefix;  // starts with START
  double log_prob = 0.0;
  bool finished = false;
  StepModel::State state;
};

bool better(const Beam& a, const Beam& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.prefix < b.prefix;
}

SearchResult to_result(const Beam& b) {
  return SearchResult{std::vector<TokenId>(b.prefix.begin() + 1, b.prefix.end()), b.log_prob, b.finished};
}

// Indices of the `k` largest values, ties to the lower index.
std::vector<std::size_t> top_k(std::span<const double> v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return v[a] != v[b] ? v[a] > v[b] : a < b; });
  idx.resize(k);
  return idx;
}

}  // namespace

SearchResult greedy_decode(StepModel& model, std::size_t max_len) {
  std::vector<TokenId> prefix{special::kStart};
  StepModel::State state;
  SearchResult out;
  for (std::size_t t = 0; t < max_len; ++t) {
    StepModel::Step s = model.advance(state, prefix);
    if (s.log_probs.empty()) throw ContractError("greedy_decode: model returned no log-probabilities");
    auto best = static_cast<TokenId>(top_k(s.log_probs, 1).front());
    out.log_prob += s.log_probs[static_cast<std::size_t>(best)];
    out.tokens.push_back(best);
    prefix.push_back(best);
    state = std::move(s.state);
    if (best == special::kEnd) {
      out.finished = true;
      break;
    }
  }
  return out;
}

SearchResult beam_decode(StepModel& model, std::size_t k, std::size_t max_len) {
  if (k == 0) throw ContractError("beam_decode: beam width must be at least 1");
  std::vector<Beam> pool{Beam{{special::kStart}, 0.0, false, nullptr}};
  for (std::size_t t = 0; t < max_len; ++t) {
    if (std::all_of(pool.begin(), pool.end(), [](const Beam& b) { return b.finished; })) break;
    std::vector<Beam> next;
    for (Beam& b : pool) {
      if (b.finished) {
        next.push_back(std::move(b));
        continue;
      }
      StepModel::Step s = model.advance(b.state, b.prefix);
      if (s.log_probs.empty()) throw ContractError("beam_decode: model returned no log-probabilities");
      // Within one beam only its own k best continuations can survive.
      for (std::size_t tok : top_k(s.log_probs, k)) {
        Beam c;
        c.prefix = b.prefix;
        c.prefix.push_back(static_cast<TokenId>(tok));
        c.log_prob = b.log_prob + s.log_probs[tok];
        c.finished = tok == static_cast<std::size_t>(special::kEnd);
        c.state = s.state;
        next.push_back(std::move(c));
      }
    }
    std::size_t keep = std::min(k, next.size());
    std::partial_sort(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(keep), next.end(), better);
    next.resize(keep);
    pool = std::move(next);
  }
  const Beam* best = nullptr;
  for (const Beam& b : pool)
    if (b.finished && (!best || better(b, *best))) best = &b;
  if (!best)
    for (const Beam& b : pool)
      if (!best || better(b, *best)) best = &b;
  return to_result(*best);
}

}  // namespace kwcap
