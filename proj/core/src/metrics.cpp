#include "kwcap/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>

#include "kwcap/errors.hpp"

namespace kwcap {

namespace {

using Counts = std::map<std::string, std::size_t>;

// '\x1f' cannot appear in preprocessed tokens.
std::string ngram_key(const Sentence& s, std::size_t start, std::size_t n) {
  std::string key = s[start];
  for (std::size_t i = 1; i < n; ++i) {
    key += '\x1f';
    key += s[start + i];
  }
  return key;
}

Counts ngrams(const Sentence& s, std::size_t n) {
  Counts c;
  if (s.size() < n) return c;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++c[ngram_key(s, i, n)];
  return c;
}

double safe_div(double a, double b) { return b == 0.0 ? 0.0 : a / b; }

}  // namespace

double bleu(std::span<const Sentence> candidates, std::span<const std::vector<Sentence>> references, int n) {
  if (n < 1 || n > 4) throw ContractError("bleu: order must be in 1..4, got " + std::to_string(n));
  if (candidates.empty()) throw ContractError("bleu: empty candidate set");
  if (candidates.size() != references.size()) throw ContractError("bleu: candidate and reference counts differ");
  std::vector<double> matched(static_cast<std::size_t>(n), 0.0), total(static_cast<std::size_t>(n), 0.0);
  double c = 0.0, r = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Sentence& cand = candidates[i];
    const auto& refs = references[i];
    if (refs.empty()) throw ContractError("bleu: candidate " + std::to_string(i) + " has no reference");
    c += static_cast<double>(cand.size());
    std::size_t best = refs.front().size();
    for (const auto& ref : refs) {
      auto d = [&](std::size_t len) { return len > cand.size() ? len - cand.size() : cand.size() - len; };
      if (d(ref.size()) < d(best) || (d(ref.size()) == d(best) && ref.size() < best)) best = ref.size();
    }
    r += static_cast<double>(best);
    for (int k = 1; k <= n; ++k) {
      Counts cc = ngrams(cand, static_cast<std::size_t>(k));
      Counts max_ref;
      for (const auto& ref : refs)
        for (const auto& [g, cnt] : ngrams(ref, static_cast<std::size_t>(k))) max_ref[g] = std::max(max_ref[g], cnt);
      for (const auto& [g, cnt] : cc) {
        auto it = max_ref.find(g);
        matched[k - 1] += static_cast<double>(std::min(cnt, it == max_ref.end() ? 0 : it->second));
        total[k - 1] += static_cast<double>(cnt);
      }
    }
  }
  if (c == 0.0) return 0.0;
  double log_sum = 0.0;
  for (int k = 0; k < n; ++k) {
    if (matched[k] == 0.0) return 0.0;
    log_sum += std::log(matched[k] / total[k]) / n;
  }
  double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum);
}

double bleu(std::span<const Sentence> candidates, std::span<const Sentence> references, int n) {
  std::vector<std::vector<Sentence>> refs;
  refs.reserve(references.size());
  for (const auto& r : references) refs.push_back({r});
  return bleu(candidates, refs, n);
}

CiderStats::CiderStats(std::span<const std::vector<Sentence>> reference_sets, int max_n)
    : documents_(reference_sets.size()), max_n_(max_n) {
  for (const auto& set : reference_sets) {
    std::set<std::string> seen;
    for (const auto& ref : set)
      for (int n = 1; n <= max_n; ++n)
        for (const auto& [g, cnt] : ngrams(ref, static_cast<std::size_t>(n))) seen.insert(g);
    for (const auto& g : seen) ++df_[g];
  }
}

double CiderStats::idf(const std::string& key) const {
  auto it = df_.find(key);
  std::size_t df = it == df_.end() ? 0 : it->second;
  return std::log(static_cast<double>(documents_) / (1.0 + static_cast<double>(df)));
}

double cider(const Sentence& candidate, std::span<const Sentence> references, const CiderStats& stats) {
  if (references.empty()) throw ContractError("cider: empty reference set");
  double total = 0.0;
  for (int n = 1; n <= stats.max_n(); ++n) {
    auto weigh = [&](const Sentence& s) {
      std::map<std::string, double> v;
      for (const auto& [g, cnt] : ngrams(s, static_cast<std::size_t>(n))) v[g] = static_cast<double>(cnt) * stats.idf(g);
      return v;
    };
    auto norm = [](const std::map<std::string, double>& v) {
      double s = 0.0;
      for (const auto& [g, x] : v) s += x * x;
      return std::sqrt(s);
    };
    auto vc = weigh(candidate);
    double nc = norm(vc);
    double sum_cos = 0.0;
    for (const auto& ref : references) {
      auto vr = weigh(ref);
      double dot = 0.0;
      for (const auto& [g, x] : vc) {
        auto it = vr.find(g);
        if (it != vr.end()) dot += x * it->second;
      }
      sum_cos += safe_div(dot, nc * norm(vr));
    }
    total += sum_cos / static_cast<double>(references.size()) / stats.max_n();
  }
  return total;
}

double corpus_cider(std::span<const Sentence> candidates, std::span<const std::vector<Sentence>> references) {
  if (candidates.size() != references.size()) throw ContractError("cider: candidate and reference counts differ");
  if (candidates.empty()) return 0.0;
  CiderStats stats(references);
  double s = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) s += cider(candidates[i], references[i], stats);
  return s / static_cast<double>(candidates.size());
}

std::size_t lcs_length(const Sentence& a, const Sentence& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Sentence& candidate, const Sentence& reference, double beta) {
  if (!(beta > 0.0)) throw ContractError("rouge_l: beta must be positive");
  double lcs = static_cast<double>(lcs_length(candidate, reference));
  double r = safe_div(lcs, static_cast<double>(reference.size()));
  double p = safe_div(lcs, static_cast<double>(candidate.size()));
  double b2 = beta * beta;
  return safe_div((1.0 + b2) * r * p, r + b2 * p);
}

double meteor(const Sentence& candidate, const Sentence& reference) {
  std::vector<bool> used(reference.size(), false);
  std::size_t matched = 0, chunks = 0;
  std::size_t prev_c = 0, prev_r = 0;
  bool have_prev = false;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    std::size_t j = 0;
    while (j < reference.size() && (used[j] || reference[j] != candidate[i])) ++j;
    if (j == reference.size()) continue;
    used[j] = true;
    ++matched;
    if (!(have_prev && i == prev_c + 1 && j == prev_r + 1)) ++chunks;
    prev_c = i;
    prev_r = j;
    have_prev = true;
  }
  if (matched == 0) return 0.0;
  double m = static_cast<double>(matched);
  double p = m / static_cast<double>(candidate.size());
  double r = m / static_cast<double>(reference.size());
  double f = 10.0 * p * r / (r + 9.0 * p);
  double frag = static_cast<double>(chunks) / m;
  return f * (1.0 - 0.5 * frag * frag * frag);
}

MetricReport evaluate_corpus(std::span<const Sentence> candidates, std::span<const Sentence> references) {
  if (candidates.size() != references.size()) throw ContractError("evaluate: candidate and reference counts differ");
  if (candidates.empty()) throw ContractError("evaluate: empty corpus");
  MetricReport m;
  m.corpus_size = candidates.size();
  m.bleu_1 = bleu(candidates, references, 1);
  m.bleu_2 = bleu(candidates, references, 2);
  m.bleu_3 = bleu(candidates, references, 3);
  m.bleu_4 = bleu(candidates, references, 4);
  m.bleu_avg = (m.bleu_1 + m.bleu_2 + m.bleu_3 + m.bleu_4) / 4.0;
  std::vector<std::vector<Sentence>> sets;
  sets.reserve(references.size());
  for (const auto& r : references) sets.push_back({r});
  m.cider = corpus_cider(candidates, sets);
  double rl = 0.0, mt = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    rl += rouge_l(candidates[i], references[i]);
    mt += meteor(candidates[i], references[i]);
  }
  m.rouge_l = rl / static_cast<double>(candidates.size());
  m.meteor = mt / static_cast<double>(candidates.size());
  return m;
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string MetricReport::to_text() const {
  std::string s;
  auto line = [&](const char* k, const std::string& v) { s += std::string(k) + "=" + v + "\n"; };
  if (!corpus.empty()) line("corpus", corpus);
  line("corpus_size", std::to_string(corpus_size));
  line("bleu_1", format_double(bleu_1));
  line("bleu_2", format_double(bleu_2));
  line("bleu_3", format_double(bleu_3));
  line("bleu_4", format_double(bleu_4));
  line("bleu_avg", format_double(bleu_avg));
  line("cider", format_double(cider));
  line("rouge_l", format_double(rouge_l));
  line("meteor", format_double(meteor));
  if (prec_at_1) line("prec_at_1", format_double(*prec_at_1));
  if (prec_at_5) line("prec_at_5", format_double(*prec_at_5));
  return s;
}

}  // namespace kwcap
