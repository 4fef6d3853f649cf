#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kwcap {

using Sentence = std::vector<std::string>;

/// Corpus BLEU-n with clipped n-gram counts, uniform weights 1/n and the
/// brevity penalty over total candidate/reference lengths. For several
/// references the closest reference length is used (shorter on ties). Any
/// zero precision gives 0.
double bleu(std::span<const Sentence> candidates, std::span<const std::vector<Sentence>> references, int n);
double bleu(std::span<const Sentence> candidates, std::span<const Sentence> references, int n);

/// Document frequencies for CIDEr, one document per reference set.
class CiderStats {
 public:
  CiderStats(std::span<const std::vector<Sentence>> reference_sets, int max_n = 4);

  /// log(N / (1 + df)).
  double idf(const std::string& ngram_key) const;
  std::size_t documents() const { return documents_; }
  int max_n() const { return max_n_; }

 private:
  std::size_t documents_;
  int max_n_;
  std::map<std::string, std::size_t> df_;
};

/// Sum over n of 1/N_max times the mean cosine between the TF-IDF vector of
/// the candidate and each reference.
double cider(const Sentence& candidate, std::span<const Sentence> references, const CiderStats& stats);
double corpus_cider(std::span<const Sentence> candidates, std::span<const std::vector<Sentence>> references);

/// LCS F-measure with R = LCS/|reference|, P = LCS/|candidate|.
double rouge_l(const Sentence& candidate, const Sentence& reference, double beta = 1.0);
std::size_t lcs_length(const Sentence& a, const Sentence& b);

/// Exact-match unigram METEOR with leftmost-first alignment:
/// 10PR / (R + 9P) * (1 - 0.5 (chunks / matched)^3).
double meteor(const Sentence& candidate, const Sentence& reference);

struct MetricReport {
  double bleu_1 = 0, bleu_2 = 0, bleu_3 = 0, bleu_4 = 0, bleu_avg = 0;
  double cider = 0, rouge_l = 0, meteor = 0;
  std::size_t corpus_size = 0;
  std::optional<double> prec_at_1, prec_at_5;
  std::string corpus;  // label of the evaluated corpus

  /// Flat "key=value" lines with shortest round-trip number formatting.
  std::string to_text() const;
};

MetricReport evaluate_corpus(std::span<const Sentence> candidates, std::span<const Sentence> references);

/// Shortest representation that parses back to the same double.
std::string format_double(double v);

}  // namespace kwcap
