#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kwcap {

using TokenId = std::int32_t;

/// Special token ids. They occupy the first ids of every vocabulary.
namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kStart = 2;
inline constexpr TokenId kEnd = 3;
inline constexpr TokenId kSep = 4;
inline constexpr std::size_t kCount = 5;
}  // namespace special

inline constexpr std::size_t kMaxDescriptionLength = 50;
inline constexpr std::size_t kMaxKeywordLength = 20;

/// Lowercases, drops every non-alphabetic character (treated as a word
/// boundary) and splits on the resulting boundaries.
std::vector<std::string> preprocess(std::string_view text);

/// Fixed-length id sequence; positions at and after `true_length` are PAD.
struct TokenSequence {
  std::vector<TokenId> ids;
  std::size_t true_length = 0;

  std::span<const TokenId> valid() const { return std::span<const TokenId>(ids).first(true_length); }
  bool operator==(const TokenSequence&) const = default;
};

class Vocabulary {
 public:
  Vocabulary();

  /// Ids by descending frequency, ties broken lexicographically, after the
  /// specials. Tokens seen fewer than `min_count` times are left out and
  /// encode as UNK.
  static Vocabulary build(std::span<const std::vector<std::string>> corpus, std::size_t min_count = 2);

  /// Reads the one-token-per-line format written by save().
  static Vocabulary load(const std::filesystem::path& path);
  static Vocabulary from_tokens(std::vector<std::string> tokens);
  void save(const std::filesystem::path& path) const;

  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// Builds the description vocabulary, optionally counting keyword tokens
/// into the same frequency table.
Vocabulary build_vocab(std::span<const std::vector<std::string>> descriptions,
                       std::span<const std::vector<std::string>> keyword_tokens, bool include_keywords,
                       std::size_t min_count = 2);

/// Pads with PAD or truncates to exactly `max_length` ids.
TokenSequence pad_or_truncate(std::vector<TokenId> ids, std::size_t max_length);

/// START, words, END; then pad or truncate.
TokenSequence encode_description(std::span<const std::string> tokens, const Vocabulary& vocab,
                                 std::size_t max_length = kMaxDescriptionLength);

/// Keyword tokens joined with SEP between keywords; then pad or truncate.
TokenSequence encode_keywords(std::span<const std::string> keywords, const Vocabulary& vocab,
                              std::size_t max_length = kMaxKeywordLength);

/// Space-joined tokens of the valid prefix with all specials other than UNK
/// removed.
std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab);

}  // namespace kwcap
