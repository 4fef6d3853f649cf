#include "kwcap/text.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "kwcap/errors.hpp"

namespace kwcap {
namespace {

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> tokens = {"<pad>", "<unk>", "<start>", "<end>", "<sep>"};
  return tokens;
}

bool is_alpha(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }

}  // namespace

std::vector<std::string> preprocess(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  for (unsigned char c : text) {
    if (is_alpha(c)) {
      word.push_back(static_cast<char>(c | 0x20));
    } else if (!word.empty()) {
      out.push_back(std::move(word));
      word.clear();
    }
  }
  if (!word.empty()) out.push_back(std::move(word));
  return out;
}

Vocabulary::Vocabulary() {
  for (const auto& s : special_tokens()) {
    ids_.emplace(s, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(s);
  }
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  const auto& specials = special_tokens();
  std::size_t start = 0;
  if (tokens.size() >= specials.size() && std::equal(specials.begin(), specials.end(), tokens.begin())) {
    start = specials.size();
  }
  for (std::size_t i = start; i < tokens.size(); ++i) {
    if (v.ids_.count(tokens[i])) throw DataError("vocabulary: duplicate token '" + tokens[i] + "'");
    v.ids_.emplace(tokens[i], static_cast<TokenId>(v.tokens_.size()));
    v.tokens_.push_back(std::move(tokens[i]));
  }
  return v;
}

Vocabulary Vocabulary::build(std::span<const std::vector<std::string>> corpus, std::size_t min_count) {
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : corpus)
    for (const auto& tok : doc) ++counts[tok];
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, n] : counts) {
    if (n >= min_count) ranked.emplace_back(tok, n);
  }
  // std::map iteration is already lexicographic; stable sort keeps that for ties.
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  tokens.reserve(ranked.size());
  for (auto& [tok, _] : ranked) {
    if (std::find(special_tokens().begin(), special_tokens().end(), tok) != special_tokens().end()) continue;
    tokens.push_back(tok);
  }
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  const auto& specials = special_tokens();
  if (tokens.size() < specials.size() || !std::equal(specials.begin(), specials.end(), tokens.begin())) {
    throw DataError("vocabulary file " + path.string() + " does not start with the special tokens");
  }
  return from_tokens(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? special::kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) != 0; }

Vocabulary build_vocab(std::span<const std::vector<std::string>> descriptions,
                       std::span<const std::vector<std::string>> keyword_tokens, bool include_keywords,
                       std::size_t min_count) {
  if (descriptions.empty()) throw ContractError("build_vocab: empty corpus");
  std::vector<std::vector<std::string>> corpus(descriptions.begin(), descriptions.end());
  if (include_keywords) corpus.insert(corpus.end(), keyword_tokens.begin(), keyword_tokens.end());
  return Vocabulary::build(corpus, min_count);
}

TokenSequence pad_or_truncate(std::vector<TokenId> ids, std::size_t max_length) {
  TokenSequence seq;
  seq.true_length = std::min(ids.size(), max_length);
  ids.resize(max_length, special::kPad);
  seq.ids = std::move(ids);
  return seq;
}

TokenSequence encode_description(std::span<const std::string> tokens, const Vocabulary& vocab,
                                 std::size_t max_length) {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size() + 2);
  ids.push_back(special::kStart);
  for (const auto& t : tokens) ids.push_back(vocab.id(t));
  ids.push_back(special::kEnd);
  return pad_or_truncate(std::move(ids), max_length);
}

TokenSequence encode_keywords(std::span<const std::string> keywords, const Vocabulary& vocab,
                              std::size_t max_length) {
  std::vector<TokenId> ids;
  for (std::size_t k = 0; k < keywords.size(); ++k) {
    if (k) ids.push_back(special::kSep);
    for (const auto& t : preprocess(keywords[k])) ids.push_back(vocab.id(t));
  }
  return pad_or_truncate(std::move(ids), max_length);
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id == special::kEnd || id == special::kPad) break;
    if (id == special::kStart || id == special::kSep) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

}  // namespace kwcap
