#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kwcap/encoders.hpp"

namespace kwcap {

/// One dataset entry: an image (or a precomputed feature vector), its
/// keywords, the clinical description and the disease class.
struct Record {
  Image image;
  std::vector<double> features;  // used instead of `image` when non-empty
  std::vector<std::string> keywords;
  std::string description;
  int disease = 0;
  std::string modality;  // optional tag, e.g. "CFP" or "FA"

  bool operator==(const Record&) const = default;
};

struct SynthSpec {
  std::uint64_t seed = 1;
  std::size_t n_records = 100;
  std::size_t classes = 6;         // at most disease_names().size()
  std::size_t min_keywords = 2;
  std::size_t max_keywords = 5;
  double texture_amplitude = 60.0;  // class pattern, period 8 in both axes
  double glyph_amplitude = 30.0;    // per-keyword patch glyph
  double glyph_probability = 0.5;   // chance a keyword's glyph is drawn
  double noise = 12.0;
};

const std::vector<std::string>& disease_names();
/// Every keyword the generator can emit, in canonical description order.
const std::vector<std::string>& keyword_catalogue();
/// Description fragment rendered for a keyword; contains the keyword.
const std::string& keyword_fragment(const std::string& keyword);
/// Keywords a disease class may draw from. Pools overlap between classes.
std::vector<std::string> keyword_pool(int disease);
/// Description grammar: disease sentence then one fragment per keyword in
/// catalogue order, whatever order the keywords come in.
std::string render_description(int disease, std::span<const std::string> keywords);

std::vector<Record> generate(const SynthSpec& spec);

std::string record_to_json(const Record& r);
/// `line_number` is only used in error messages.
Record record_from_json(std::string_view line, std::size_t line_number = 1);

void save_jsonl(const std::filesystem::path& path, std::span<const Record> records);
std::vector<Record> load_jsonl(const std::filesystem::path& path);

struct SplitSpec {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;

  static SplitSpec sixty_twenty_twenty() { return {0.6, 0.2, 0.2}; }
  static SplitSpec eighty_ten_ten() { return {0.8, 0.1, 0.1}; }
  bool operator==(const SplitSpec&) const = default;
};

struct Splits {
  std::vector<std::size_t> train, val, test;
  bool operator==(const Splits&) const = default;
};

/// Seeded shuffle of 0..n-1 cut into floor(n*train), floor(n*val) and the
/// remainder. Fractions must be non-negative and sum to 1.
Splits split_indices(std::size_t n, const SplitSpec& spec, std::uint64_t seed);

/// Text file with lines "train <i> <i> ...", "val ...", "test ...".
void save_splits(const std::filesystem::path& path, const Splits& s);
Splits load_splits(const std::filesystem::path& path);

}  // namespace kwcap
