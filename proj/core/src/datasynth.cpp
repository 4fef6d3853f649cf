#include "kwcap/datasynth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "kwcap/errors.hpp"
#include "kwcap/rng.hpp"

namespace kwcap {

namespace {

constexpr std::size_t kSide = 64;
constexpr std::size_t kPeriod = 8;

struct KeywordDef {
  std::string keyword;
  std::string fragment;
};

const std::vector<KeywordDef>& keyword_defs() {
  static const std::vector<KeywordDef> defs = {
      {"microaneurysms", "Scattered microaneurysms are present."},
      {"hemorrhage", "Dot and blot hemorrhage is seen."},
      {"exudates", "Hard exudates near the macula."},
      {"spots", "Cotton wool spots are visible."},
      {"neovascularization", "Neovascularization at the disc."},
      {"edema", "Macular edema is noted."},
      {"laser scars", "Old laser scars in the periphery."},
      {"cupping", "Enlarged optic cup with cupping."},
      {"pallor", "Optic disc pallor is seen."},
      {"atrophy", "Patchy chorioretinal atrophy."},
      {"narrowing", "Arteriolar narrowing is present."},
      {"drusen", "Soft drusen at the posterior pole."},
      {"pigment", "Bone spicule pigment in the periphery."},
      {"fibrosis", "Subretinal fibrosis is noted."},
      {"tortuosity", "Venous tortuosity is evident."},
  };
  return defs;
}

// Indices into keyword_defs(). Class c draws from a window of 9 keywords
// starting at 2c on the circular catalogue, so neighbouring classes share
// 7 of their 9 keywords and a keyword set says little about the class.
const std::vector<std::vector<std::size_t>>& pools() {
  static const std::vector<std::vector<std::size_t>> p = [] {
    std::vector<std::vector<std::size_t>> out(6);
    for (std::size_t c = 0; c < out.size(); ++c)
      for (std::size_t j = 0; j < 9; ++j) out[c].push_back((2 * c + j) % 15);
    return out;
  }();
  return p;
}

// Integer wave numbers (a, b): every class pattern repeats every 8 pixels
// in both axes, so each 8x8 patch carries the same copy of it.
constexpr int kWaves[6][2] = {{1, 0}, {0, 1}, {1, 1}, {1, -1}, {2, 0}, {0, 2}};

std::size_t keyword_index(const std::string& kw) {
  const auto& defs = keyword_defs();
  for (std::size_t i = 0; i < defs.size(); ++i)
    if (defs[i].keyword == kw) return i;
  throw DataError("unknown keyword '" + kw + "'");
}

// Fixed +-1 glyph of a keyword and the patch it is drawn on.
std::vector<double> glyph(std::size_t kw) {
  Rng rng(splitmix64(0x9e37ULL + kw));
  std::vector<double> g(kPeriod * kPeriod);
  for (double& v : g) v = rng.bernoulli(0.5) ? 1.0 : -1.0;
  return g;
}
std::size_t glyph_patch(std::size_t kw) { return (kw * 5 + 3) % 64; }

Image render_image(int disease, std::span<const std::size_t> keywords, const SynthSpec& spec, Rng& rng) {
  Image img{kSide, kSide, std::vector<double>(kSide * kSide)};
  const int a = kWaves[disease % 6][0], b = kWaves[disease % 6][1];
  std::vector<double> base(kSide * kSide);
  for (std::size_t y = 0; y < kSide; ++y)
    for (std::size_t x = 0; x < kSide; ++x) {
      double phase = 2.0 * std::numbers::pi * (a * static_cast<double>(x) + b * static_cast<double>(y)) / kPeriod;
      base[y * kSide + x] = 128.0 + spec.texture_amplitude * std::sin(phase);
    }
  for (std::size_t kw : keywords) {
    if (!rng.bernoulli(spec.glyph_probability)) continue;
    auto g = glyph(kw);
    std::size_t p = glyph_patch(kw), pr = p / 8, pc = p % 8;
    for (std::size_t r = 0; r < kPeriod; ++r)
      for (std::size_t c = 0; c < kPeriod; ++c)
        base[(pr * kPeriod + r) * kSide + pc * kPeriod + c] += spec.glyph_amplitude * g[r * kPeriod + c];
  }
  for (std::size_t i = 0; i < base.size(); ++i)
    img.pixels[i] = std::clamp(std::round(base[i] + rng.normal(0.0, spec.noise)), 0.0, 255.0);
  return img;
}

void append_json_string(std::string& out, std::string_view s) {
  out += '"';
  for (char ch : s) {
    switch (ch) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default:
        if (static_cast<unsigned char>(ch) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", static_cast<unsigned>(static_cast<unsigned char>(ch)));
          out += buf;
        } else {
          out += ch;
        }
    }
  }
  out += '"';
}

void append_number(std::string& out, double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, end);
}

}  // namespace

const std::vector<std::string>& disease_names() {
  static const std::vector<std::string> names = {
      "diabetic retinopathy",     "glaucoma", "macular degeneration", "retinal vein occlusion",
      "hypertensive retinopathy", "retinitis pigmentosa",
  };
  return names;
}

const std::vector<std::string>& keyword_catalogue() {
  static const std::vector<std::string> kws = [] {
    std::vector<std::string> v;
    for (const auto& d : keyword_defs()) v.push_back(d.keyword);
    return v;
  }();
  return kws;
}

const std::string& keyword_fragment(const std::string& keyword) { return keyword_defs()[keyword_index(keyword)].fragment; }

std::vector<std::string> keyword_pool(int disease) {
  if (disease < 0 || static_cast<std::size_t>(disease) >= pools().size())
    throw ContractError("no disease class " + std::to_string(disease));
  std::vector<std::string> out;
  for (std::size_t i : pools()[static_cast<std::size_t>(disease)]) out.push_back(keyword_defs()[i].keyword);
  return out;
}

std::string render_description(int disease, std::span<const std::string> keywords) {
  if (disease < 0 || static_cast<std::size_t>(disease) >= disease_names().size())
    throw ContractError("no disease class " + std::to_string(disease));
  std::vector<std::size_t> idx;
  for (const auto& k : keywords) idx.push_back(keyword_index(k));
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  std::string s = "The fundus shows signs of " + disease_names()[static_cast<std::size_t>(disease)] + ".";
  for (std::size_t i : idx) s += " " + keyword_defs()[i].fragment;
  return s;
}

std::vector<Record> generate(const SynthSpec& spec) {
  if (spec.n_records == 0) throw ContractError("generate: need at least one record");
  if (spec.classes == 0 || spec.classes > disease_names().size())
    throw ConfigError("generate: classes must be in 1.." + std::to_string(disease_names().size()));
  if (spec.min_keywords < 1 || spec.min_keywords > spec.max_keywords)
    throw ConfigError("generate: keyword count range is empty");
  Rng root(spec.seed);
  std::vector<Record> out;
  out.reserve(spec.n_records);
  for (std::size_t i = 0; i < spec.n_records; ++i) {
    Rng rng = root.fork(i);
    Record r;
    r.disease = static_cast<int>(rng.below(spec.classes));
    std::vector<std::size_t> pool = pools()[static_cast<std::size_t>(r.disease)];
    rng.shuffle(std::span<std::size_t>(pool));
    std::size_t hi = std::min(spec.max_keywords, pool.size());
    std::size_t lo = std::min(spec.min_keywords, hi);
    std::size_t n = lo + rng.below(hi - lo + 1);
    pool.resize(n);
    for (std::size_t k : pool) r.keywords.push_back(keyword_defs()[k].keyword);
    r.description = render_description(r.disease, r.keywords);
    r.image = render_image(r.disease, pool, spec, rng);
    r.modality = rng.bernoulli(0.5) ? "CFP" : "FA";
    out.push_back(std::move(r));
  }
  return out;
}

std::string record_to_json(const Record& r) {
  std::string s;
  s.reserve(r.image.pixels.size() * 4 + 256);
  s += "{\"image\":";
  if (!r.features.empty()) {
    s += "{\"features\":[";
    for (std::size_t i = 0; i < r.features.size(); ++i) {
      if (i) s += ',';
      append_number(s, r.features[i]);
    }
    s += "]}";
  } else {
    s += '[';
    for (std::size_t y = 0; y < r.image.height; ++y) {
      if (y) s += ',';
      s += '[';
      for (std::size_t x = 0; x < r.image.width; ++x) {
        if (x) s += ',';
        append_number(s, r.image.at(y, x));
      }
      s += ']';
    }
    s += ']';
  }
  s += ",\"keywords\":[";
  for (std::size_t i = 0; i < r.keywords.size(); ++i) {
    if (i) s += ',';
    append_json_string(s, r.keywords[i]);
  }
  s += "],\"description\":";
  append_json_string(s, r.description);
  s += ",\"disease\":";
  s += std::to_string(r.disease);
  if (!r.modality.empty()) {
    s += ",\"modality\":";
    append_json_string(s, r.modality);
  }
  s += '}';
  return s;
}

// Fast path for the layout record_to_json writes: a leading "image" array of
// plain numbers. Parses the grid with from_chars and returns the rest of the
// object as JSON text, or nullopt to fall back to the generic parser.
static std::optional<std::string> split_image_grid(std::string_view line, Image& img) {
  constexpr std::string_view head = "{\"image\":[";
  if (!line.starts_with(head)) return std::nullopt;
  const char* p = line.data() + head.size() - 1;  // at the outer '['
  const char* end = line.data() + line.size();
  ++p;
  std::vector<double> pixels;
  std::size_t rows = 0, width = 0;
  if (p < end && *p == ']') {
    ++p;
  } else {
    while (true) {
      if (p >= end || *p != '[') return std::nullopt;
      ++p;
      std::size_t n = 0;
      while (true) {
        double v;
        auto [q, ec] = std::from_chars(p, end, v);
        if (ec != std::errc()) return std::nullopt;
        pixels.push_back(v);
        ++n;
        p = q;
        if (p < end && *p == ',') { ++p; continue; }
        if (p < end && *p == ']') { ++p; break; }
        return std::nullopt;
      }
      if (rows == 0) width = n;
      if (n != width) return std::nullopt;  // generic path reports it
      ++rows;
      if (p < end && *p == ',') { ++p; continue; }
      if (p < end && *p == ']') { ++p; break; }
      return std::nullopt;
    }
  }
  if (p >= end || *p != ',') return std::nullopt;
  img = Image{rows, width, std::move(pixels)};
  return "{\"image\":[]," + std::string(p + 1, end);
}

Record record_from_json(std::string_view line, std::size_t line_number) {
  auto fail = [&](const std::string& what) -> DataError {
    return DataError("line " + std::to_string(line_number) + ": " + what);
  };
  Image fast_image;
  std::optional<std::string> rest = split_image_grid(line, fast_image);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(rest ? std::string_view(*rest) : line);
  } catch (const nlohmann::json::parse_error& e) {
    throw fail(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw fail("record is not a JSON object");
  for (const char* field : {"image", "keywords", "description", "disease"})
    if (!j.contains(field)) throw fail(std::string("missing field \"") + field + "\"");
  Record r;
  try {
    const auto& img = j["image"];
    if (img.is_object()) {
      if (!img.contains("features")) throw fail("missing field \"image.features\"");
      r.features = img["features"].get<std::vector<double>>();
    } else if (rest) {
      r.image = std::move(fast_image);
    } else if (img.is_array()) {
      r.image.height = img.size();
      r.image.width = img.empty() ? 0 : img[0].size();
      r.image.pixels.reserve(r.image.height * r.image.width);
      for (const auto& row : img) {
        if (!row.is_array() || row.size() != r.image.width) throw fail("image rows differ in length");
        for (const auto& v : row) r.image.pixels.push_back(v.get<double>());
      }
    } else {
      throw fail("field \"image\" must be an array of rows or {\"features\": [...]}");
    }
    r.keywords = j["keywords"].get<std::vector<std::string>>();
    r.description = j["description"].get<std::string>();
    r.disease = j["disease"].get<int>();
    if (j.contains("modality")) r.modality = j["modality"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad field type: ") + e.what());
  }
  return r;
}

void save_jsonl(const std::filesystem::path& path, std::span<const Record> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : records) {
    std::string s = record_to_json(r);
    s += '\n';
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  if (!out) throw DataError("error writing " + path.string());
}

std::vector<Record> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Record> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(record_from_json(line, n));
  }
  return out;
}

Splits split_indices(std::size_t n, const SplitSpec& spec, std::uint64_t seed) {
  if (spec.train < 0 || spec.val < 0 || spec.test < 0 || std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9)
    throw ConfigError("split fractions must be non-negative and sum to 1");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(idx));
  auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * spec.train + 1e-9));
  auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * spec.val + 1e-9));
  n_val = std::min(n_val, n - n_train);
  Splits s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
               idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  return s;
}

void save_splits(const std::filesystem::path& path, const Splits& s) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  auto line = [&](const char* name, const std::vector<std::size_t>& v) {
    out << name;
    for (std::size_t i : v) out << ' ' << i;
    out << '\n';
  };
  line("train", s.train);
  line("val", s.val);
  line("test", s.test);
}

Splits load_splits(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  Splits s;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    std::istringstream ls(line);
    std::string name;
    if (!(ls >> name)) continue;
    std::vector<std::size_t>* dst = name == "train" ? &s.train : name == "val" ? &s.val : name == "test" ? &s.test : nullptr;
    if (!dst) throw DataError(path.string() + ":" + std::to_string(n) + ": unknown split '" + name + "'");
    std::size_t i;
    while (ls >> i) dst->push_back(i);
    if (!ls.eof()) throw DataError(path.string() + ":" + std::to_string(n) + ": bad index");
  }
  return s;
}

}  // namespace kwcap
