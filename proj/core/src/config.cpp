#include "kwcap/config.hpp"

#include <array>
#include <cmath>
#include <type_traits>
#include <utility>

#include "json.hpp"
#include "kwcap/errors.hpp"

namespace kwcap {

namespace {

using nlohmann::json;

template <typename E, std::size_t N>
std::string_view enum_name(const std::array<std::pair<E, std::string_view>, N>& table, E v) {
  for (const auto& [k, name] : table)
    if (k == v) return name;
  return "unknown";
}

template <typename E, std::size_t N>
E enum_parse(const std::array<std::pair<E, std::string_view>, N>& table, std::string_view s, const char* what) {
  for (const auto& [k, name] : table)
    if (name == s) return k;
  std::string options;
  for (const auto& [k, name] : table) options += (options.empty() ? "" : ", ") + std::string(name);
  throw ConfigError("unknown " + std::string(what) + " '" + std::string(s) + "' (expected one of " + options + ")");
}

constexpr std::array<std::pair<DecoderKind, std::string_view>, 2> kDecoders = {
    {{DecoderKind::Lstm, "lstm"}, {DecoderKind::Transformer, "transformer"}}};
constexpr std::array<std::pair<Modality, std::string_view>, 3> kModalities = {{{Modality::ImageKeywords, "image+keywords"},
                                                                               {Modality::ImageOnly, "image"},
                                                                               {Modality::KeywordsOnly, "keywords"}}};
constexpr std::array<std::pair<KeywordSource, std::string_view>, 2> kSources = {
    {{KeywordSource::Expert, "expert"}, {KeywordSource::Predicted, "predicted"}}};

// Calls f(key, member) for every field, in declaration order.
template <typename C, typename F>
void visit_fields(C& c, F&& f) {
  f("fusion", c.fusion);
  f("decoder", c.decoder);
  f("modality", c.modality);
  f("patch_size", c.patch_size);
  f("pixel_scale", c.pixel_scale);
  f("image_dim", c.image_dim);
  f("embed_dim", c.embed_dim);
  f("fusion_hidden", c.fusion_hidden);
  f("fusion_ffn", c.fusion_ffn);
  f("lstm_hidden", c.lstm_hidden);
  f("lstm_bidirectional", c.lstm_bidirectional);
  f("transformer_blocks", c.transformer_blocks);
  f("heads", c.heads);
  f("transformer_ffn", c.transformer_ffn);
  f("transformer_hidden", c.transformer_hidden);
  f("keyword_encoder_blocks", c.keyword_encoder_blocks);
  f("predictor_hidden", c.predictor_hidden);
  f("tau", c.tau);
  f("dropout", c.dropout);
  f("max_len", c.max_len);
  f("max_keyword_len", c.max_keyword_len);
  f("min_count", c.min_count);
  f("batch", c.batch);
  f("epochs", c.epochs);
  f("max_steps", c.max_steps);
  f("lr", c.lr);
  f("beta1", c.beta1);
  f("beta2", c.beta2);
  f("eps", c.eps);
  f("clip_norm", c.clip_norm);
  f("predictor_epochs", c.predictor_epochs);
  f("predictor_lr", c.predictor_lr);
  f("split", c.split);
  f("beam", c.beam);
  f("keywords", c.keywords);
  f("seed", c.seed);
}

json to_value(FusionStrategy v) { return std::string(to_string(v)); }
json to_value(DecoderKind v) { return std::string(to_string(v)); }
json to_value(Modality v) { return std::string(to_string(v)); }
json to_value(KeywordSource v) { return std::string(to_string(v)); }
json to_value(const SplitSpec& s) { return json::array({s.train, s.val, s.test}); }
template <typename T>
json to_value(const T& v) {
  return v;
}

[[noreturn]] void type_error(const std::string& key, const char* expected) {
  throw ConfigError("config key '" + key + "': expected " + expected);
}

void from_value(const std::string& key, const json& j, std::size_t& out) {
  if (!j.is_number_unsigned()) type_error(key, "a non-negative integer");
  out = j.get<std::size_t>();
}
static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed is parsed as size_t");
void from_value(const std::string& key, const json& j, double& out) {
  if (!j.is_number()) type_error(key, "a number");
  out = j.get<double>();
}
void from_value(const std::string& key, const json& j, bool& out) {
  if (!j.is_boolean()) type_error(key, "true or false");
  out = j.get<bool>();
}
template <typename E>
void from_enum(const std::string& key, const json& j, E& out, E (*parse)(std::string_view)) {
  if (!j.is_string()) type_error(key, "a string");
  out = parse(j.get<std::string>());
}
void from_value(const std::string& key, const json& j, FusionStrategy& out) { from_enum(key, j, out, parse_fusion); }
void from_value(const std::string& key, const json& j, DecoderKind& out) { from_enum(key, j, out, parse_decoder); }
void from_value(const std::string& key, const json& j, Modality& out) { from_enum(key, j, out, parse_modality); }
void from_value(const std::string& key, const json& j, KeywordSource& out) {
  from_enum(key, j, out, parse_keyword_source);
}
void from_value(const std::string& key, const json& j, SplitSpec& out) {
  if (!j.is_array() || j.size() != 3) type_error(key, "[train, val, test] fractions");
  for (const auto& v : j)
    if (!v.is_number()) type_error(key, "[train, val, test] fractions");
  out = SplitSpec{j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

std::string_view to_string(DecoderKind d) { return enum_name(kDecoders, d); }
std::string_view to_string(Modality m) { return enum_name(kModalities, m); }
std::string_view to_string(KeywordSource k) { return enum_name(kSources, k); }
DecoderKind parse_decoder(std::string_view s) { return enum_parse(kDecoders, s, "decoder"); }
Modality parse_modality(std::string_view s) { return enum_parse(kModalities, s, "modality"); }
KeywordSource parse_keyword_source(std::string_view s) { return enum_parse(kSources, s, "keyword source"); }

void HyperConfig::validate() const {
  auto positive = [](const char* key, std::size_t v) {
    if (v == 0) throw ConfigError("config key '" + std::string(key) + "' must be positive");
  };
  positive("patch_size", patch_size);
  positive("image_dim", image_dim);
  positive("embed_dim", embed_dim);
  positive("fusion_hidden", fusion_hidden);
  positive("fusion_ffn", fusion_ffn);
  positive("lstm_hidden", lstm_hidden);
  positive("transformer_blocks", transformer_blocks);
  positive("heads", heads);
  positive("transformer_ffn", transformer_ffn);
  positive("transformer_hidden", transformer_hidden);
  positive("keyword_encoder_blocks", keyword_encoder_blocks);
  positive("predictor_hidden", predictor_hidden);
  positive("max_keyword_len", max_keyword_len);
  positive("min_count", min_count);
  positive("batch", batch);
  positive("epochs", epochs);
  positive("beam", beam);
  if (transformer_hidden % heads != 0)
    throw ConfigError("config key 'heads': " + std::to_string(heads) + " does not divide transformer_hidden " +
                      std::to_string(transformer_hidden));
  if (!(pixel_scale > 0.0) || !std::isfinite(pixel_scale))
    throw ConfigError("config key 'pixel_scale' must be a positive number");
  if (max_len < 2) throw ConfigError("config key 'max_len' must be at least 2 (START and END)");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("config key 'tau' must lie in (0, 1)");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("config key 'dropout' must lie in [0, 1)");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("config key 'lr' must be a non-negative number");
  if (!(predictor_lr >= 0.0)) throw ConfigError("config key 'predictor_lr' must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("config key 'beta1' must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("config key 'beta2' must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("config key 'eps' must be positive");
  if (!(clip_norm >= 0.0)) throw ConfigError("config key 'clip_norm' must be non-negative");
  if (split.train < 0 || split.val < 0 || split.test < 0 ||
      std::abs(split.train + split.val + split.test - 1.0) > 1e-9)
    throw ConfigError("config key 'split': fractions must be non-negative and sum to 1");
}

std::string HyperConfig::to_json() const {
  json j = json::object();
  visit_fields(*this, [&](const char* key, const auto& v) { j[key] = to_value(v); });
  return j.dump(2);
}

HyperConfig HyperConfig::from_json(std::string_view text, const HyperConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  HyperConfig c = base;
  for (const auto& [key, value] : j.items()) {
    bool found = false;
    visit_fields(c, [&](const char* name, auto& member) {
      if (key == name) {
        from_value(key, value, member);
        found = true;
      }
    });
    if (!found) throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

HyperConfig HyperConfig::preset(std::string_view name) {
  HyperConfig c;
  if (name == "lstm") {
    c.fusion = FusionStrategy::TransFuser;
    c.decoder = DecoderKind::Lstm;
    c.embed_dim = 300;
    c.fusion_hidden = 64;
    c.lstm_hidden = 256;
    c.lr = 1e-3;
    c.epochs = 2;
    c.batch = 64;
    c.split = SplitSpec::sixty_twenty_twenty();
  } else if (name == "coattention") {
    c.fusion = FusionStrategy::CoAttention;
    c.decoder = DecoderKind::Transformer;
    c.embed_dim = 300;
    c.transformer_blocks = 2;
    c.heads = 8;
    c.transformer_ffn = 2048;
    c.transformer_hidden = 64;
    c.lr = 1e-4;
    c.epochs = 10;
    c.batch = 64;
    c.split = SplitSpec::eighty_ten_ten();
  } else if (name == "desk") {
    c.embed_dim = 64;
    c.image_dim = 64;
    c.fusion_hidden = 64;
    c.fusion_ffn = 128;
    c.lstm_hidden = 128;
    c.transformer_hidden = 64;
    c.transformer_ffn = 256;
    c.heads = 4;
    c.batch = 16;
    c.epochs = 10;
    c.lr = 1e-3;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "' (expected lstm, coattention or desk)");
  }
  c.validate();
  return c;
}

}  // namespace kwcap
