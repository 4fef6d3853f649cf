#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "kwcap/datasynth.hpp"
#include "kwcap/fusion.hpp"

namespace kwcap {

enum class DecoderKind { Lstm, Transformer };
enum class Modality { ImageKeywords, ImageOnly, KeywordsOnly };
enum class KeywordSource { Expert, Predicted };

std::string_view to_string(DecoderKind d);
std::string_view to_string(Modality m);
std::string_view to_string(KeywordSource k);
DecoderKind parse_decoder(std::string_view s);
Modality parse_modality(std::string_view s);
KeywordSource parse_keyword_source(std::string_view s);

/// Every hyperparameter of a model and its training run. The JSON form uses
/// the member names as keys.
struct HyperConfig {
  // model
  FusionStrategy fusion = FusionStrategy::TransFuser;
  DecoderKind decoder = DecoderKind::Transformer;
  Modality modality = Modality::ImageKeywords;
  std::size_t patch_size = 8;
  /// Image inputs are (pixel / 255 - 0.5) * pixel_scale. The default keeps
  /// the stand-in image features on the scale of freshly initialised token
  /// embeddings; at scale 1 the image query swamps the keyword values.
  double pixel_scale = 0.1;
  std::size_t image_dim = 64;       // F = H_I
  std::size_t embed_dim = 300;      // E
  std::size_t fusion_hidden = 64;   // T_H
  std::size_t fusion_ffn = 256;
  std::size_t lstm_hidden = 256;
  bool lstm_bidirectional = true;
  std::size_t transformer_blocks = 2;
  std::size_t heads = 8;
  std::size_t transformer_ffn = 2048;
  std::size_t transformer_hidden = 64;
  std::size_t keyword_encoder_blocks = 2;
  std::size_t predictor_hidden = 64;
  double tau = 0.5;
  double dropout = 0.0;
  std::size_t max_len = 50;
  std::size_t max_keyword_len = 20;
  std::size_t min_count = 2;

  // training
  std::size_t batch = 64;
  std::size_t epochs = 10;
  std::size_t max_steps = 0;  // 0 = no cap
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // 0 disables clipping
  std::size_t predictor_epochs = 20;
  double predictor_lr = 1e-3;
  SplitSpec split = SplitSpec::sixty_twenty_twenty();

  // decoding
  std::size_t beam = 1;
  KeywordSource keywords = KeywordSource::Expert;

  std::uint64_t seed = 1;

  /// Throws ConfigError naming the offending key.
  void validate() const;

  std::string to_json() const;
  /// Keys absent from `json` keep the values of `base`; unknown keys throw.
  static HyperConfig from_json(std::string_view json, const HyperConfig& base);
  static HyperConfig from_json(std::string_view json) { return from_json(json, HyperConfig{}); }

  /// "lstm": TransFuser + LSTM, E=300, lr 1e-3, 2 epochs, 60/20/20.
  /// "coattention": co-attention + transformer, lr 1e-4, 10 epochs, 80/10/10.
  /// "desk": small widths that train in minutes on one core.
  static HyperConfig preset(std::string_view name);

  bool operator==(const HyperConfig&) const = default;
};

}  // namespace kwcap
