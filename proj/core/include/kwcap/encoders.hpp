#pragma once

#include <string>
#include <vector>

#include "kwcap/attention.hpp"
#include "kwcap/text.hpp"

namespace kwcap {

/// Grayscale image, row-major pixels.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  double at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
  bool operator==(const Image&) const = default;
};

/// Non-overlapping square patches, one flattened patch per row, in raster
/// order of the patch grid.
struct ImagePatches {
  Tensor patches;  // N x P
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t patch_size = 0;

  std::size_t grid_rows() const { return height / patch_size; }
  std::size_t grid_cols() const { return width / patch_size; }
};

ImagePatches extract_patches(const Image& image, std::size_t patch_size);

/// Per-patch features and their row mean.
struct ImageFeatures {
  Var features;  // N x H_I
  Var pooled;    // 1 x H_I
};

/// Stand-in image encoder: each flattened patch projected linearly,
/// patches @ weight + bias.
ImageFeatures patch_embed(Var patches, Var weight, Var bias);

/// Contextualised keyword encoder: a stack of masked self-attention blocks
/// followed by a fully connected reinforcement stack and masked mean pooling.
struct KeywordEncoderConfig {
  std::size_t embed_dim = 64;
  std::size_t hidden = 64;
  std::size_t ffn_hidden = 256;
  std::size_t blocks = 2;
};

void init_keyword_encoder(ParamStore& store, const std::string& prefix, const KeywordEncoderConfig& cfg, Rng& rng);

/// Single-head causal self-attention with biased Q/K/V projections and
/// d_k = hidden width.
Attention masked_self_attention(Binder& bind, const std::string& prefix, Var x);

/// LayerNorm(MaskAtten(x)) followed by the position-wise FFN.
Var encoder_block(Binder& bind, const std::string& prefix, Var x, Tensor* attention_out = nullptr);

struct ContextualKeywords {
  Var representation;  // 1 x hidden
  bool all_pad = false;
  std::vector<Tensor> attention;  // one per block
};

ContextualKeywords contextual_keyword_encode(Binder& bind, const std::string& prefix, const KeywordEncoderConfig& cfg,
                                             Var embedding_table, const TokenSequence& keywords);

}  // namespace kwcap
