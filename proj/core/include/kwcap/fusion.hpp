#pragma once

#include <span>
#include <string>
#include <string_view>

#include "kwcap/attention.hpp"

namespace kwcap {

enum class FusionStrategy {
  TransFuser,   // pooled image query over keyword keys/values
  CoAttention,  // per-patch image queries over keyword keys/values
  Sum,
  Mul,
  Average,
  Concat,
  Contextual,  // contextualised keyword encoder output concatenated with the image vector
};

std::string_view to_string(FusionStrategy s);
FusionStrategy parse_fusion(std::string_view name);

struct FusionConfig {
  std::size_t image_dim = 64;   // F, width of the image features
  std::size_t embed_dim = 64;   // E, keyword embedding width
  std::size_t hidden = 64;      // T_H
  std::size_t ffn_hidden = 256;
};

/// Output of a fusion strategy, consumed by the decoders.
struct FusedContext {
  Var k_final;  // rows x width; one row except for co-attention (one per patch)
  FusionStrategy strategy = FusionStrategy::TransFuser;
  Tensor attention;          // query rows x keyword positions; empty for baselines
  bool image_only = false;   // no valid keyword was available
};

void init_transfuser(ParamStore& store, const std::string& prefix, const FusionConfig& cfg, Rng& rng);
void init_coattention(ParamStore& store, const std::string& prefix, const FusionConfig& cfg, Rng& rng);

/// Q = phi(I) W_t; K, V from keyword embeddings; Z = softmax(Q K^T / sqrt(T_H)) V;
/// k_final = FFN(LayerNorm(Q + Z)). No positional encoding, so the result
/// depends on the multiset of keyword embeddings only. Positions with
/// `valid[j] == false` are masked out; with no valid keyword, Z = 0 and the
/// context is flagged image-only.
FusedContext transfuse(Binder& bind, const std::string& prefix, Var pooled_image, Var keyword_embeddings,
                       std::span<const bool> valid);

/// Same block with one biased query per patch row (Q = v W_q + b_q).
FusedContext coattend_patches(Binder& bind, const std::string& prefix, Var patch_features, Var keyword_embeddings,
                              std::span<const bool> valid);

/// Sum, Mul and Average need equal widths; Concat (and Contextual, which is
/// a concatenation) does not.
FusedContext fuse_baseline(FusionStrategy strategy, Var image_vec, Var keyword_vec);

}  // namespace kwcap
