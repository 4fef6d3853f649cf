#include "kwcap/fusion.hpp"

#include <array>
#include <utility>

#include "kwcap/errors.hpp"

namespace kwcap {
namespace {

constexpr std::array<std::pair<FusionStrategy, std::string_view>, 7> kNames = {{
    {FusionStrategy::TransFuser, "transfuser"},
    {FusionStrategy::CoAttention, "coattention"},
    {FusionStrategy::Sum, "sum"},
    {FusionStrategy::Mul, "mul"},
    {FusionStrategy::Average, "average"},
    {FusionStrategy::Concat, "concat"},
    {FusionStrategy::Contextual, "contextual"},
}};

void init_attend_block(ParamStore& store, const std::string& prefix, const FusionConfig& cfg, Rng& rng) {
  init_linear(store, prefix + ".k", cfg.embed_dim, cfg.hidden, rng);
  init_linear(store, prefix + ".v", cfg.embed_dim, cfg.hidden, rng);
  init_layer_norm(store, prefix + ".ln", cfg.hidden);
  init_ffn(store, prefix + ".ffn", cfg.hidden, cfg.ffn_hidden, cfg.hidden, rng);
}

FusedContext attend_keywords(Binder& bind, const std::string& prefix, Var q, Var keyword_embeddings,
                             std::span<const bool> valid, FusionStrategy strategy) {
  if (valid.size() != keyword_embeddings.rows()) {
    throw DimensionError("fusion: " + std::to_string(valid.size()) + " validity flags for keyword embeddings " +
                         shape_string(keyword_embeddings.shape()));
  }
  FusedContext out;
  out.strategy = strategy;
  bool any_valid = false;
  for (bool b : valid) any_valid = any_valid || b;
  Var z;
  if (!any_valid) {
    out.image_only = true;
    z = bind.tape().constant(Tensor::zeros({q.rows(), q.cols()}));
    out.attention = Tensor::zeros({q.rows(), valid.size()});
  } else {
    Var k = apply_linear(bind, prefix + ".k", keyword_embeddings);
    Var v = apply_linear(bind, prefix + ".v", keyword_embeddings);
    Tensor mask = key_padding_mask(q.rows(), valid);
    Attention att = scaled_dot_attention(q, k, v, &mask, static_cast<double>(q.cols()));
    z = att.output;
    out.attention = std::move(att.weights);
  }
  Var normed = apply_layer_norm(bind, prefix + ".ln", add(q, z));
  out.k_final = apply_ffn(bind, prefix + ".ffn", normed);
  return out;
}

}  // namespace

std::string_view to_string(FusionStrategy s) {
  for (const auto& [k, name] : kNames)
    if (k == s) return name;
  return "unknown";
}

FusionStrategy parse_fusion(std::string_view name) {
  for (const auto& [k, n] : kNames)
    if (n == name) return k;
  throw ConfigError("unknown fusion strategy '" + std::string(name) + "'");
}

void init_transfuser(ParamStore& store, const std::string& prefix, const FusionConfig& cfg, Rng& rng) {
  init_linear(store, prefix + ".t", cfg.image_dim, cfg.hidden, rng, /*with_bias=*/false);
  init_attend_block(store, prefix, cfg, rng);
}

void init_coattention(ParamStore& store, const std::string& prefix, const FusionConfig& cfg, Rng& rng) {
  init_linear(store, prefix + ".q", cfg.image_dim, cfg.hidden, rng);
  init_attend_block(store, prefix, cfg, rng);
}

FusedContext transfuse(Binder& bind, const std::string& prefix, Var pooled_image, Var keyword_embeddings,
                       std::span<const bool> valid) {
  if (pooled_image.rows() != 1) {
    throw DimensionError("transfuse: expected one pooled image vector, got " + shape_string(pooled_image.shape()));
  }
  Var q = apply_linear(bind, prefix + ".t", pooled_image, /*with_bias=*/false);
  return attend_keywords(bind, prefix, q, keyword_embeddings, valid, FusionStrategy::TransFuser);
}

FusedContext coattend_patches(Binder& bind, const std::string& prefix, Var patch_features, Var keyword_embeddings,
                              std::span<const bool> valid) {
  if (patch_features.rows() < 1) throw ContractError("coattend_patches: need at least one patch");
  Var q = apply_linear(bind, prefix + ".q", patch_features);
  return attend_keywords(bind, prefix, q, keyword_embeddings, valid, FusionStrategy::CoAttention);
}

FusedContext fuse_baseline(FusionStrategy strategy, Var image_vec, Var keyword_vec) {
  FusedContext out;
  out.strategy = strategy;
  auto require_equal = [&](const char* what) {
    if (image_vec.shape() != keyword_vec.shape()) {
      throw DimensionError(std::string(what) + " fusion needs equal shapes, got " + shape_string(image_vec.shape()) +
                           " and " + shape_string(keyword_vec.shape()));
    }
  };
  switch (strategy) {
    case FusionStrategy::Sum:
      require_equal("sum");
      out.k_final = add(image_vec, keyword_vec);
      break;
    case FusionStrategy::Mul:
      require_equal("mul");
      out.k_final = mul(image_vec, keyword_vec);
      break;
    case FusionStrategy::Average:
      require_equal("average");
      out.k_final = scale(add(image_vec, keyword_vec), 0.5);
      break;
    case FusionStrategy::Concat:
    case FusionStrategy::Contextual:
      out.k_final = concat_lastdim({image_vec, keyword_vec});
      break;
    default:
      throw ContractError("fuse_baseline: '" + std::string(to_string(strategy)) + "' is not a baseline strategy");
  }
  return out;
}

}  // namespace kwcap
