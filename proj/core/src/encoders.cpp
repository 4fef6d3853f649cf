#include "kwcap/encoders.hpp"

#include "kwcap/errors.hpp"

namespace kwcap {

ImagePatches extract_patches(const Image& image, std::size_t patch_size) {
  if (patch_size == 0 || image.height % patch_size != 0 || image.width % patch_size != 0) {
    throw ConfigError("image of " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                      " is not divisible into " + std::to_string(patch_size) + "x" + std::to_string(patch_size) +
                      " patches");
  }
  if (image.pixels.size() != image.height * image.width) {
    throw DataError("image pixel count does not match its dimensions");
  }
  std::size_t gr = image.height / patch_size, gc = image.width / patch_size;
  std::size_t p = patch_size * patch_size;
  Tensor patches({gr * gc, p});
  for (std::size_t pr = 0; pr < gr; ++pr)
    for (std::size_t pc = 0; pc < gc; ++pc) {
      double* out = patches.data().data() + (pr * gc + pc) * p;
      for (std::size_t r = 0; r < patch_size; ++r)
        for (std::size_t c = 0; c < patch_size; ++c)
          out[r * patch_size + c] = image.at(pr * patch_size + r, pc * patch_size + c);
    }
  return ImagePatches{std::move(patches), image.height, image.width, patch_size};
}

ImageFeatures patch_embed(Var patches, Var weight, Var bias) {
  Var features = add_row(matmul(patches, weight), bias);
  return ImageFeatures{features, mean_rows(features)};
}

void init_keyword_encoder(ParamStore& store, const std::string& prefix, const KeywordEncoderConfig& cfg, Rng& rng) {
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    std::string p = prefix + ".block" + std::to_string(b);
    std::size_t in = b == 0 ? cfg.embed_dim : cfg.hidden;
    init_linear(store, p + ".q", in, cfg.hidden, rng);
    init_linear(store, p + ".k", in, cfg.hidden, rng);
    init_linear(store, p + ".v", in, cfg.hidden, rng);
    init_layer_norm(store, p + ".ln", cfg.hidden);
    init_ffn(store, p + ".ffn", cfg.hidden, cfg.ffn_hidden, cfg.hidden, rng);
  }
  init_linear(store, prefix + ".reinforce1", cfg.hidden, cfg.hidden, rng);
  init_linear(store, prefix + ".reinforce2", cfg.hidden, cfg.hidden, rng);
}

Attention masked_self_attention(Binder& bind, const std::string& prefix, Var x) {
  Var q = apply_linear(bind, prefix + ".q", x);
  Var k = apply_linear(bind, prefix + ".k", x);
  Var v = apply_linear(bind, prefix + ".v", x);
  Tensor mask = causal_mask(x.rows(), x.rows());
  return scaled_dot_attention(q, k, v, &mask, static_cast<double>(q.cols()));
}

Var encoder_block(Binder& bind, const std::string& prefix, Var x, Tensor* attention_out) {
  Attention att = masked_self_attention(bind, prefix, x);
  if (attention_out) *attention_out = att.weights;
  Var normed = apply_layer_norm(bind, prefix + ".ln", att.output);
  return apply_ffn(bind, prefix + ".ffn", normed);
}

ContextualKeywords contextual_keyword_encode(Binder& bind, const std::string& prefix, const KeywordEncoderConfig& cfg,
                                             Var embedding_table, const TokenSequence& keywords) {
  ContextualKeywords out;
  Tape& tape = bind.tape();
  if (keywords.true_length == 0) {
    out.all_pad = true;
    out.representation = tape.constant(Tensor::zeros({1, cfg.hidden}));
    return out;
  }
  // PAD only ever trails the valid prefix, so under the causal mask the valid
  // positions never see it; encoding the prefix alone gives the same rows.
  Var x = gather_rows(embedding_table, keywords.valid());
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    Tensor att;
    x = encoder_block(bind, prefix + ".block" + std::to_string(b), x, &att);
    out.attention.push_back(std::move(att));
  }
  x = relu(apply_linear(bind, prefix + ".reinforce1", x));
  x = apply_linear(bind, prefix + ".reinforce2", x);
  out.representation = mean_rows(x);
  return out;
}

}  // namespace kwcap
