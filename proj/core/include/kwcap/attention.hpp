#pragma once

#include <span>
#include <string>

#include "kwcap/ops.hpp"
#include "kwcap/params.hpp"

namespace kwcap {

/// Attention output plus the post-softmax weights (queries x keys). For
/// multi-head attention the weights are the mean over heads.
struct Attention {
  Var output;
  Tensor weights;
};

/// Additive mask: 0 where query i may attend to key j, -inf elsewhere.
/// Query i sits at absolute position `offset + i` and sees keys 0..offset+i.
Tensor causal_mask(std::size_t queries, std::size_t keys, std::size_t offset = 0);

/// Additive mask hiding keys whose `valid` flag is false from every query.
Tensor key_padding_mask(std::size_t queries, std::span<const bool> valid);

/// softmax(q k^T / sqrt(d_k) + mask) v. `mask` may be null.
Attention scaled_dot_attention(Var q, Var k, Var v, const Tensor* mask, double d_k);

/// Splits q, k, v column-wise into `heads` groups, attends per head with
/// d_k = head width, and concatenates the head outputs.
Attention multi_head_attention(Var q, Var k, Var v, std::size_t heads, const Tensor* mask);

/// Mean over rows, as a 1 x cols matrix.
Var mean_rows(Var x);

/// Mean over the rows flagged valid; all-invalid input yields zeros.
Var masked_mean_rows(Var x, std::span<const bool> valid);

// Parameter naming helpers shared by the model modules.
void init_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                 bool with_bias = true);
void init_layer_norm(ParamStore& store, const std::string& name, std::size_t width);
Var apply_linear(Binder& bind, const std::string& name, Var x, bool with_bias = true);
Var apply_layer_norm(Binder& bind, const std::string& name, Var x);

/// Two-layer position-wise network max(0, x W1 + b1) W2 + b2.
void init_ffn(ParamStore& store, const std::string& name, std::size_t width, std::size_t hidden, std::size_t out,
              Rng& rng);
Var apply_ffn(Binder& bind, const std::string& name, Var x);

}  // namespace kwcap
