#pragma once

#include <span>
#include <string>
#include <vector>

#include "kwcap/attention.hpp"
#include "kwcap/text.hpp"

namespace kwcap {

// ---------------------------------------------------------------------------
// Hybrid-feature LSTM decoder. Each step consumes [e_t, k_final, x_t] where
// e_t = phi(I) W_d is the projected image and k_final the fused context; both
// are the same at every step.

struct LstmConfig {
  std::size_t image_dim = 64;    // F
  std::size_t embed_dim = 64;    // E
  std::size_t context_dim = 64;  // width of k_final
  std::size_t hidden = 256;      // H_LSTM
  std::size_t vocab = 0;
  bool bidirectional = true;

  std::size_t input_dim() const { return 2 * embed_dim + context_dim; }
};

/// Creates `prefix.image` (W_d, no bias), `prefix.fwd.{wx,wh,b}`,
/// `prefix.fwd.out` and, when bidirectional, the same under `prefix.bwd`.
/// Gate blocks are laid out [input, forget, candidate, output] along the
/// 4H axis.
void init_lstm_decoder(ParamStore& store, const std::string& prefix, const LstmConfig& cfg, Rng& rng);

struct LstmState {
  Var h;  // 1 x H
  Var c;  // 1 x H
};

LstmState lstm_zero_state(Tape& tape, std::size_t hidden);

struct LstmStep {
  LstmState state;
  Var logits;  // 1 x V
};

/// One cell update of direction `dir` ("fwd" or "bwd") of the decoder under
/// `prefix`, followed by the output projection.
LstmStep lstm_step(Binder& bind, const std::string& prefix, const std::string& dir, const LstmState& prev, Var e_t,
                   Var k_final, Var x_t);

/// e_t = pooled W_d.
Var lstm_image_embedding(Binder& bind, const std::string& prefix, Var pooled_image);

/// Teacher-forced pass over the valid prefix of `seq` (START ... END).
/// Forward logits predict ids[1..L-1] from ids[0..L-2]. When the decoder is
/// bidirectional, a reverse-direction LM reads the sequence right to left and
/// predicts ids[L-2..0]; it is a training signal only.
struct TeacherForced {
  Var logits;                         // (L-1) x V
  std::vector<TokenId> targets;       // L-1
  Var backward_logits;                // (L-1) x V, invalid when unidirectional
  std::vector<TokenId> backward_targets;
};

TeacherForced lstm_teacher_forced(Binder& bind, const std::string& prefix, const LstmConfig& cfg, Var embedding,
                                  Var e_t, Var k_final, const TokenSequence& seq);

/// Cached per-example quantities for incremental forward-direction decoding:
/// gates = x_t Wx_x + (const) + h Wh.
struct LstmDecodeContext {
  Tensor const_gates;  // 1 x 4H, [e_t, k_final] part of the input plus bias
};

LstmDecodeContext lstm_decode_context(Binder& bind, const std::string& prefix, const LstmConfig& cfg, Var e_t,
                                      Var k_final);

/// One forward-direction step from cached state; returns the new state and
/// logits as plain tensors. Uses the same arithmetic as the teacher-forced
/// pass, so scores agree with training up to rounding.
struct LstmInferenceState {
  Tensor h, c;
};
Tensor lstm_infer_step(Binder& bind, const std::string& prefix, const LstmConfig& cfg, const LstmDecodeContext& ctx,
                       Var embedding, TokenId token, LstmInferenceState& state);

// ---------------------------------------------------------------------------
// Contextual transformer decoder: post-LN blocks of masked multi-head
// self-attention, cross-attention over the fused memory and a FFN, with a
// fixed sinusoidal positional table.

struct TransformerConfig {
  std::size_t embed_dim = 64;  // E, token embedding width
  std::size_t hidden = 64;     // d_model
  std::size_t heads = 8;
  std::size_t ffn_hidden = 2048;
  std::size_t blocks = 2;
  std::size_t memory_dim = 64;
  std::size_t vocab = 0;
  std::size_t max_len = kMaxDescriptionLength;
  double dropout = 0.0;
};

void init_transformer_decoder(ParamStore& store, const std::string& prefix, const TransformerConfig& cfg, Rng& rng);

/// PE[pos][2i] = sin(pos / 10000^(2i/d)), PE[pos][2i+1] = cos(same).
Tensor sinusoidal_positions(std::size_t length, std::size_t width, std::size_t offset = 0);

/// Self-attention keys/values of already processed positions plus memory
/// keys/values, per block.
struct TransformerCache {
  std::size_t length = 0;
  std::vector<Tensor> self_k, self_v;
  std::vector<Tensor> mem_k, mem_v;
};

struct TransformerOutput {
  Var logits;                           // T x V, one row per input token
  std::vector<Tensor> cross_attention;  // per block, T x M averaged over heads
  std::vector<Tensor> self_attention;   // per block, T x (past + T)
  TransformerCache cache;               // state after consuming `tokens`
};

/// Runs `tokens` at positions cache->length ... through the decoder. Without
/// a cache the memory keys/values are projected from `memory`; with one they
/// are taken from it and `memory` is not read.
TransformerOutput transformer_forward(Binder& bind, const std::string& prefix, const TransformerConfig& cfg,
                                      Var embedding, std::span<const TokenId> tokens, Var memory, Mode mode = Mode::Eval,
                                      Rng* rng = nullptr, const TransformerCache* cache = nullptr);

/// Logits of the position after `prefix` (1 x V). `prefix` must start with
/// START and be at most max_len long.
Var transformer_decode_step(Binder& bind, const std::string& prefix, const TransformerConfig& cfg, Var embedding,
                            std::span<const TokenId> tokens, Var memory);

/// Mean over non-PAD targets of -log distributions[t][gold[t]].
/// `distributions` holds probabilities, one row per target.
Var cross_entropy_loss(Var distributions, std::span<const TokenId> gold);

}  // namespace kwcap
