#include "kwcap/decoders.hpp"

#include <cmath>

#include "kwcap/errors.hpp"

namespace kwcap {

namespace {

std::string dir_prefix(const std::string& prefix, const std::string& dir) { return prefix + "." + dir; }

void init_lstm_direction(ParamStore& store, const std::string& p, const LstmConfig& cfg, Rng& rng) {
  std::size_t h4 = 4 * cfg.hidden;
  store.add(p + ".wx", xavier_uniform(cfg.input_dim(), h4, rng));
  store.add(p + ".wh", xavier_uniform(cfg.hidden, h4, rng));
  store.add(p + ".b", Tensor::zeros({h4}));
  init_linear(store, p + ".out", cfg.hidden, cfg.vocab, rng);
}

// gates: 1 x 4H pre-activations in [i, f, g, o] order.
LstmState lstm_cell(Var gates, Var c_prev) {
  std::size_t h = gates.cols() / 4;
  Var i = sigmoid(slice_lastdim(gates, 0, h));
  Var f = sigmoid(slice_lastdim(gates, h, h));
  Var g = tanh(slice_lastdim(gates, 2 * h, h));
  Var o = sigmoid(slice_lastdim(gates, 3 * h, h));
  Var c = add(mul(f, c_prev), mul(i, g));
  return LstmState{mul(o, tanh(c)), c};
}

// [e_t, k_final] rows of Wx times the constant part of the input, plus bias.
Var lstm_const_gates(Binder& bind, const std::string& p, const LstmConfig& cfg, Var e_t, Var k_final) {
  Var wx = bind(p + ".wx");
  Var w_ek = slice_rows(wx, 0, cfg.embed_dim + cfg.context_dim);
  return add_row(matmul(concat_lastdim({e_t, k_final}), w_ek), bind(p + ".b"));
}

Var lstm_input_rows(Binder& bind, const std::string& p, const LstmConfig& cfg, Var x) {
  Var wx = bind(p + ".wx");
  return matmul(x, slice_rows(wx, cfg.embed_dim + cfg.context_dim, cfg.embed_dim));
}

// Unrolls one direction over `inputs`, returning (T x V) logits.
Var lstm_unroll(Binder& bind, const std::string& p, const LstmConfig& cfg, Var embedding, Var e_t, Var k_final,
                std::span<const TokenId> inputs) {
  Tape& tape = bind.tape();
  Var cg = lstm_const_gates(bind, p, cfg, e_t, k_final);
  Var xw = lstm_input_rows(bind, p, cfg, gather_rows(embedding, inputs));
  Var wh = bind(p + ".wh");
  LstmState s = lstm_zero_state(tape, cfg.hidden);
  std::vector<Var> hs;
  hs.reserve(inputs.size());
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Var gates = add(add(slice_rows(xw, t, 1), cg), matmul(s.h, wh));
    s = lstm_cell(gates, s.c);
    hs.push_back(s.h);
  }
  return apply_linear(bind, p + ".out", concat_rows(hs));
}

}  // namespace

void init_lstm_decoder(ParamStore& store, const std::string& prefix, const LstmConfig& cfg, Rng& rng) {
  if (cfg.vocab == 0) throw ConfigError("LSTM decoder needs a non-empty vocabulary");
  init_linear(store, prefix + ".image", cfg.image_dim, cfg.embed_dim, rng, /*with_bias=*/false);
  init_lstm_direction(store, dir_prefix(prefix, "fwd"), cfg, rng);
  if (cfg.bidirectional) init_lstm_direction(store, dir_prefix(prefix, "bwd"), cfg, rng);
}

LstmState lstm_zero_state(Tape& tape, std::size_t hidden) {
  return LstmState{tape.constant(Tensor::zeros({1, hidden})), tape.constant(Tensor::zeros({1, hidden}))};
}

LstmStep lstm_step(Binder& bind, const std::string& prefix, const std::string& dir, const LstmState& prev, Var e_t,
                   Var k_final, Var x_t) {
  std::string p = dir_prefix(prefix, dir);
  Var input = concat_lastdim({e_t, k_final, x_t});
  Var gates = add_row(add(matmul(input, bind(p + ".wx")), matmul(prev.h, bind(p + ".wh"))), bind(p + ".b"));
  LstmState s = lstm_cell(gates, prev.c);
  return LstmStep{s, apply_linear(bind, p + ".out", s.h)};
}

Var lstm_image_embedding(Binder& bind, const std::string& prefix, Var pooled_image) {
  return apply_linear(bind, prefix + ".image", pooled_image, /*with_bias=*/false);
}

TeacherForced lstm_teacher_forced(Binder& bind, const std::string& prefix, const LstmConfig& cfg, Var embedding,
                                  Var e_t, Var k_final, const TokenSequence& seq) {
  auto ids = seq.valid();
  if (ids.size() < 2) throw ContractError("teacher forcing needs at least START and END");
  std::size_t n = ids.size() - 1;
  TeacherForced out;
  out.targets.assign(ids.begin() + 1, ids.end());
  out.logits = lstm_unroll(bind, dir_prefix(prefix, "fwd"), cfg, embedding, e_t, k_final, ids.first(n));
  if (cfg.bidirectional) {
    std::vector<TokenId> rev(ids.rbegin(), ids.rend());
    out.backward_targets.assign(rev.begin() + 1, rev.end());
    out.backward_logits = lstm_unroll(bind, dir_prefix(prefix, "bwd"), cfg, embedding, e_t, k_final,
                                      std::span<const TokenId>(rev).first(n));
  }
  return out;
}

LstmDecodeContext lstm_decode_context(Binder& bind, const std::string& prefix, const LstmConfig& cfg, Var e_t,
                                      Var k_final) {
  return LstmDecodeContext{lstm_const_gates(bind, dir_prefix(prefix, "fwd"), cfg, e_t, k_final).value()};
}

Tensor lstm_infer_step(Binder& bind, const std::string& prefix, const LstmConfig& cfg, const LstmDecodeContext& ctx,
                       Var embedding, TokenId token, LstmInferenceState& state) {
  Tape& tape = bind.tape();
  std::string p = dir_prefix(prefix, "fwd");
  if (state.h.empty()) {
    state.h = Tensor::zeros({1, cfg.hidden});
    state.c = Tensor::zeros({1, cfg.hidden});
  }
  Var xw = lstm_input_rows(bind, p, cfg, gather_rows(embedding, std::span<const TokenId>(&token, 1)));
  Var gates = add(add(xw, tape.constant(ctx.const_gates)), matmul(tape.constant(state.h), bind(p + ".wh")));
  LstmState s = lstm_cell(gates, tape.constant(state.c));
  Var logits = apply_linear(bind, p + ".out", s.h);
  state.h = s.h.value();
  state.c = s.c.value();
  return logits.value();
}

// ---------------------------------------------------------------------------

void init_transformer_decoder(ParamStore& store, const std::string& prefix, const TransformerConfig& cfg, Rng& rng) {
  if (cfg.vocab == 0) throw ConfigError("transformer decoder needs a non-empty vocabulary");
  if (cfg.heads == 0 || cfg.hidden % cfg.heads != 0) {
    throw ConfigError(std::to_string(cfg.heads) + " attention heads do not divide hidden size " +
                      std::to_string(cfg.hidden));
  }
  std::size_t d = cfg.hidden;
  if (cfg.embed_dim != d) init_linear(store, prefix + ".in", cfg.embed_dim, d, rng, /*with_bias=*/false);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    std::string p = prefix + ".block" + std::to_string(b);
    for (const char* w : {".self.q", ".self.k", ".self.v", ".self.o", ".cross.q", ".cross.o"})
      init_linear(store, p + w, d, d, rng);
    init_linear(store, p + ".cross.k", cfg.memory_dim, d, rng);
    init_linear(store, p + ".cross.v", cfg.memory_dim, d, rng);
    init_layer_norm(store, p + ".ln1", d);
    init_layer_norm(store, p + ".ln2", d);
    init_layer_norm(store, p + ".ln3", d);
    init_ffn(store, p + ".ffn", d, cfg.ffn_hidden, d, rng);
  }
  init_linear(store, prefix + ".out", d, cfg.vocab, rng);
}

Tensor sinusoidal_positions(std::size_t length, std::size_t width, std::size_t offset) {
  Tensor pe({length, width});
  for (std::size_t t = 0; t < length; ++t) {
    double pos = static_cast<double>(offset + t);
    for (std::size_t i = 0; i < width; i += 2) {
      double angle = pos / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(width));
      pe.at(t, i) = std::sin(angle);
      if (i + 1 < width) pe.at(t, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

TransformerOutput transformer_forward(Binder& bind, const std::string& prefix, const TransformerConfig& cfg,
                                      Var embedding, std::span<const TokenId> tokens, Var memory, Mode mode, Rng* rng,
                                      const TransformerCache* cache) {
  Tape& tape = bind.tape();
  std::size_t offset = cache ? cache->length : 0;
  std::size_t t_len = tokens.size();
  if (t_len == 0) throw ContractError("transformer decoder: empty input");
  if (offset + t_len > cfg.max_len) {
    throw ContractError("transformer decoder: prefix of " + std::to_string(offset + t_len) +
                        " tokens exceeds max length " + std::to_string(cfg.max_len));
  }
  bool drop = mode == Mode::Train && cfg.dropout > 0.0;
  if (drop && !rng) throw ContractError("transformer decoder: dropout in training mode needs an rng");
  auto maybe_drop = [&](Var v) { return drop ? dropout(v, cfg.dropout, mode, *rng) : v; };

  TransformerOutput out;
  Var x = gather_rows(embedding, tokens);
  if (cfg.embed_dim != cfg.hidden) x = apply_linear(bind, prefix + ".in", x, /*with_bias=*/false);
  x = maybe_drop(add(x, tape.constant(sinusoidal_positions(t_len, cfg.hidden, offset))));

  Tensor mask = causal_mask(t_len, offset + t_len, offset);
  out.cache.length = offset + t_len;
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    std::string p = prefix + ".block" + std::to_string(b);
    Var q = apply_linear(bind, p + ".self.q", x);
    Var k = apply_linear(bind, p + ".self.k", x);
    Var v = apply_linear(bind, p + ".self.v", x);
    if (cache && offset > 0) {
      k = concat_rows({tape.constant(cache->self_k[b]), k});
      v = concat_rows({tape.constant(cache->self_v[b]), v});
    }
    Attention self = multi_head_attention(q, k, v, cfg.heads, &mask);
    x = apply_layer_norm(bind, p + ".ln1", add(x, maybe_drop(apply_linear(bind, p + ".self.o", self.output))));

    Var mk, mv;
    if (cache) {
      mk = tape.constant(cache->mem_k[b]);
      mv = tape.constant(cache->mem_v[b]);
    } else {
      mk = apply_linear(bind, p + ".cross.k", memory);
      mv = apply_linear(bind, p + ".cross.v", memory);
    }
    Attention cross = multi_head_attention(apply_linear(bind, p + ".cross.q", x), mk, mv, cfg.heads, nullptr);
    x = apply_layer_norm(bind, p + ".ln2", add(x, maybe_drop(apply_linear(bind, p + ".cross.o", cross.output))));
    x = apply_layer_norm(bind, p + ".ln3", add(x, maybe_drop(apply_ffn(bind, p + ".ffn", x))));

    out.self_attention.push_back(std::move(self.weights));
    out.cross_attention.push_back(std::move(cross.weights));
    out.cache.self_k.push_back(k.value());
    out.cache.self_v.push_back(v.value());
    out.cache.mem_k.push_back(mk.value());
    out.cache.mem_v.push_back(mv.value());
  }
  out.logits = apply_linear(bind, prefix + ".out", x);
  return out;
}

Var transformer_decode_step(Binder& bind, const std::string& prefix, const TransformerConfig& cfg, Var embedding,
                            std::span<const TokenId> tokens, Var memory) {
  if (tokens.empty() || tokens.front() != special::kStart) {
    throw ContractError("transformer_decode_step: prefix must start with START");
  }
  TransformerOutput out = transformer_forward(bind, prefix, cfg, embedding, tokens, memory);
  return slice_rows(out.logits, tokens.size() - 1, 1);
}

Var cross_entropy_loss(Var distributions, std::span<const TokenId> gold) {
  if (gold.size() != distributions.rows()) {
    throw DimensionError("cross_entropy_loss: " + std::to_string(gold.size()) + " targets for distributions " +
                         shape_string(distributions.shape()));
  }
  std::vector<std::int32_t> targets(gold.begin(), gold.end());
  std::size_t count = 0;
  for (auto& t : targets) {
    if (t == special::kPad) t = -1;
    else ++count;
  }
  if (count == 0) return distributions.tape().constant(Tensor::scalar(0.0));
  return scale(nll_from_probs(distributions, targets), 1.0 / static_cast<double>(count));
}

}  // namespace kwcap
