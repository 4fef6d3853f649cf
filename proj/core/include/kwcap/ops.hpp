#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kwcap/rng.hpp"
#include "kwcap/tape.hpp"

namespace kwcap {

enum class Mode { Train, Eval };

// Linear algebra.
Var matmul(Var a, Var b);
Var transpose(Var a);

// Elementwise, equal shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);

/// a[rows x n] + b[n] broadcast over rows (bias add).
Var add_row(Var a, Var b);

Var relu(Var x);
Var sigmoid(Var x);
Var tanh(Var x);

/// Row-wise softmax over the last dimension. Rows whose logits are all -inf
/// map to all zeros.
Var softmax_lastdim(Var x);

/// Normalises each last-dimension slice with population variance; `eps`
/// goes inside the square root.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

Var concat_lastdim(std::span<const Var> parts);
inline Var concat_lastdim(std::initializer_list<Var> parts) {
  return concat_lastdim(std::span<const Var>(parts.begin(), parts.size()));
}
/// Stacks matrices with equal column counts on top of each other.
Var concat_rows(std::span<const Var> parts);
inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

Var slice_lastdim(Var x, std::size_t offset, std::size_t length);
Var slice_rows(Var x, std::size_t offset, std::size_t length);

/// Rows `table[ids[i]]`; gradient scatter-adds back into the table.
Var gather_rows(Var table, std::span<const std::int32_t> ids);

Var reshape(Var x, Shape shape);

/// Sum of all elements as a rank-0 tensor.
Var sum(Var x);

/// Inverted dropout. Eval mode and p == 0 are the identity.
Var dropout(Var x, double p, Mode mode, Rng& rng);

/// Sum over rows t with targets[t] >= 0 of -log softmax(logits[t])[targets[t]].
Var nll_from_logits(Var logits, std::span<const std::int32_t> targets);

/// Sum over rows t with targets[t] >= 0 of -log probs[t][targets[t]].
Var nll_from_probs(Var probs, std::span<const std::int32_t> targets);

/// Sum of elementwise binary cross-entropy with logits against 0/1 targets.
Var bce_with_logits(Var logits, const Tensor& targets);

/// x W + b with W stored [in x out].
inline Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }
inline Var linear(Var x, Var w) { return matmul(x, w); }

}  // namespace kwcap
