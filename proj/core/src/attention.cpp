#include "kwcap/attention.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "kwcap/errors.hpp"

namespace kwcap {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

Tensor causal_mask(std::size_t queries, std::size_t keys, std::size_t offset) {
  Tensor m({queries, keys});
  for (std::size_t i = 0; i < queries; ++i)
    for (std::size_t j = offset + i + 1; j < keys; ++j) m.at(i, j) = kNegInf;
  return m;
}

Tensor key_padding_mask(std::size_t queries, std::span<const bool> valid) {
  Tensor m({queries, valid.size()});
  for (std::size_t i = 0; i < queries; ++i)
    for (std::size_t j = 0; j < valid.size(); ++j)
      if (!valid[j]) m.at(i, j) = kNegInf;
  return m;
}

Attention scaled_dot_attention(Var q, Var k, Var v, const Tensor* mask, double d_k) {
  if (q.cols() != k.cols()) {
    throw DimensionError("attention: query " + shape_string(q.shape()) + " and key " + shape_string(k.shape()) +
                         " widths differ");
  }
  if (k.rows() != v.rows()) {
    throw DimensionError("attention: key " + shape_string(k.shape()) + " and value " + shape_string(v.shape()) +
                         " row counts differ");
  }
  Tape& tape = q.tape();
  Var scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(d_k));
  if (mask) {
    if (mask->rows() != scores.rows() || mask->cols() != scores.cols()) {
      throw DimensionError("attention: mask " + shape_string(mask->shape()) + " does not match scores " +
                           shape_string(scores.shape()));
    }
    scores = add(scores, tape.constant(*mask));
  }
  Var weights = softmax_lastdim(scores);
  return Attention{matmul(weights, v), weights.value()};
}

Attention multi_head_attention(Var q, Var k, Var v, std::size_t heads, const Tensor* mask) {
  std::size_t width = q.cols();
  if (heads == 0 || width % heads != 0 || k.cols() != width || v.cols() != width) {
    throw DimensionError("multi_head_attention: " + std::to_string(heads) + " heads do not divide widths " +
                         shape_string(q.shape()) + ", " + shape_string(k.shape()) + ", " + shape_string(v.shape()));
  }
  if (heads == 1) return scaled_dot_attention(q, k, v, mask, static_cast<double>(width));
  std::size_t dh = width / heads;
  std::vector<Var> outs;
  outs.reserve(heads);
  Tensor mean_weights;
  for (std::size_t h = 0; h < heads; ++h) {
    Attention a = scaled_dot_attention(slice_lastdim(q, h * dh, dh), slice_lastdim(k, h * dh, dh),
                                       slice_lastdim(v, h * dh, dh), mask, static_cast<double>(dh));
    outs.push_back(a.output);
    if (h == 0)
      mean_weights = std::move(a.weights);
    else
      mean_weights += a.weights;
  }
  mean_weights *= 1.0 / static_cast<double>(heads);
  return Attention{concat_lastdim(outs), std::move(mean_weights)};
}

Var mean_rows(Var x) {
  std::size_t n = x.rows();
  Tensor w = Tensor::filled({1, n}, 1.0 / static_cast<double>(n));
  return matmul(x.tape().constant(std::move(w)), x);
}

Var masked_mean_rows(Var x, std::span<const bool> valid) {
  if (valid.size() != x.rows()) {
    throw DimensionError("masked_mean_rows: " + std::to_string(valid.size()) + " flags for " +
                         shape_string(x.shape()));
  }
  std::size_t count = 0;
  for (bool b : valid) count += b ? 1 : 0;
  Tensor w({1, valid.size()});
  if (count > 0)
    for (std::size_t i = 0; i < valid.size(); ++i) w[i] = valid[i] ? 1.0 / static_cast<double>(count) : 0.0;
  return matmul(x.tape().constant(std::move(w)), x);
}

void init_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                 bool with_bias) {
  store.add(name + ".w", xavier_uniform(in, out, rng));
  if (with_bias) store.add(name + ".b", Tensor::zeros({out}));
}

void init_layer_norm(ParamStore& store, const std::string& name, std::size_t width) {
  store.add(name + ".gamma", Tensor::filled({width}, 1.0));
  store.add(name + ".beta", Tensor::zeros({width}));
}

Var apply_linear(Binder& bind, const std::string& name, Var x, bool with_bias) {
  Var y = matmul(x, bind(name + ".w"));
  return with_bias ? add_row(y, bind(name + ".b")) : y;
}

Var apply_layer_norm(Binder& bind, const std::string& name, Var x) {
  return layer_norm(x, bind(name + ".gamma"), bind(name + ".beta"));
}

void init_ffn(ParamStore& store, const std::string& name, std::size_t width, std::size_t hidden, std::size_t out,
              Rng& rng) {
  init_linear(store, name + ".fc1", width, hidden, rng);
  init_linear(store, name + ".fc2", hidden, out, rng);
}

Var apply_ffn(Binder& bind, const std::string& name, Var x) {
  return apply_linear(bind, name + ".fc2", relu(apply_linear(bind, name + ".fc1", x)));
}

}  // namespace kwcap
