#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "kwcap/rng.hpp"
#include "kwcap/tape.hpp"
#include "kwcap/tensor.hpp"

namespace kwcap {

/// Named registry of every trainable tensor of a model. Iteration order is
/// the lexicographic name order, which fixes checkpoint layout and the
/// gradient reduction order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  std::vector<std::string> names() const;
  std::size_t size() const { return params_.size(); }
  std::size_t total_elements() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  bool operator==(const ParamStore& other) const { return params_ == other.params_; }

 private:
  std::map<std::string, Tensor> params_;
};

/// Gradient per parameter name.
using ParamGrads = std::map<std::string, Tensor>;

// Initialisers.
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);
Tensor embedding_init(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 0.02);

/// Binds parameters of a store onto one tape, once each, without copying.
class Binder {
 public:
  Binder(Tape& tape, const ParamStore& store, bool trainable) : tape_(tape), store_(store), trainable_(trainable) {}

  Var operator()(const std::string& name);
  Tape& tape() { return tape_; }
  bool trainable() const { return trainable_; }

  /// Gradients of every bound parameter; unbound parameters are absent.
  ParamGrads gradients(const Gradients& grads) const;

 private:
  Tape& tape_;
  const ParamStore& store_;
  bool trainable_;
  std::unordered_map<std::string, Var> bound_;
};

}  // namespace kwcap
