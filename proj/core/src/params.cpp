#include "kwcap/params.hpp"

#include <cmath>

#include "kwcap/errors.hpp"

namespace kwcap {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  auto [it, inserted] = params_.insert_or_assign(name, std::move(value));
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t({fan_in, fan_out});
  for (double& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

Tensor embedding_init(std::size_t rows, std::size_t cols, Rng& rng, double stddev) {
  Tensor t({rows, cols});
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

Var Binder::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = tape_.leaf_ref(store_.get(name), trainable_);
  bound_.emplace(name, v);
  return v;
}

ParamGrads Binder::gradients(const Gradients& grads) const {
  ParamGrads out;
  for (const auto& [name, var] : bound_) out.emplace(name, grads.of(var));
  return out;
}

}  // namespace kwcap
