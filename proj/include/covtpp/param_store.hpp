#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <utility>

#include "covtpp/errors.hpp"
#include "covtpp/tensor.hpp"

namespace covtpp {

struct Parameter {
  Tensor value;
  Tensor grad;
};

/// Named learnable tensors with gradient slots. Iteration order is the
/// lexicographic name order, which fixes serialization and optimizer order.
class ParamStore {
 public:
  using Map = std::map<std::string, Parameter>;

  Parameter& add(const std::string& name, Tensor init) {
    if (params_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    Tensor grad(init.rows(), init.cols());
    auto [it, ok] = params_.emplace(name, Parameter{std::move(init), std::move(grad)});
    return it->second;
  }

  Parameter& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.contains(name); }
  std::size_t size() const { return params_.size(); }

  std::size_t value_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.grad.fill(0.0);
  }

  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }
  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }

  /// Element-wise equality of names, shapes and values (gradients ignored).
  bool same_values(const ParamStore& other) const {
    if (params_.size() != other.params_.size()) return false;
    auto a = params_.begin();
    auto b = other.params_.begin();
    for (; a != params_.end(); ++a, ++b) {
      if (a->first != b->first || !(a->second.value == b->second.value)) return false;
    }
    return true;
  }

 private:
  Map params_;
};

/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight matrix.
template <class Rng>
Tensor init_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(rows, cols);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace covtpp
