#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "plka/rng.hpp"
#include "plka/tensor.hpp"

namespace plka {

// Ordered name -> leaf tensor table. Entries share nodes with the owning
// parameter structs, so in-place updates through either are visible to both.
template <std::floating_point T>
class ParamTable {
 public:
  void add(std::string name, Tensor<T> t) {
    for (const auto& [n, _] : entries_) {
      if (n == name) throw Error("duplicate parameter name " + name);
    }
    entries_.emplace_back(std::move(name), std::move(t));
  }

  const Tensor<T>& get(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
      if (n == name) return t;
    }
    throw Error("unknown parameter " + name);
  }

  bool contains(const std::string& name) const {
    for (const auto& [n, _] : entries_) {
      if (n == name) return true;
    }
    return false;
  }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  // L2 norm of gradients over every entry whose name starts with prefix.
  double grad_norm(const std::string& prefix) const {
    double acc = 0;
    for (const auto& [n, t] : entries_) {
      if (n.rfind(prefix, 0) != 0) continue;
      for (const T g : t.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(acc);
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

// Zero-mean normal with std sqrt(2 / fan_in).
template <std::floating_point T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(normal(rng, 0.0, stddev));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); used for convolution biases so that
// constant input regions still map to nonzero feature vectors.
template <std::floating_point T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(uniform(rng, -bound, bound));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <std::floating_point T>
Tensor<T> zero_param(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

}  // namespace plka
