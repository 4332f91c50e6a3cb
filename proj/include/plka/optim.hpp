#pragma once

#include <map>
#include <string>
#include <vector>

#include "plka/params.hpp"

namespace plka {

// SGD with heavy-ball momentum: v = mu v + c g + wd theta; theta -= lr v,
// where c = min(1, clip_norm / ||g||) over all parameters (clip_norm 0
// disables clipping).
template <std::floating_point T>
class SgdMomentum {
 public:
  SgdMomentum(double learning_rate, double momentum, double clip_norm = 0.0, double weight_decay = 0.0)
      : lr_(learning_rate), mu_(momentum), clip_(clip_norm), wd_(weight_decay) {}

  // Returns the gradient norm before clipping.
  double step(ParamTable<T>& params) {
    const double norm = params.grad_norm("");
    const T c = clip_ > 0.0 && norm > clip_ ? static_cast<T>(clip_ / norm) : T(1);
    for (auto& [name, tensor] : params) {
      auto& v = velocity_[name];
      if (v.empty()) v.assign(tensor.numel(), T(0));
      auto data = tensor.mutable_data();
      const auto grad = tensor.grad();
      const T mu = static_cast<T>(mu_), lr = static_cast<T>(lr_), wd = static_cast<T>(wd_);
      for (std::size_t i = 0; i < data.size(); ++i) {
        const T g = grad.empty() ? T(0) : c * grad[i];
        v[i] = mu * v[i] + g + wd * data[i];
        data[i] -= lr * v[i];
      }
    }
    return norm;
  }

  double learning_rate() const { return lr_; }
  double momentum() const { return mu_; }
  double clip_norm() const { return clip_; }
  double weight_decay() const { return wd_; }
  const std::map<std::string, std::vector<T>>& velocity() const { return velocity_; }
  std::map<std::string, std::vector<T>>& velocity() { return velocity_; }

 private:
  double lr_;
  double mu_;
  double clip_;
  double wd_;
  std::map<std::string, std::vector<T>> velocity_;
};

}  // namespace plka
