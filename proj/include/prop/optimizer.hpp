#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <string>

#include "prop/autodiff.hpp"
#include "prop/errors.hpp"
#include "prop/tensor.hpp"

namespace prop {

using ParamMap = std::map<std::string, Tensor>;

/// Plain SGD with decoupled weight decay and a cosine-annealed learning rate
/// that reaches zero at `total_steps`.
class SgdCosineOptimizer {
 public:
  SgdCosineOptimizer(std::size_t total_steps, real initial_lr = real(0.03), real weight_decay = real(0.0005))
      : initial_lr_(initial_lr), weight_decay_(weight_decay), total_steps_(total_steps) {
    if (total_steps_ == 0) throw ConfigError("optimizer: total_steps must be positive");
    if (!(initial_lr_ >= 0) || !(weight_decay_ >= 0)) {
      throw ConfigError("optimizer: learning rate and weight decay must be non-negative");
    }
  }

  real lr(std::size_t step) const {
    if (step >= total_steps_) return 0;
    const double ratio = static_cast<double>(step) / static_cast<double>(total_steps_);
    return static_cast<real>(static_cast<double>(initial_lr_) * 0.5 * (1.0 + std::cos(std::numbers::pi * ratio)));
  }

  real current_lr() const { return lr(step_); }
  std::size_t current_step() const noexcept { return step_; }
  std::size_t total_steps() const noexcept { return total_steps_; }
  real initial_lr() const noexcept { return initial_lr_; }
  real weight_decay() const noexcept { return weight_decay_; }

  /// p <- p - lr(step) * (g + weight_decay * p) for every parameter, then
  /// advances the step counter. The key sets of params and grads must match.
  void step(ParamMap& params, const ad::Gradients& grads) {
    if (params.size() != grads.size()) throw ContractError("sgd_step: parameter and gradient sets differ in size");
    for (const auto& [name, g] : grads) {
      auto it = params.find(name);
      if (it == params.end()) throw ContractError("sgd_step: gradient for unknown parameter '" + name + "'");
      if (it->second.shape() != g.shape()) throw ContractError("sgd_step: shape mismatch for '" + name + "'");
    }
    const real rate = current_lr();
    if (rate != 0) {
      for (auto& [name, p] : params) {
        const Tensor& g = grads.at(name);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= rate * (g[i] + weight_decay_ * p[i]);
      }
    }
    ++step_;
  }

 private:
  real initial_lr_;
  real weight_decay_;
  std::size_t total_steps_;
  std::size_t step_ = 0;
};

}  // namespace prop
