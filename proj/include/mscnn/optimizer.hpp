#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mscnn/tensor.hpp"

namespace mscnn {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// SGD with momentum. Weight decay is folded into the gradient before the
/// momentum update (coupled L2, not decoupled decay):
///   g' = g + wd * p;  v = mu * v - lr * g';  p = p + v
template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> velocity;
  double lr = 1e-6;
  double momentum = 0.9;
  double weight_decay = 0.0005;

  OptimizerState() = default;
  OptimizerState(std::span<Tensor<T>* const> params, double lr_, double momentum_, double weight_decay_)
      : lr(lr_), momentum(momentum_), weight_decay(weight_decay_) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be finite and >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
      throw std::invalid_argument("weight decay must be finite and >= 0");
    velocity.reserve(params.size());
    for (const auto* p : params) velocity.emplace_back(p->shape());
  }
};

/// Applies one update in place. `names` (optional) labels parameters in
/// diagnostics. Throws NonFiniteError before touching any state when a
/// gradient holds NaN or Inf.
template <typename T>
void sgd_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, OptimizerState<T>& state,
              std::span<const std::string> names = {}) {
  if (params.size() != grads.size() || params.size() != state.velocity.size())
    throw ShapeError("sgd_step: " + std::to_string(params.size()) + " params, " + std::to_string(grads.size()) +
                     " grads, " + std::to_string(state.velocity.size()) + " velocities");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string label = i < names.size() ? names[i] : "parameter " + std::to_string(i);
    detail::require_same_shape(grads[i].shape(), params[i]->shape(), ("sgd_step grad of " + label).c_str());
    detail::require_same_shape(state.velocity[i].shape(), params[i]->shape(),
                               ("sgd_step velocity of " + label).c_str());
    if (!grads[i].all_finite()) throw NonFiniteError("sgd_step: non-finite gradient in " + label);
  }
  const T lr = static_cast<T>(state.lr);
  const T mu = static_cast<T>(state.momentum);
  const T wd = static_cast<T>(state.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i]->data();
    T* v = state.velocity[i].data();
    const T* g = grads[i].data();
    for (std::size_t j = 0; j < params[i]->size(); ++j) {
      const T decayed = g[j] + wd * p[j];
      v[j] = mu * v[j] - lr * decayed;
      p[j] += v[j];
    }
  }
}

}  // namespace mscnn
