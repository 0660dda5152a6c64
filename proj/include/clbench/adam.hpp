#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clbench/encoder.hpp"

namespace clbench {

struct AdamConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <std::floating_point T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::size_t step = 0;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <std::floating_point T>
void check_finite(std::span<const T> grads, const std::string& name) {
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i]))
      throw NonFiniteGradient("adam: non-finite gradient in " + name + " at index " + std::to_string(i));
}

}  // namespace detail

/// One bias-corrected Adam update of `params` in place.
template <std::floating_point T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, const AdamConfig& cfg) {
  if (grads.size() != params.size()) throw std::invalid_argument("adam_step: gradient size mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), T(0));
    state.v.assign(params.size(), T(0));
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("adam_step: state size mismatch");
  detail::check_finite(grads, "parameter");
  ++state.step;
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  const T c1 = T(1) - std::pow(b1, T(state.step));
  const T c2 = T(1) - std::pow(b2, T(state.step));
  const T lr = T(cfg.learning_rate), eps = T(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * grads[i];
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * grads[i] * grads[i];
    const T m_hat = state.m[i] / c1;
    const T v_hat = state.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

/// Adam over a parameter list, reading each tensor's accumulated grad.
template <std::floating_point T>
class Adam {
 public:
  Adam(ParameterList<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg), states_(params_.size()) {}

  /// Validates every gradient before touching any parameter, so a
  /// non-finite gradient aborts the whole step.
  void step() {
    for (const auto& p : params_) detail::check_finite(p.tensor.grad(), p.name);
    for (std::size_t i = 0; i < params_.size(); ++i)
      adam_step<T>(params_[i].tensor.mutable_values(), params_[i].tensor.grad(), states_[i], cfg_);
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  const AdamConfig& config() const { return cfg_; }
  const std::vector<AdamState<T>>& states() const { return states_; }

 private:
  ParameterList<T> params_;
  AdamConfig cfg_;
  std::vector<AdamState<T>> states_;
};

}  // namespace clbench
