#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "ien/tensor.hpp"

namespace ien {

template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

struct AdamSettings {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct OptimizerState {
  AdamSettings settings;
  std::uint64_t step = 0;
  ParamMap<T> first_moment;
  ParamMap<T> second_moment;
};

// Bias-corrected adaptive-moment update. Every parameter needs a gradient
// of identical shape; moments are created on the first step.
template <typename T>
void adam_step(ParamMap<T>& params, const ParamMap<T>& grads, OptimizerState<T>& state) {
  if (grads.size() != params.size()) throw ShapeMismatch("adam_step: gradient set does not match parameters");
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end() || it->second.shape() != p.shape()) {
      throw ShapeMismatch("adam_step: gradient shape mismatch for '" + name + "'");
    }
  }
  state.step += 1;
  const AdamSettings& s = state.settings;
  const double correction1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    const Tensor<T>& g = grads.at(name);
    auto [m_it, m_new] = state.first_moment.try_emplace(name, p.shape());
    auto [v_it, v_new] = state.second_moment.try_emplace(name, p.shape());
    Tensor<T>& m = m_it->second;
    Tensor<T>& v = v_it->second;
    if (m.shape() != p.shape() || v.shape() != p.shape()) {
      throw ShapeMismatch("adam_step: moment shape mismatch for '" + name + "'");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = s.beta1 * m[i] + (1.0 - s.beta1) * gi;
      const double vi = s.beta2 * v[i] + (1.0 - s.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double m_hat = mi / correction1;
      const double v_hat = vi / correction2;
      p[i] = static_cast<T>(p[i] - s.learning_rate * m_hat / (std::sqrt(v_hat) + s.epsilon));
    }
  }
}

}  // namespace ien
