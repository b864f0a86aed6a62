#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "graph.hpp"

namespace swapvae {

template <typename T>
struct AdamState {
  T lr = T(1e-4);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  long long step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

// One bias-corrected Adam update using each parameter's accumulated gradient.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state) {
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->value.shape);
      state.v.emplace_back(p->value.shape);
    }
  }
  require(state.m.size() == params.size(), "adam state does not match parameter list");
  ++state.step;
  const T c1 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta1), static_cast<double>(state.step)));
  const T c2 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta2), static_cast<double>(state.step)));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<T>& p = *params[k];
    auto& m = state.m[k].data;
    auto& v = state.v[k].data;
    require(m.size() == p.value.size() && p.grad.size() == p.value.size(),
            "adam shape mismatch for parameter '" + p.name + "'");
    for (std::size_t i = 0; i < m.size(); ++i) {
      const T g = p.grad.data[i];
      m[i] = state.beta1 * m[i] + (T(1) - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (T(1) - state.beta2) * g * g;
      const T mhat = m[i] / c1;
      const T vhat = v[i] / c2;
      p.value.data[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

template <typename T>
void adam_step(std::vector<Parameter<T>*>& params, AdamState<T>& state) {
  adam_step(std::span<Parameter<T>* const>(params), state);
}

}  // namespace swapvae
