#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "graph.hpp"
#include "rng.hpp"

namespace swapvae {

struct GradCheckOptions {
  double step = 1e-6;
  std::size_t samples_per_tensor = 50;
  std::uint64_t seed = 0;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double denominator_floor = 1e-3;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
};

// Central-difference check of analytic gradients. `loss` builds the scalar
// loss on a fresh graph from the current parameter values.
inline GradCheckResult grad_check(const std::function<Var<double>(Graph<double>&)>& loss,
                                  const std::vector<Parameter<double>*>& params,
                                  const GradCheckOptions& options = {}) {
  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g;
    g.backward(loss(g));
  }
  auto evaluate = [&] {
    Graph<double> g;
    return loss(g).value().data[0];
  };
  Rng rng(options.seed);
  GradCheckResult result;
  for (auto* p : params) {
    std::vector<std::size_t> coords(p->value.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > options.samples_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.samples_per_tensor);
    }
    for (std::size_t i : coords) {
      const double orig = p->value.data[i];
      p->value.data[i] = orig + options.step;
      const double up = evaluate();
      p->value.data[i] = orig - options.step;
      const double down = evaluate();
      p->value.data[i] = orig;
      const double numeric = (up - down) / (2.0 * options.step);
      const double analytic = p->grad.data[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.denominator_floor});
      result.max_relative_error = std::max(result.max_relative_error, std::abs(analytic - numeric) / denom);
      ++result.coordinates;
    }
  }
  return result;
}

}  // namespace swapvae
