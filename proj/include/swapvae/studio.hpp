#pragma once

#include <cmath>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "adam.hpp"
#include "checkpoint.hpp"
#include "evaluation.hpp"

namespace swapvae {

struct ManipulationRequest {
  std::vector<Index> vertices;          // S
  std::vector<double> targets;          // |S| x 3, data units
  std::vector<int> restrict_features;   // empty = whole latent
  int iterations = 50;
  double lr = 0.1;
};

struct ManipulationResult {
  std::vector<double> z;
  VertexEmbedding mesh;
  std::vector<double> loss_trace;
};

inline void validate_request(const ManipulationRequest& req, Index vertices, int features) {
  if (req.vertices.empty()) throw DataError("manipulation needs at least one selected vertex");
  if (req.targets.size() != req.vertices.size() * 3) throw DataError("targets must hold 3 values per selected vertex");
  for (Index v : req.vertices) {
    if (v < 0 || v >= vertices) throw DataError("vertex index " + std::to_string(v) + " out of range");
  }
  for (double t : req.targets) {
    if (!std::isfinite(t)) throw DataError("non-finite target coordinate");
  }
  for (int f : req.restrict_features) {
    if (f < 0 || f >= features) throw DataError("feature id " + std::to_string(f) + " out of range");
  }
  if (req.iterations < 0) throw DataError("iterations must be >= 0");
  if (!(req.lr > 0)) throw DataError("lr must be > 0");
}

// Adam on |S o G(z) - Y|^2 in data units. Gradient entries outside the
// restricted subsets are zeroed before every step, and those entries of the
// returned z are copied from the input, so they are unchanged bitwise.
template <typename T>
ManipulationResult direct_manipulate(SpiralVae<T>& vae, const ModelAssets& assets, const std::vector<double>& z0,
                                     const ManipulationRequest& req) {
  const auto& part = vae.partition();
  validate_request(req, assets.topology.num_vertices(), part.features());
  const auto k = static_cast<std::size_t>(vae.latent_size());
  require(z0.size() == k, "latent has " + std::to_string(z0.size()) + " values, model expects " + std::to_string(k));

  std::vector<char> free(k, req.restrict_features.empty() ? 1 : 0);
  for (int f : req.restrict_features) {
    for (auto c : part.columns(f)) free[c] = 1;
  }
  // Selected rows in data units: x = x_model * scale + offset.
  const std::size_t s = req.vertices.size();
  Tensor<T> y({s, 3}), scale({s, 3}), offset({s, 3});
  for (std::size_t i = 0; i < s; ++i) {
    for (int c = 0; c < 3; ++c) {
      const std::size_t idx = static_cast<std::size_t>(req.vertices[i]) * 3 + static_cast<std::size_t>(c);
      const std::size_t o = i * 3 + static_cast<std::size_t>(c);
      y.data[o] = static_cast<T>(req.targets[o]);
      scale.data[o] = static_cast<T>(assets.normalized ? assets.stats.std[idx] : 1.0);
      offset.data[o] = static_cast<T>(assets.normalized ? assets.stats.mean[idx] : 0.0);
    }
  }

  Parameter<T> z("z", Tensor<T>({1, k}));
  for (std::size_t i = 0; i < k; ++i) z.value.data[i] = static_cast<T>(z0[i]);
  std::vector<Parameter<T>*> params{&z};
  AdamState<T> adam;
  adam.lr = static_cast<T>(req.lr);
  ManipulationResult r;
  for (int it = 0; it < req.iterations; ++it) {
    z.zero_grad();
    Graph<T> g(false);
    Var<T> x = vae.decode(g, g.variable(z), 1);
    Var<T> picked = ops::add(ops::mul(ops::gather_rows(x, std::vector<Index>(req.vertices)), g.constant(scale)),
                             g.constant(offset));
    Var<T> d = ops::sub(picked, g.constant(y));
    Var<T> loss = ops::sum(ops::square(d));
    const double lv = static_cast<double>(loss.value().data[0]);
    if (!std::isfinite(lv)) throw NumericalError("non-finite manipulation loss");
    r.loss_trace.push_back(lv);
    g.backward(loss);
    for (std::size_t i = 0; i < k; ++i) {
      if (!free[i]) z.grad.data[i] = T(0);
    }
    adam_step(params, adam);
  }
  r.z = z0;
  for (std::size_t i = 0; i < k; ++i) {
    if (free[i] && req.iterations > 0) r.z[i] = static_cast<double>(z.value.data[i]);
  }
  r.mesh = decode_batch(vae, assets, r.z, 1).front();
  return r;
}

// Latents along the path from z_a to z_b. Full mode: z_t = (1 - t) z_a + t z_b
// for t = s / (steps - 1). Subset mode: step s replaces the first s listed
// subsets of z_a with z_b's values (steps = |subset| + 1 gives the full sequence).
inline std::vector<std::vector<double>> interpolation_path(const std::vector<double>& za, const std::vector<double>& zb,
                                                           int steps, const std::optional<std::vector<int>>& subset,
                                                           const LatentPartition& part) {
  require(za.size() == zb.size() && za.size() == static_cast<std::size_t>(part.total()), "latent length mismatch");
  if (steps < 2) throw DataError("interpolation needs steps >= 2");
  std::vector<std::vector<double>> out;
  if (!subset) {
    for (int s = 0; s < steps; ++s) {
      const double t = static_cast<double>(s) / (steps - 1);
      std::vector<double> z(za.size());
      for (std::size_t i = 0; i < z.size(); ++i) {
        if (s == 0) z[i] = za[i];
        else if (s == steps - 1) z[i] = zb[i];
        else z[i] = (1.0 - t) * za[i] + t * zb[i];
      }
      out.push_back(std::move(z));
    }
    return out;
  }
  for (int f : *subset) part.check_feature(f);
  std::vector<double> z = za;
  out.push_back(z);
  for (int s = 1; s < steps; ++s) {
    // Replace evenly spread prefixes so the last step always holds every listed subset.
    const std::size_t upto = (subset->size() * static_cast<std::size_t>(s)) / static_cast<std::size_t>(steps - 1);
    for (std::size_t q = 0; q < upto; ++q) {
      for (auto c : part.columns((*subset)[q])) z[c] = zb[c];
    }
    out.push_back(z);
  }
  return out;
}

// One editing session: current latent plus a bounded undo stack. Mutations
// must hold the session lock; a busy session is reported to the caller.
struct Session {
  std::string id;
  std::vector<double> z;
  std::deque<std::vector<double>> undo;
  std::mutex lock;

  static constexpr std::size_t kUndoLimit = 64;

  void push(std::vector<double> next) {
    undo.push_back(std::move(z));
    if (undo.size() > kUndoLimit) undo.pop_front();
    z = std::move(next);
  }
  bool pop() {
    if (undo.empty()) return false;
    z = std::move(undo.back());
    undo.pop_back();
    return true;
  }
};

class SessionStore {
 public:
  std::shared_ptr<Session> create(std::vector<double> z) {
    std::lock_guard<std::mutex> g(mutex_);
    auto s = std::make_shared<Session>();
    s->id = "s" + std::to_string(++counter_);
    s->z = std::move(z);
    sessions_[s->id] = s;
    return s;
  }
  std::shared_ptr<Session> find(const std::string& id) const {
    std::lock_guard<std::mutex> g(mutex_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

 private:
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  unsigned long long counter_ = 0;
};

}  // namespace swapvae
