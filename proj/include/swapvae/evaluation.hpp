#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "adam.hpp"
#include "checkpoint.hpp"
#include "metrics.hpp"
#include "model.hpp"

namespace swapvae {

// Mean per-vertex Euclidean error of posterior-mean reconstructions, in data units.
template <typename T>
std::vector<double> reconstruction_errors(SpiralVae<T>& vae, const ModelAssets& assets,
                                          const std::vector<VertexEmbedding>& meshes, std::size_t chunk = 16) {
  std::vector<double> errors;
  const auto n = static_cast<std::size_t>(assets.topology.num_vertices());
  for (std::size_t start = 0; start < meshes.size(); start += chunk) {
    const std::size_t count = std::min(chunk, meshes.size() - start);
    Tensor<T> x({count * n, 3});
    for (std::size_t b = 0; b < count; ++b) {
      const auto xn = assets.to_model_space(meshes[start + b]);
      for (std::size_t i = 0; i < n * 3; ++i) x.data[b * n * 3 + i] = static_cast<T>(xn.values()[i]);
    }
    Graph<T> g(false);
    auto vo = vae.encode(g, g.constant(std::move(x)), count);
    const auto& out = vae.decode(g, vo.mu, count).value();
    for (std::size_t b = 0; b < count; ++b) {
      VertexEmbedding y(static_cast<Index>(n));
      for (std::size_t i = 0; i < n * 3; ++i) y.values()[i] = static_cast<double>(out.data[b * n * 3 + i]);
      errors.push_back(mean_vertex_distance(assets.from_model_space(y), meshes[start + b]));
    }
  }
  return errors;
}

// Decodes `count` latents (row-major, count x k) into data-space meshes.
template <typename T>
std::vector<VertexEmbedding> decode_batch(SpiralVae<T>& vae, const ModelAssets& assets, const std::vector<double>& z,
                                          std::size_t count) {
  const auto k = static_cast<std::size_t>(vae.latent_size());
  require(z.size() == count * k, "latent batch size mismatch");
  const auto n = static_cast<std::size_t>(assets.topology.num_vertices());
  std::vector<VertexEmbedding> out;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < count; start += kChunk) {
    const std::size_t m = std::min(kChunk, count - start);
    Tensor<T> zt({m, k});
    for (std::size_t i = 0; i < m * k; ++i) zt.data[i] = static_cast<T>(z[start * k + i]);
    const auto x = vae.decode_values(zt);
    for (std::size_t b = 0; b < m; ++b) {
      VertexEmbedding y(static_cast<Index>(n));
      for (std::size_t i = 0; i < n * 3; ++i) y.values()[i] = static_cast<double>(x.data[b * n * 3 + i]);
      out.push_back(assets.from_model_space(y));
    }
  }
  return out;
}

// Decode of `base` with coordinate i replaced by v.
template <typename T>
VertexEmbedding traverse(SpiralVae<T>& vae, const ModelAssets& assets, std::vector<double> base, int index, double value) {
  if (index < 0 || index >= vae.latent_size()) throw DataError("latent index " + std::to_string(index) + " out of range");
  if (base.empty()) base.assign(static_cast<std::size_t>(vae.latent_size()), 0.0);
  require(base.size() == static_cast<std::size_t>(vae.latent_size()), "latent length mismatch");
  base[static_cast<std::size_t>(index)] = value;
  return decode_batch(vae, assets, base, 1).front();
}

struct TraversalMatrix {
  int latents = 0;
  int features = 0;
  double bound = 3.0;
  std::vector<double> values;                // latents x features
  std::vector<std::vector<double>> fields;   // per latent, per-vertex distance

  double at(int i, int f) const { return values[static_cast<std::size_t>(i * features + f)]; }
};

// Entry (i, w): mean distance over feature w's vertices between the decodes
// of z = 0 with z_i = -bound and z_i = +bound.
template <typename T>
TraversalMatrix traversal_matrix(SpiralVae<T>& vae, const ModelAssets& assets, double bound = 3.0) {
  const int k = vae.latent_size();
  const auto& seg = assets.segmentation;
  TraversalMatrix tm;
  tm.latents = k;
  tm.features = seg.num_features();
  tm.bound = bound;
  std::vector<double> z(static_cast<std::size_t>(2 * k * k), 0.0);
  for (int i = 0; i < k; ++i) {
    z[static_cast<std::size_t>((2 * i) * k + i)] = -bound;
    z[static_cast<std::size_t>((2 * i + 1) * k + i)] = bound;
  }
  const auto meshes = decode_batch(vae, assets, z, static_cast<std::size_t>(2 * k));
  const Index n = assets.topology.num_vertices();
  tm.values.assign(static_cast<std::size_t>(k * tm.features), 0.0);
  for (int i = 0; i < k; ++i) {
    const auto& lo = meshes[static_cast<std::size_t>(2 * i)];
    const auto& hi = meshes[static_cast<std::size_t>(2 * i + 1)];
    std::vector<double> field(static_cast<std::size_t>(n));
    std::vector<double> sum(static_cast<std::size_t>(tm.features), 0.0);
    std::vector<int> count(static_cast<std::size_t>(tm.features), 0);
    for (Index v = 0; v < n; ++v) {
      field[static_cast<std::size_t>(v)] = (hi.point(v) - lo.point(v)).norm();
      sum[static_cast<std::size_t>(seg.label(v))] += field[static_cast<std::size_t>(v)];
      ++count[static_cast<std::size_t>(seg.label(v))];
    }
    for (int f = 0; f < tm.features; ++f) tm.values[static_cast<std::size_t>(i * tm.features + f)] = sum[f] / count[f];
    tm.fields.push_back(std::move(field));
  }
  return tm;
}

struct DisentanglementScore {
  std::vector<double> ratios;  // per latent variable
  double threshold = 3.0;
  double pass_fraction = 0.0;
};

// ratio_i = tm[i, own] / max over other features of tm[i, .].
inline DisentanglementScore disentanglement_score(const TraversalMatrix& tm, const LatentPartition& part,
                                                  double threshold = 3.0) {
  require(part.total() == tm.latents && part.features() == tm.features, "partition does not match traversal matrix");
  DisentanglementScore s;
  s.threshold = threshold;
  int pass = 0;
  for (int i = 0; i < tm.latents; ++i) {
    const int own = part.feature_of(i);
    double other = 0.0;
    for (int f = 0; f < tm.features; ++f) {
      if (f != own) other = std::max(other, tm.at(i, f));
    }
    const double num = tm.at(i, own);
    double r = 0.0;
    if (num > 0) r = other > 0 ? num / other : std::numeric_limits<double>::infinity();
    s.ratios.push_back(r);
    if (r >= threshold) ++pass;
  }
  s.pass_fraction = tm.latents ? static_cast<double>(pass) / tm.latents : 0.0;
  return s;
}

struct ReconstructionReport {
  double mean = 0;
  double max = 0;
  std::vector<double> per_mesh;
};

inline ReconstructionReport summarize_errors(std::vector<double> errors) {
  ReconstructionReport r;
  r.per_mesh = std::move(errors);
  if (r.per_mesh.empty()) return r;
  for (double e : r.per_mesh) {
    r.mean += e;
    r.max = std::max(r.max, e);
  }
  r.mean /= static_cast<double>(r.per_mesh.size());
  return r;
}

template <typename T>
ReconstructionReport reconstruction_report(SpiralVae<T>& vae, const ModelAssets& assets,
                                           const std::vector<VertexEmbedding>& test) {
  return summarize_errors(reconstruction_errors(vae, assets, test));
}

struct GenerationOptions {
  std::size_t samples = 100;
  std::size_t max_points = 2048;      // per-mesh vertex subsample, shared across meshes
  std::size_t emd_max_points = 512;
  int jsd_resolution = 28;
  bool with_emd = true;
};

struct GenerationReport {
  ReconstructionReport reconstruction;
  double diversity = 0;
  double jsd = 0;
  SetMetrics cd;
  SetMetrics emd;
  std::size_t samples = 0;
  std::size_t references = 0;
  std::size_t points = 0;
  std::size_t emd_points = 0;
  bool shared_subsample = true;
};

inline std::vector<std::size_t> shared_subsample(std::size_t n, std::size_t max_points, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n <= max_points) return idx;
  for (std::size_t i = 0; i < max_points; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
  idx.resize(max_points);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<double> take_points(const VertexEmbedding& x, const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  out.reserve(idx.size() * 3);
  for (auto i : idx) {
    for (int c = 0; c < 3; ++c) out.push_back(x(static_cast<Index>(i), c));
  }
  return out;
}

// Set metrics between two mesh collections; reconstruction is left empty.
inline GenerationReport compare_collections(const std::vector<VertexEmbedding>& generated,
                                            const std::vector<VertexEmbedding>& reference, Rng& rng,
                                            const GenerationOptions& opt) {
  if (reference.empty()) throw DataError("empty reference set");
  if (generated.empty()) throw DataError("no generated samples");
  GenerationReport r;
  r.samples = generated.size();
  r.references = reference.size();
  r.diversity = diversity(generated, rng);
  const auto idx = shared_subsample(static_cast<std::size_t>(reference.front().rows()), opt.max_points, rng);
  r.points = idx.size();
  std::vector<std::vector<double>> g, ref;
  for (const auto& x : generated) g.push_back(take_points(x, idx));
  for (const auto& x : reference) ref.push_back(take_points(x, idx));
  r.jsd = occupancy_jsd(g, ref, opt.jsd_resolution);
  const SetDistance cd = [](PointSpan a, PointSpan b) { return chamfer(a, b); };
  r.cd = set_metrics(cross_distances(g, ref, cd), self_distances(g, cd), self_distances(ref, cd), g.size(), ref.size());
  if (opt.with_emd) {
    EmdOptions eo;
    eo.max_points = opt.emd_max_points;
    eo.seed = rng();
    r.emd_points = std::min(r.points, opt.emd_max_points);
    const SetDistance em = [eo](PointSpan a, PointSpan b) { return swapvae::emd(a, b, eo); };
    r.emd = set_metrics(cross_distances(g, ref, em), self_distances(g, em), self_distances(ref, em), g.size(), ref.size());
  }
  return r;
}

// Samples z ~ N(0, I), decodes, and compares against `reference` (the test
// split); reconstruction errors use posterior means of the references.
template <typename T>
GenerationReport generation_report(SpiralVae<T>& vae, const ModelAssets& assets,
                                   const std::vector<VertexEmbedding>& reference, Rng& rng,
                                   const GenerationOptions& opt = {}) {
  if (reference.empty()) throw DataError("empty reference set");
  const auto k = static_cast<std::size_t>(vae.latent_size());
  std::vector<double> z(opt.samples * k);
  for (auto& v : z) v = standard_normal(rng);
  const auto generated = decode_batch(vae, assets, z, opt.samples);
  GenerationReport r = compare_collections(generated, reference, rng, opt);
  r.reconstruction = reconstruction_report(vae, assets, reference);
  return r;
}

inline nlohmann::json to_json_report(const GenerationReport& r) {
  auto sm = [](const SetMetrics& m) { return nlohmann::json{{"mmd", m.mmd}, {"cov", m.coverage}, {"nna_delta", m.nna}}; };
  nlohmann::json j = {{"reconstruction", {{"mean", r.reconstruction.mean}, {"max", r.reconstruction.max}}},
                      {"diversity", r.diversity},
                      {"jsd", r.jsd},
                      {"cd", sm(r.cd)},
                      {"samples", r.samples},
                      {"references", r.references},
                      {"points", r.points},
                      {"shared_subsample", r.shared_subsample}};
  if (r.emd_points) {
    j["emd"] = sm(r.emd);
    j["emd_points"] = r.emd_points;
  }
  return j;
}

namespace ops {

// Chamfer distance between x [N,3] and a fixed point set y [M,3]; gradient
// flows to x through the nearest-neighbour assignment of the forward pass.
template <typename T>
Var<T> chamfer(Var<T> x, std::shared_ptr<const std::vector<double>> y) {
  Graph<T>& g = *x.graph;
  const auto& xv = x.value();
  check(xv.cols() == 3 && y->size() % 3 == 0 && !y->empty() && xv.rows() > 0, "chamfer", "expects nonempty [N,3] sets");
  const std::size_t n = xv.rows(), m = y->size() / 3;
  std::vector<double> xd(xv.data.begin(), xv.data.end());
  auto nn_x = std::make_shared<std::vector<std::size_t>>(n);
  auto nn_y = std::make_shared<std::vector<std::size_t>>(m);
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      const double d = sq_dist(xd, i, *y, j);
      if (d < best) {
        best = d;
        (*nn_x)[i] = j;
      }
    }
    sx += best;
  }
  for (std::size_t j = 0; j < m; ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      const double d = sq_dist(*y, j, xd, i);
      if (d < best) {
        best = d;
        (*nn_y)[j] = i;
      }
    }
    sy += best;
  }
  Tensor<T> out({1}, static_cast<T>(sx / static_cast<double>(n) + sy / static_cast<double>(m)));
  const int ix = x.id;
  return g.make_node(std::move(out), {ix}, [ix, y, nn_x, nn_y, n, m](Graph<T>& g, int self) {
    const T go = g.grad(self).data[0];
    const auto& xv = g.value(ix);
    auto& gx = g.grad_buffer(ix).data;
    const T cx = T(2) * go / static_cast<T>(n), cy = T(2) * go / static_cast<T>(m);
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) gx[3 * i + c] += cx * (xv.data[3 * i + c] - static_cast<T>((*y)[3 * (*nn_x)[i] + c]));
    }
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t i = (*nn_y)[j];
      for (int c = 0; c < 3; ++c) gx[3 * i + c] += cy * (xv.data[3 * i + c] - static_cast<T>((*y)[3 * j + c]));
    }
  });
}

}  // namespace ops

struct FitSchedule {
  int landmark_iterations = 80;
  int chamfer_iterations = 170;
  double lr = 5e-3;
};

struct FitResult {
  std::vector<double> z;
  std::vector<double> loss_trace;   // landmark MSE, then Chamfer
  std::vector<double> error_trace;  // mean distance to the closest target point, per iteration
  std::vector<double> final_errors; // per generated vertex
  double final_error = 0;
  VertexEmbedding mesh;
};

// Mean over generated vertices of the distance to the closest target point.
inline std::vector<double> closest_point_errors(const VertexEmbedding& x, PointSpan target) {
  const std::size_t m = point_count(target);
  std::vector<double> out(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) best = std::min(best, sq_dist(x.values(), static_cast<std::size_t>(i), target, j));
    out[static_cast<std::size_t>(i)] = std::sqrt(best);
  }
  return out;
}

// Fits z (from 0) so the generated mesh matches a target given in data units:
// Adam on landmark MSE first, then on Chamfer distance to all target points.
template <typename T>
FitResult fit_target(SpiralVae<T>& vae, const ModelAssets& assets, const std::vector<Index>& landmarks,
                     PointSpan target_landmarks, PointSpan target_points, const FitSchedule& schedule = {}) {
  const Index n = assets.topology.num_vertices();
  for (Index l : landmarks) {
    if (l < 0 || l >= n) throw DataError("landmark index " + std::to_string(l) + " out of range");
  }
  require(point_count(target_landmarks) == landmarks.size(), "target landmark count does not match landmark list");
  require(point_count(target_points) > 0, "empty target point set");
  const auto k = static_cast<std::size_t>(vae.latent_size());
  const auto nn = static_cast<std::size_t>(n);

  // Data-space output is x = x_model * scale + offset per coordinate.
  Tensor<T> scale({nn, 3}), offset({nn, 3});
  for (std::size_t i = 0; i < nn * 3; ++i) {
    scale.data[i] = static_cast<T>(assets.normalized ? assets.stats.std[i] : 1.0);
    offset.data[i] = static_cast<T>(assets.normalized ? assets.stats.mean[i] : 0.0);
  }
  Tensor<T> lm_target({landmarks.size(), 3});
  for (std::size_t i = 0; i < lm_target.size(); ++i) lm_target.data[i] = static_cast<T>(target_landmarks[i]);
  auto points = std::make_shared<const std::vector<double>>(target_points.begin(), target_points.end());

  Parameter<T> z("z", Tensor<T>({1, k}));
  std::vector<Parameter<T>*> params{&z};
  AdamState<T> adam;
  adam.lr = static_cast<T>(schedule.lr);
  FitResult r;
  const int total = schedule.landmark_iterations + schedule.chamfer_iterations;
  for (int it = 0; it < total; ++it) {
    z.zero_grad();
    Graph<T> g(false);
    Var<T> xm = vae.decode(g, g.variable(z), 1);
    Var<T> x = ops::add(ops::mul(xm, g.constant(scale)), g.constant(offset));
    Var<T> loss;
    if (it < schedule.landmark_iterations) {
      Var<T> d = ops::sub(ops::gather_rows(x, std::vector<Index>(landmarks)), g.constant(lm_target));
      loss = ops::scale(ops::sum(ops::square(d)), T(1) / static_cast<T>(landmarks.size()));
    } else {
      loss = ops::chamfer(x, points);
    }
    const double lv = static_cast<double>(loss.value().data[0]);
    if (!std::isfinite(lv)) throw NumericalError("non-finite loss while fitting");
    VertexEmbedding cur(n);
    for (std::size_t i = 0; i < nn * 3; ++i) cur.values()[i] = static_cast<double>(x.value().data[i]);
    const auto errs = closest_point_errors(cur, target_points);
    r.loss_trace.push_back(lv);
    r.error_trace.push_back(std::accumulate(errs.begin(), errs.end(), 0.0) / static_cast<double>(errs.size()));
    g.backward(loss);
    adam_step(params, adam);
  }
  r.z.assign(z.value.data.begin(), z.value.data.end());
  r.mesh = decode_batch(vae, assets, r.z, 1).front();
  r.final_errors = closest_point_errors(r.mesh, target_points);
  r.final_error = std::accumulate(r.final_errors.begin(), r.final_errors.end(), 0.0) /
                  static_cast<double>(r.final_errors.size());
  return r;
}

}  // namespace swapvae
