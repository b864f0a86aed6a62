#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <vector>

#include "errors.hpp"
#include "mesh.hpp"
#include "rng.hpp"

namespace swapvae {

// Point sets are flat xyz arrays.
using PointSpan = std::span<const double>;

inline std::size_t point_count(PointSpan p) {
  require(p.size() % 3 == 0, "point array length is not a multiple of 3");
  return p.size() / 3;
}

inline double sq_dist(PointSpan a, std::size_t i, PointSpan b, std::size_t j) {
  const double dx = a[3 * i] - b[3 * j], dy = a[3 * i + 1] - b[3 * j + 1], dz = a[3 * i + 2] - b[3 * j + 2];
  return dx * dx + dy * dy + dz * dz;
}

namespace detail {

inline double mean_nearest(PointSpan a, PointSpan b) {
  const std::size_t na = point_count(a), nb = point_count(b);
  double total = 0;
  for (std::size_t i = 0; i < na; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < nb; ++j) best = std::min(best, sq_dist(a, i, b, j));
    total += best;
  }
  return total / static_cast<double>(na);
}

}  // namespace detail

// Squared-distance Chamfer: mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2.
inline double chamfer(PointSpan a, PointSpan b) {
  if (point_count(a) == 0 || point_count(b) == 0) throw DataError("chamfer needs nonempty point sets");
  return detail::mean_nearest(a, b) + detail::mean_nearest(b, a);
}

// Minimum-cost perfect matching on a square cost matrix (row-major n x n).
// Returns assignment[row] = column. Shortest augmenting path with potentials.
inline std::vector<int> hungarian(const std::vector<double>& cost, int n) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = 0;
      const double* row = &cost[static_cast<std::size_t>(i0 - 1) * n];
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = row[j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assignment(n);
  for (int j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
  return assignment;
}

struct EmdOptions {
  std::size_t max_points = 512;
  std::uint64_t seed = 0;  // subsampling stream when above max_points
};

// (1/n) min over matchings of sum |a - sigma(a)|. Sets larger than
// max_points are subsampled with one shared index set.
inline double emd(PointSpan a, PointSpan b, const EmdOptions& opt = {}) {
  const std::size_t na = point_count(a), nb = point_count(b);
  if (na != nb) throw DataError("emd needs equal-size point sets");
  if (na == 0) throw DataError("emd needs nonempty point sets");
  std::vector<std::size_t> idx(na);
  std::iota(idx.begin(), idx.end(), 0);
  if (na > opt.max_points) {
    Rng rng(opt.seed);
    for (std::size_t i = 0; i < opt.max_points; ++i) std::swap(idx[i], idx[i + uniform_index(rng, na - i)]);
    idx.resize(opt.max_points);
    std::sort(idx.begin(), idx.end());
  }
  const int n = static_cast<int>(idx.size());
  std::vector<double> cost(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) cost[static_cast<std::size_t>(i) * n + j] = std::sqrt(sq_dist(a, idx[i], b, idx[j]));
  }
  const auto match = hungarian(cost, n);
  double total = 0;
  for (int i = 0; i < n; ++i) total += cost[static_cast<std::size_t>(i) * n + match[i]];
  return total / n;
}

// Pairwise distance matrix between two collections, row-major |a| x |b|.
using SetDistance = std::function<double(PointSpan, PointSpan)>;

inline std::vector<double> cross_distances(const std::vector<std::vector<double>>& a,
                                           const std::vector<std::vector<double>>& b, const SetDistance& d) {
  std::vector<double> out(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) out[i * b.size() + j] = d(a[i], b[j]);
  }
  return out;
}

// Symmetric matrix for one collection; the distance is evaluated once per pair.
inline std::vector<double> self_distances(const std::vector<std::vector<double>>& a, const SetDistance& d) {
  const std::size_t n = a.size();
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) out[i * n + j] = out[j * n + i] = d(a[i], a[j]);
  }
  return out;
}

// Metrics over precomputed distances: gen x ref, gen x gen and ref x ref.
struct SetMetrics {
  double mmd = 0;      // mean over references of min distance to a generated sample
  double coverage = 0; // % of references that are some generated sample's nearest reference
  double nna = 0;      // |1-NN leave-one-out accuracy - 50|, in %
};

inline SetMetrics set_metrics(const std::vector<double>& gen_ref, const std::vector<double>& gen_gen,
                              const std::vector<double>& ref_ref, std::size_t ng, std::size_t nr) {
  if (nr == 0) throw DataError("empty reference set");
  if (ng == 0) throw DataError("empty generated set");
  SetMetrics m;
  double total = 0;
  for (std::size_t r = 0; r < nr; ++r) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < ng; ++g) best = std::min(best, gen_ref[g * nr + r]);
    total += best;
  }
  m.mmd = total / static_cast<double>(nr);

  std::set<std::size_t> covered;
  for (std::size_t g = 0; g < ng; ++g) {
    std::size_t arg = 0;
    for (std::size_t r = 1; r < nr; ++r) {
      if (gen_ref[g * nr + r] < gen_ref[g * nr + arg]) arg = r;
    }
    covered.insert(arg);
  }
  m.coverage = 100.0 * static_cast<double>(covered.size()) / static_cast<double>(nr);

  // Union order: generated first, then references; ties go to the lower index.
  const std::size_t n = ng + nr;
  auto dist = [&](std::size_t i, std::size_t j) {
    if (i < ng && j < ng) return gen_gen[i * ng + j];
    if (i >= ng && j >= ng) return ref_ref[(i - ng) * nr + (j - ng)];
    if (i < ng) return gen_ref[i * nr + (j - ng)];
    return gen_ref[j * nr + (i - ng)];
  };
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t arg = n;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = dist(i, j);
      if (arg == n || d < best) {
        best = d;
        arg = j;
      }
    }
    if (arg < n && (arg < ng) == (i < ng)) ++correct;
  }
  m.nna = std::abs(100.0 * static_cast<double>(correct) / static_cast<double>(n) - 50.0);
  return m;
}

// Mean of mean per-vertex distances over floor(n/2) random disjoint pairs.
inline double diversity(const std::vector<VertexEmbedding>& meshes, Rng& rng) {
  if (meshes.size() < 2) return 0.0;
  std::vector<std::size_t> order(meshes.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i + 1 < order.size(); ++i) std::swap(order[i], order[i + uniform_index(rng, order.size() - i)]);
  const std::size_t pairs = meshes.size() / 2;
  double total = 0;
  for (std::size_t p = 0; p < pairs; ++p) total += mean_vertex_distance(meshes[order[2 * p]], meshes[order[2 * p + 1]]);
  return total / static_cast<double>(pairs);
}

// Jensen-Shannon divergence (natural log) between the voxel-occupancy
// distributions of two collections. Points are mapped into the unit sphere
// with one shared center and scale, and each cloud counts a voxel once.
inline double occupancy_jsd(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                            int resolution = 28) {
  require(!a.empty() && !b.empty(), "jsd needs nonempty collections");
  double lo[3] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                  std::numeric_limits<double>::infinity()};
  double hi[3] = {-lo[0], -lo[1], -lo[2]};
  for (const auto* set : {&a, &b}) {
    for (const auto& cloud : *set) {
      for (std::size_t i = 0; i < cloud.size(); ++i) {
        lo[i % 3] = std::min(lo[i % 3], cloud[i]);
        hi[i % 3] = std::max(hi[i % 3], cloud[i]);
      }
    }
  }
  const double center[3] = {(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, (lo[2] + hi[2]) / 2};
  double radius = 0;
  for (const auto* set : {&a, &b}) {
    for (const auto& cloud : *set) {
      for (std::size_t i = 0; i < cloud.size(); i += 3) {
        const double dx = cloud[i] - center[0], dy = cloud[i + 1] - center[1], dz = cloud[i + 2] - center[2];
        radius = std::max(radius, std::sqrt(dx * dx + dy * dy + dz * dz));
      }
    }
  }
  if (radius == 0) radius = 1;
  const std::size_t cells = static_cast<std::size_t>(resolution) * resolution * resolution;
  auto histogram = [&](const std::vector<std::vector<double>>& set) {
    std::vector<double> counts(cells, 0.0);
    std::vector<std::size_t> seen;
    for (const auto& cloud : set) {
      seen.clear();
      for (std::size_t i = 0; i < cloud.size(); i += 3) {
        std::size_t cell = 0;
        for (int c = 0; c < 3; ++c) {
          const double t = ((cloud[i + c] - center[c]) / radius + 1.0) / 2.0;
          const int k = std::clamp(static_cast<int>(std::floor(t * resolution)), 0, resolution - 1);
          cell = cell * static_cast<std::size_t>(resolution) + static_cast<std::size_t>(k);
        }
        seen.push_back(cell);
      }
      std::sort(seen.begin(), seen.end());
      seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
      for (auto c : seen) counts[c] += 1.0;
    }
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    for (auto& c : counts) c /= total;
    return counts;
  };
  const auto p = histogram(a);
  const auto q = histogram(b);
  double js = 0;
  for (std::size_t i = 0; i < cells; ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) js += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0) js += 0.5 * q[i] * std::log(q[i] / m);
  }
  return std::max(js, 0.0);
}

}  // namespace swapvae
