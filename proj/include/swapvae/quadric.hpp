#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <tuple>
#include <vector>

#include "mesh.hpp"
#include "sparse.hpp"

namespace swapvae {

// Pooling (Qd) and barycentric un-pooling (Qu) between a fine mesh and its
// simplification. `preserved[p]` is the fine index of coarse vertex p.
struct SamplingTransform {
  CsrMatrix pool;    // N_coarse x N_fine, one 1 per row
  CsrMatrix unpool;  // N_fine x N_coarse, one-hot or 3 barycentric weights per row
  std::vector<Index> preserved;

  void hash_into(Fnv1a& h) const {
    pool.hash_into(h);
    unpool.hash_into(h);
    h.update(preserved);
  }
};

struct SimplifiedMesh {
  MeshTopology topology;
  VertexEmbedding positions;  // reference positions of the preserved vertices
  SamplingTransform transform;
};

namespace detail {

using Quadric = Eigen::Matrix4d;

inline double quadric_cost(const Quadric& q, const Eigen::Vector3d& p) {
  Eigen::Vector4d h(p.x(), p.y(), p.z(), 1.0);
  return h.dot(q * h);
}

// Barycentric coordinates of the point of triangle (a, b, c) closest to p.
inline Eigen::Vector3d closest_barycentric(const Eigen::Vector3d& p, const Eigen::Vector3d& a,
                                           const Eigen::Vector3d& b, const Eigen::Vector3d& c) {
  const Eigen::Vector3d ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return {1, 0, 0};
  const Eigen::Vector3d bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return {0, 1, 0};
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) {
    const double v = d1 / (d1 - d3);
    return {1 - v, v, 0};
  }
  const Eigen::Vector3d cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return {0, 0, 1};
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) {
    const double w = d2 / (d2 - d6);
    return {1 - w, 0, w};
  }
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return {0, 1 - w, w};
  }
  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom, w = vc * denom;
  return {1 - v - w, v, w};
}

class EdgeCollapser {
 public:
  EdgeCollapser(const MeshTopology& topo, const VertexEmbedding& x)
      : pos_(x), faces_(topo.faces()), alive_face_(faces_.size(), 1),
        alive_(static_cast<std::size_t>(topo.num_vertices()), 1),
        quadric_(static_cast<std::size_t>(topo.num_vertices()), Quadric::Zero()),
        vertex_faces_(static_cast<std::size_t>(topo.num_vertices())),
        nbrs_(static_cast<std::size_t>(topo.num_vertices())),
        alive_count_(topo.num_vertices()) {
    for (std::size_t fi = 0; fi < faces_.size(); ++fi) {
      const auto& f = faces_[fi];
      Eigen::Vector3d n = (x.point(f[1]) - x.point(f[0])).cross(x.point(f[2]) - x.point(f[0]));
      const double len = n.norm();
      if (len > 0) {
        n /= len;
        Eigen::Vector4d plane(n.x(), n.y(), n.z(), -n.dot(x.point(f[0])));
        const Quadric k = plane * plane.transpose();
        for (Index v : f) quadric_[v] += k;
      }
      for (Index v : f) vertex_faces_[v].insert(fi);
    }
    for (Index v = 0; v < topo.num_vertices(); ++v) {
      nbrs_[v].insert(topo.neighbors(v).begin(), topo.neighbors(v).end());
    }
    for (const auto& e : topo.edges()) push_edge(e[0], e[1]);
  }

  // Contracts edges in increasing cost order until `target` vertices remain.
  // Returns false if no valid contraction exists before the target is reached.
  bool run(Index target) {
    while (alive_count_ > target) {
      bool collapsed = false;
      for (const auto& [cost, a, b] : queue_) {
        if (valid(a, b)) {
          collapse(a, b);
          collapsed = true;
          break;
        }
      }
      if (!collapsed) return false;
    }
    return true;
  }

  Index alive_count() const { return alive_count_; }
  bool alive(Index v) const { return alive_[v] != 0; }
  std::vector<Face> alive_faces() const {
    std::vector<Face> out;
    for (std::size_t fi = 0; fi < faces_.size(); ++fi) {
      if (alive_face_[fi]) out.push_back(faces_[fi]);
    }
    return out;
  }

 private:
  struct Choice {
    double cost;
    Index keep;
    Index drop;
  };

  // Subset placement: the surviving vertex keeps its reference position.
  Choice choose(Index a, Index b) const {
    const Quadric q = quadric_[a] + quadric_[b];
    const double ca = quadric_cost(q, pos_.point(a));
    const double cb = quadric_cost(q, pos_.point(b));
    if (cb < ca) return {cb, b, a};
    return {ca, a, b};
  }

  void push_edge(Index a, Index b) {
    if (a > b) std::swap(a, b);
    const double c = choose(a, b).cost;
    edge_cost_[{a, b}] = c;
    queue_.insert({c, a, b});
  }

  void drop_edge(Index a, Index b) {
    if (a > b) std::swap(a, b);
    auto it = edge_cost_.find({a, b});
    if (it == edge_cost_.end()) return;
    queue_.erase({it->second, a, b});
    edge_cost_.erase(it);
  }

  int faces_on_edge(Index a, Index b) const {
    int count = 0;
    for (std::size_t fi : vertex_faces_[a]) {
      const auto& f = faces_[fi];
      if (std::find(f.begin(), f.end(), b) != f.end()) ++count;
    }
    return count;
  }

  bool on_boundary(Index v) const {
    for (Index w : nbrs_[v]) {
      if (faces_on_edge(v, w) == 1) return true;
    }
    return false;
  }

  bool valid(Index a, Index b) const {
    const int shared = faces_on_edge(a, b);
    int common = 0;
    for (Index w : nbrs_[a]) common += static_cast<int>(nbrs_[b].count(w));
    if (common != shared) return false;  // link condition
    if (shared == 2 && on_boundary(a) && on_boundary(b)) return false;
    if (shared == 2 && alive_count_ <= 4) return false;
    // Reject contractions that flip any surviving face around the dropped vertex.
    const Choice ch = choose(a, b);
    const Eigen::Vector3d target = pos_.point(ch.keep);
    for (std::size_t fi : vertex_faces_[ch.drop]) {
      const auto& f = faces_[fi];
      if (std::find(f.begin(), f.end(), ch.keep) != f.end()) continue;
      std::array<Eigen::Vector3d, 3> p{pos_.point(f[0]), pos_.point(f[1]), pos_.point(f[2])};
      const Eigen::Vector3d before = (p[1] - p[0]).cross(p[2] - p[0]);
      for (int k = 0; k < 3; ++k) {
        if (f[k] == ch.drop) p[k] = target;
      }
      const Eigen::Vector3d after = (p[1] - p[0]).cross(p[2] - p[0]);
      if (before.dot(after) <= 0) return false;
    }
    return true;
  }

  void collapse(Index a, Index b) {
    const Choice ch = choose(a, b);
    const Index keep = ch.keep, drop = ch.drop;
    for (Index w : std::vector<Index>(nbrs_[drop].begin(), nbrs_[drop].end())) drop_edge(drop, w);
    for (Index w : nbrs_[keep]) drop_edge(keep, w);

    for (std::size_t fi : std::vector<std::size_t>(vertex_faces_[drop].begin(), vertex_faces_[drop].end())) {
      auto& f = faces_[fi];
      if (std::find(f.begin(), f.end(), keep) != f.end()) {
        alive_face_[fi] = 0;
        for (Index v : f) vertex_faces_[v].erase(fi);
      } else {
        for (auto& v : f) {
          if (v == drop) v = keep;
        }
        vertex_faces_[keep].insert(fi);
      }
    }
    vertex_faces_[drop].clear();
    for (Index w : nbrs_[drop]) {
      nbrs_[w].erase(drop);
      if (w != keep) {
        nbrs_[w].insert(keep);
        nbrs_[keep].insert(w);
      }
    }
    nbrs_[keep].erase(drop);
    nbrs_[drop].clear();
    quadric_[keep] += quadric_[drop];
    alive_[drop] = 0;
    --alive_count_;
    for (Index w : nbrs_[keep]) push_edge(keep, w);
  }

  const VertexEmbedding& pos_;
  std::vector<Face> faces_;
  std::vector<char> alive_face_;
  std::vector<char> alive_;
  std::vector<Quadric, Eigen::aligned_allocator<Quadric>> quadric_;
  std::vector<std::set<std::size_t>> vertex_faces_;
  std::vector<std::set<Index>> nbrs_;
  std::map<Edge, double> edge_cost_;
  std::set<std::tuple<double, Index, Index>> queue_;
  Index alive_count_;
};

}  // namespace detail

// Quadric-error edge collapse down to ceil(N / factor) vertices, with the
// pooling and un-pooling matrices between the two resolutions.
inline SimplifiedMesh quadric_simplify(const MeshTopology& topo, const VertexEmbedding& reference,
                                       double factor) {
  require_matching(topo, reference);
  require(factor >= 1.0, "sampling factor must be >= 1");
  const Index n = topo.num_vertices();
  const auto target = static_cast<Index>(std::ceil(static_cast<double>(n) / factor));
  require(target >= 4, "sampling factor leaves fewer than 4 vertices");

  detail::EdgeCollapser collapser(topo, reference);
  if (!collapser.run(target)) {
    throw DataError("simplification stalled at " + std::to_string(collapser.alive_count()) +
                    " vertices (target " + std::to_string(target) + ")");
  }

  SimplifiedMesh out;
  std::vector<Index> coarse_index(static_cast<std::size_t>(n), -1);
  for (Index v = 0; v < n; ++v) {
    if (collapser.alive(v)) {
      coarse_index[v] = static_cast<Index>(out.transform.preserved.size());
      out.transform.preserved.push_back(v);
    }
  }
  const auto nc = static_cast<Index>(out.transform.preserved.size());
  std::vector<Face> faces = collapser.alive_faces();
  for (auto& f : faces) {
    for (auto& v : f) v = coarse_index[v];
  }
  out.topology = MeshTopology(nc, std::move(faces));
  out.positions = VertexEmbedding(nc);
  for (Index p = 0; p < nc; ++p) out.positions.set_point(p, reference.point(out.transform.preserved[p]));

  std::vector<std::tuple<Index, Index, double>> down, up;
  for (Index p = 0; p < nc; ++p) down.emplace_back(p, out.transform.preserved[p], 1.0);
  for (Index q = 0; q < n; ++q) {
    if (coarse_index[q] >= 0) {
      up.emplace_back(q, coarse_index[q], 1.0);
      continue;
    }
    const Eigen::Vector3d p = reference.point(q);
    double best = std::numeric_limits<double>::infinity();
    Face best_face{};
    Eigen::Vector3d best_bary;
    for (const auto& f : out.topology.faces()) {
      const Eigen::Vector3d a = out.positions.point(f[0]), b = out.positions.point(f[1]),
                            c = out.positions.point(f[2]);
      const Eigen::Vector3d bary = detail::closest_barycentric(p, a, b, c);
      const double d = (bary[0] * a + bary[1] * b + bary[2] * c - p).squaredNorm();
      if (d < best) {
        best = d;
        best_face = f;
        best_bary = bary;
      }
    }
    best_bary = best_bary.cwiseMax(0.0);
    best_bary /= best_bary.sum();
    for (int k = 0; k < 3; ++k) up.emplace_back(q, best_face[k], best_bary[k]);
  }
  out.transform.pool = CsrMatrix::from_triplets(nc, n, std::move(down));
  out.transform.unpool = CsrMatrix::from_triplets(n, nc, std::move(up));
  return out;
}

}  // namespace swapvae
