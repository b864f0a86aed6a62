#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "mesh_io.hpp"
#include "rng.hpp"

namespace swapvae {

// Regular tetrahedron centred at the origin with unit circumradius.
inline Mesh tetrahedron() {
  const double s = 1.0 / std::sqrt(3.0);
  std::vector<double> c = {s, s, s, s, -s, -s, -s, s, -s, -s, -s, s};
  std::vector<Face> f = {{0, 1, 2}, {0, 3, 1}, {0, 2, 3}, {1, 3, 2}};
  return {MeshTopology(4, std::move(f)), VertexEmbedding(std::move(c))};
}

// Unit-circumradius icosahedron, counter-clockwise faces seen from outside.
inline Mesh icosahedron() {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  const double s = 1.0 / std::sqrt(1.0 + t * t);
  std::vector<double> c = {-1, t, 0, 1, t, 0, -1, -t, 0, 1, -t, 0, 0, -1, t, 0, 1, t,
                           0, -1, -t, 0, 1, -t, t, 0, -1, t, 0, 1, -t, 0, -1, -t, 0, 1};
  for (auto& v : c) v *= s;
  std::vector<Face> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                         {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                         {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                         {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  return {MeshTopology(12, std::move(f)), VertexEmbedding(std::move(c))};
}

// Loop-style midpoint subdivision of the icosahedron projected to the unit
// sphere. Order k has 10*4^k + 2 vertices (12, 42, 162, 642, 2562, ...).
inline Mesh icosphere(int order) {
  require(order >= 0, "negative icosphere order");
  Mesh mesh = icosahedron();
  std::vector<double> coords(mesh.positions.values().begin(), mesh.positions.values().end());
  std::vector<Face> faces = mesh.topology.faces();
  for (int level = 0; level < order; ++level) {
    std::map<Edge, Index> midpoint;
    auto mid = [&](Index a, Index b) {
      Edge key{std::min(a, b), std::max(a, b)};
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      Eigen::Vector3d p(coords[3 * a] + coords[3 * b], coords[3 * a + 1] + coords[3 * b + 1],
                        coords[3 * a + 2] + coords[3 * b + 2]);
      p.normalize();
      auto idx = static_cast<Index>(coords.size() / 3);
      coords.insert(coords.end(), {p.x(), p.y(), p.z()});
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<Face> next;
    next.reserve(faces.size() * 4);
    for (const auto& f : faces) {
      Index ab = mid(f[0], f[1]);
      Index bc = mid(f[1], f[2]);
      Index ca = mid(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    faces = std::move(next);
  }
  const auto n = static_cast<Index>(coords.size() / 3);
  return {MeshTopology(n, std::move(faces)), VertexEmbedding(std::move(coords))};
}

// Planar (z = 0) grid of cols x rows vertices, each cell split along its
// lower-left to upper-right diagonal. Vertex (i, j) has index j * cols + i.
inline Mesh planar_grid(Index cols, Index rows, double spacing = 1.0) {
  std::vector<double> c;
  for (Index j = 0; j < rows; ++j) {
    for (Index i = 0; i < cols; ++i) c.insert(c.end(), {i * spacing, j * spacing, 0.0});
  }
  std::vector<Face> f;
  for (Index j = 0; j + 1 < rows; ++j) {
    for (Index i = 0; i + 1 < cols; ++i) {
      Index a = j * cols + i, b = a + 1, d = a + cols, e = d + 1;
      f.push_back({a, b, e});
      f.push_back({a, e, d});
    }
  }
  return {MeshTopology(cols * rows, std::move(f)), VertexEmbedding(std::move(c))};
}

// Closed genus-0 manifold with randomized connectivity: an icosphere whose
// edges are randomly flipped (keeping degree >= 4 and no duplicate edges),
// vertices relabelled by a random permutation and positions jittered.
inline Mesh random_manifold(Rng& rng, int order = 2, int flips = 200, double jitter = 0.02) {
  Mesh base = icosphere(order);
  std::vector<Face> faces = base.topology.faces();
  const Index n = base.topology.num_vertices();

  for (int attempt = 0, done = 0; attempt < flips * 20 && done < flips; ++attempt) {
    std::map<std::pair<Index, Index>, std::size_t> owner;  // directed edge -> face
    std::vector<std::set<Index>> nbrs(static_cast<std::size_t>(n));
    for (std::size_t fi = 0; fi < faces.size(); ++fi) {
      for (int k = 0; k < 3; ++k) {
        owner[{faces[fi][k], faces[fi][(k + 1) % 3]}] = fi;
        nbrs[faces[fi][k]].insert(faces[fi][(k + 1) % 3]);
        nbrs[faces[fi][(k + 1) % 3]].insert(faces[fi][k]);
      }
    }
    std::size_t f1 = uniform_index(rng, faces.size());
    int k = static_cast<int>(uniform_index(rng, 3));
    Index a = faces[f1][k], b = faces[f1][(k + 1) % 3], c = faces[f1][(k + 2) % 3];
    std::size_t f2 = owner.at({b, a});
    Index d = -1;
    for (Index v : faces[f2]) {
      if (v != a && v != b) d = v;
    }
    if (c == d || nbrs[c].count(d) || nbrs[a].size() <= 4 || nbrs[b].size() <= 4) continue;
    faces[f1] = {a, d, c};
    faces[f2] = {d, b, c};
    ++done;
  }

  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  VertexEmbedding x(n);
  for (Index v = 0; v < n; ++v) {
    Eigen::Vector3d p = base.positions.point(v);
    for (int c = 0; c < 3; ++c) p[c] += uniform(rng, -jitter, jitter);
    x.set_point(perm[v], p);
  }
  for (auto& f : faces) {
    for (auto& v : f) v = perm[v];
  }
  return {MeshTopology(n, std::move(faces)), std::move(x)};
}

}  // namespace swapvae
