#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace swapvae {

using Index = std::int32_t;
using Edge = std::array<Index, 2>;
using Face = std::array<Index, 3>;

// Fixed connectivity shared by every mesh of a dataset. Edges are stored with
// the smaller index first, sorted lexicographically; adjacency lists are sorted.
class MeshTopology {
 public:
  MeshTopology() = default;

  MeshTopology(Index num_vertices, std::vector<Face> faces)
      : num_vertices_(num_vertices), faces_(std::move(faces)) {
    require(num_vertices_ >= 0, "negative vertex count");
    std::set<Edge> edge_set;
    for (const auto& f : faces_) {
      for (int k = 0; k < 3; ++k) {
        Index a = f[k];
        Index b = f[(k + 1) % 3];
        require(a >= 0 && a < num_vertices_ && b >= 0 && b < num_vertices_,
                "face index out of range");
        require(a != b, "degenerate face");
        edge_set.insert({std::min(a, b), std::max(a, b)});
      }
    }
    edges_.assign(edge_set.begin(), edge_set.end());
    adjacency_.assign(static_cast<std::size_t>(num_vertices_), {});
    for (const auto& e : edges_) {
      adjacency_[e[0]].push_back(e[1]);
      adjacency_[e[1]].push_back(e[0]);
    }
    for (auto& nbrs : adjacency_) std::sort(nbrs.begin(), nbrs.end());
  }

  Index num_vertices() const { return num_vertices_; }
  std::size_t num_edges() const { return edges_.size(); }
  std::size_t num_faces() const { return faces_.size(); }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<Face>& faces() const { return faces_; }
  const std::vector<Index>& neighbors(Index v) const { return adjacency_[v]; }
  const std::vector<std::vector<Index>>& adjacency() const { return adjacency_; }

  bool operator==(const MeshTopology& o) const {
    return num_vertices_ == o.num_vertices_ && faces_ == o.faces_;
  }

 private:
  Index num_vertices_ = 0;
  std::vector<Edge> edges_;
  std::vector<Face> faces_;
  std::vector<std::vector<Index>> adjacency_;
};

// Per-mesh vertex positions, N x 3 row-major.
class VertexEmbedding {
 public:
  VertexEmbedding() = default;
  explicit VertexEmbedding(Index rows) : coords_(static_cast<std::size_t>(rows) * 3, 0.0) {}
  explicit VertexEmbedding(std::vector<double> coords) : coords_(std::move(coords)) {
    require(coords_.size() % 3 == 0, "embedding size is not a multiple of 3");
  }

  Index rows() const { return static_cast<Index>(coords_.size() / 3); }
  double& operator()(Index n, int c) { return coords_[static_cast<std::size_t>(n) * 3 + c]; }
  double operator()(Index n, int c) const { return coords_[static_cast<std::size_t>(n) * 3 + c]; }

  Eigen::Vector3d point(Index n) const {
    const double* p = &coords_[static_cast<std::size_t>(n) * 3];
    return {p[0], p[1], p[2]};
  }
  void set_point(Index n, const Eigen::Vector3d& p) {
    double* q = &coords_[static_cast<std::size_t>(n) * 3];
    q[0] = p.x();
    q[1] = p.y();
    q[2] = p.z();
  }

  std::span<const double> values() const { return coords_; }
  std::span<double> values() { return coords_; }

  bool all_finite() const {
    return std::all_of(coords_.begin(), coords_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const VertexEmbedding& o) const { return coords_ == o.coords_; }

 private:
  std::vector<double> coords_;
};

inline void require_matching(const MeshTopology& topo, const VertexEmbedding& x) {
  require(x.rows() == topo.num_vertices(), "embedding row count does not match topology");
}

struct ValidationReport {
  std::vector<std::string> issues;
  bool ok() const { return issues.empty(); }
  bool contains(const std::string& needle) const {
    return std::any_of(issues.begin(), issues.end(),
                       [&](const std::string& s) { return s.find(needle) != std::string::npos; });
  }
};

// Manifoldness, consistent winding and isolated vertices.
inline ValidationReport validate_topology(const MeshTopology& topo) {
  ValidationReport report;
  auto edge_name = [](Index a, Index b) {
    return "(" + std::to_string(a) + "," + std::to_string(b) + ")";
  };

  std::map<Edge, int> undirected;
  std::map<Edge, int> directed;
  for (const auto& f : topo.faces()) {
    for (int k = 0; k < 3; ++k) {
      Index a = f[k];
      Index b = f[(k + 1) % 3];
      ++undirected[{std::min(a, b), std::max(a, b)}];
      ++directed[{a, b}];
    }
  }
  for (const auto& [e, count] : undirected) {
    if (count > 2) report.issues.push_back("non-manifold edge " + edge_name(e[0], e[1]));
  }
  for (const auto& [e, count] : directed) {
    if (count > 1) report.issues.push_back("inconsistent winding on edge " + edge_name(e[0], e[1]));
  }

  // Each vertex's link (opposite edges of incident faces) must be one path or one cycle.
  std::vector<std::vector<Edge>> link(static_cast<std::size_t>(topo.num_vertices()));
  for (const auto& f : topo.faces()) {
    for (int k = 0; k < 3; ++k) link[f[k]].push_back({f[(k + 1) % 3], f[(k + 2) % 3]});
  }
  for (Index v = 0; v < topo.num_vertices(); ++v) {
    if (topo.neighbors(v).empty()) {
      report.issues.push_back("isolated vertex " + std::to_string(v));
      continue;
    }
    // Union-find over link vertices.
    std::map<Index, Index> parent;
    auto find = [&](Index x) {
      while (parent[x] != x) x = parent[x] = parent[parent[x]];
      return x;
    };
    for (const auto& e : link[v]) {
      for (Index x : e) parent.try_emplace(x, x);
    }
    for (const auto& e : link[v]) parent[find(e[0])] = find(e[1]);
    std::set<Index> roots;
    for (auto& [x, _] : parent) roots.insert(find(x));
    if (roots.size() > 1) report.issues.push_back("non-manifold vertex " + std::to_string(v));
  }
  return report;
}

// Per-vertex labels in [0, F) and the derived sorted vertex lists.
class FeatureSegmentation {
 public:
  FeatureSegmentation() = default;

  FeatureSegmentation(std::vector<Index> labels, std::vector<std::string> names)
      : labels_(std::move(labels)), names_(std::move(names)) {
    const auto count = names_.size();
    require(count > 0, "segmentation has no features");
    members_.assign(count, {});
    for (std::size_t v = 0; v < labels_.size(); ++v) {
      Index f = labels_[v];
      require(f >= 0 && static_cast<std::size_t>(f) < count, "feature label out of range");
      members_[f].push_back(static_cast<Index>(v));
    }
    for (std::size_t f = 0; f < count; ++f) {
      require(!members_[f].empty(), "empty feature '" + names_[f] + "'");
    }
  }

  // Builds from explicit vertex lists, rejecting gaps and overlaps.
  static FeatureSegmentation from_groups(Index num_vertices,
                                         const std::vector<std::vector<Index>>& groups,
                                         std::vector<std::string> names) {
    require(groups.size() == names.size(), "feature name count mismatch");
    std::vector<Index> labels(static_cast<std::size_t>(num_vertices), -1);
    for (std::size_t f = 0; f < groups.size(); ++f) {
      require(!groups[f].empty(), "empty feature '" + names[f] + "'");
      for (Index v : groups[f]) {
        require(v >= 0 && v < num_vertices, "segmentation vertex index out of range");
        require(labels[v] < 0, "overlapping features at vertex " + std::to_string(v));
        labels[v] = static_cast<Index>(f);
      }
    }
    for (Index v = 0; v < num_vertices; ++v) {
      require(labels[v] >= 0, "uncovered vertex " + std::to_string(v));
    }
    return FeatureSegmentation(std::move(labels), std::move(names));
  }

  int num_features() const { return static_cast<int>(names_.size()); }
  Index num_vertices() const { return static_cast<Index>(labels_.size()); }
  Index label(Index v) const { return labels_[v]; }
  const std::vector<Index>& labels() const { return labels_; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Index>& vertices(int feature) const { return members_[feature]; }

 private:
  std::vector<Index> labels_;
  std::vector<std::string> names_;
  std::vector<std::vector<Index>> members_;
};

// Per-vertex standard score statistics of the training split.
struct NormalizationStats {
  static constexpr double kStdFloor = 1e-8;
  std::vector<double> mean;  // N x 3
  std::vector<double> std;   // N x 3, >= kStdFloor

  Index rows() const { return static_cast<Index>(mean.size() / 3); }
};

// Population (divide-by-n) mean and standard deviation, floored at kStdFloor.
inline NormalizationStats fit_normalization(std::span<const VertexEmbedding> train) {
  require(!train.empty(), "empty training set");
  const std::size_t size = train.front().values().size();
  NormalizationStats stats;
  stats.mean.assign(size, 0.0);
  stats.std.assign(size, 0.0);
  for (const auto& x : train) {
    require(x.values().size() == size, "training meshes differ in vertex count");
    auto v = x.values();
    for (std::size_t i = 0; i < size; ++i) stats.mean[i] += v[i];
  }
  const double n = static_cast<double>(train.size());
  for (auto& m : stats.mean) m /= n;
  for (const auto& x : train) {
    auto v = x.values();
    for (std::size_t i = 0; i < size; ++i) {
      double d = v[i] - stats.mean[i];
      stats.std[i] += d * d;
    }
  }
  for (auto& s : stats.std) s = std::max(std::sqrt(s / n), NormalizationStats::kStdFloor);
  return stats;
}

inline VertexEmbedding normalize(const VertexEmbedding& x, const NormalizationStats& stats) {
  require(x.values().size() == stats.mean.size(), "normalization shape mismatch");
  VertexEmbedding out = x;
  auto v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - stats.mean[i]) / stats.std[i];
  return out;
}

inline VertexEmbedding denormalize(const VertexEmbedding& x, const NormalizationStats& stats) {
  require(x.values().size() == stats.mean.size(), "normalization shape mismatch");
  VertexEmbedding out = x;
  auto v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = v[i] * stats.std[i] + stats.mean[i];
  return out;
}

// Mean over vertices of the Euclidean distance between corresponding vertices.
inline double mean_vertex_distance(const VertexEmbedding& a, const VertexEmbedding& b) {
  require(a.rows() == b.rows(), "vertex count mismatch");
  double total = 0.0;
  for (Index n = 0; n < a.rows(); ++n) total += (a.point(n) - b.point(n)).norm();
  return a.rows() > 0 ? total / a.rows() : 0.0;
}

}  // namespace swapvae
