#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <vector>

#include "hash.hpp"
#include "mesh.hpp"

namespace swapvae {

// N x l table of spiral sequences. Row n starts with n itself.
struct SpiralIndex {
  static constexpr Index kPad = -1;
  Index rows = 0;
  int length = 0;
  int dilation = 1;
  std::vector<Index> table;  // rows * length, row-major

  std::span<const Index> row(Index n) const {
    return {table.data() + static_cast<std::size_t>(n) * length, static_cast<std::size_t>(length)};
  }
  void hash_into(Fnv1a& h) const {
    h.update(&length, sizeof(length));
    h.update(&dilation, sizeof(dilation));
    h.update(table);
  }
  bool operator==(const SpiralIndex& o) const = default;
};

namespace detail {

// Neighbours of every vertex in clockwise order (seen from the side the
// counter-clockwise faces point to), starting at the lowest-index neighbour.
// Open fans are walked clockwise to their end, then the remainder is
// appended walking counter-clockwise from the start.
inline std::vector<std::vector<Index>> clockwise_rings(const MeshTopology& topo) {
  const auto n = static_cast<std::size_t>(topo.num_vertices());
  std::vector<std::map<Index, Index>> cw(n), ccw(n);
  for (const auto& f : topo.faces()) {
    for (int k = 0; k < 3; ++k) {
      Index u = f[k], v = f[(k + 1) % 3], w = f[(k + 2) % 3];
      if (!cw[u].emplace(w, v).second || !ccw[u].emplace(v, w).second) {
        throw DataError("non-manifold vertex " + std::to_string(u) + " in spiral construction");
      }
    }
  }
  std::vector<std::vector<Index>> rings(n);
  for (std::size_t u = 0; u < n; ++u) {
    const auto& nbrs = topo.neighbors(static_cast<Index>(u));
    if (nbrs.empty()) continue;
    std::vector<Index>& ring = rings[u];
    std::set<Index> seen;
    Index start = nbrs.front();
    Index cur = start;
    while (seen.insert(cur).second) {
      ring.push_back(cur);
      auto it = cw[u].find(cur);
      if (it == cw[u].end()) break;
      cur = it->second;
    }
    std::vector<Index> back;
    for (auto it = ccw[u].find(start); it != ccw[u].end() && !seen.count(it->second);
         it = ccw[u].find(it->second)) {
      seen.insert(it->second);
      back.push_back(it->second);
    }
    ring.insert(ring.end(), back.begin(), back.end());
    if (ring.size() != nbrs.size()) {
      throw DataError("non-manifold vertex " + std::to_string(u) + " in spiral construction");
    }
  }
  return rings;
}

inline bool adjacent(const MeshTopology& topo, Index a, Index b) {
  const auto& nb = topo.neighbors(a);
  return std::binary_search(nb.begin(), nb.end(), b);
}

}  // namespace detail

// Full (undilated) ring-by-ring spiral of `center`, at most `max_len` long.
// Each outer ring continues from the most recently visited vertex adjacent to
// the ring vertex being expanded, so consecutive entries stay spatially close.
inline std::vector<Index> spiral_sequence(const MeshTopology& topo,
                                          const std::vector<std::vector<Index>>& rings,
                                          Index center, std::size_t max_len) {
  std::vector<Index> seq{center};
  std::vector<char> visited(static_cast<std::size_t>(topo.num_vertices()), 0);
  visited[center] = 1;
  std::vector<Index> frontier;
  for (Index v : rings[center]) {
    if (seq.size() >= max_len) return seq;
    seq.push_back(v);
    visited[v] = 1;
    frontier.push_back(v);
  }
  while (seq.size() < max_len && !frontier.empty()) {
    std::vector<Index> next;
    for (Index v : frontier) {
      const auto& ring = rings[v];
      std::size_t offset = 0;
      for (auto it = seq.rbegin(); it != seq.rend(); ++it) {
        auto pos = std::find(ring.begin(), ring.end(), *it);
        if (*it != v && pos != ring.end()) {
          offset = static_cast<std::size_t>(pos - ring.begin()) + 1;
          break;
        }
      }
      for (std::size_t k = 0; k < ring.size(); ++k) {
        Index w = ring[(offset + k) % ring.size()];
        if (visited[w]) continue;
        visited[w] = 1;
        seq.push_back(w);
        next.push_back(w);
        if (seq.size() >= max_len) return seq;
      }
    }
    frontier = std::move(next);
  }
  return seq;
}

// Spirals of `length` entries taken with stride `dilation` from the full
// spiral. Short spirals are padded by repeating their last valid entry.
inline SpiralIndex build_spirals(const MeshTopology& topo, int length, int dilation) {
  require(length >= 1 && dilation >= 1, "spiral length and dilation must be >= 1");
  const auto rings = detail::clockwise_rings(topo);
  SpiralIndex s;
  s.rows = topo.num_vertices();
  s.length = length;
  s.dilation = dilation;
  s.table.reserve(static_cast<std::size_t>(s.rows) * length);
  const std::size_t full = static_cast<std::size_t>(length - 1) * dilation + 1;
  for (Index n = 0; n < topo.num_vertices(); ++n) {
    auto seq = spiral_sequence(topo, rings, n, full);
    Index last = n;
    for (int i = 0; i < length; ++i) {
      const std::size_t pos = static_cast<std::size_t>(i) * dilation;
      if (pos < seq.size()) last = seq[pos];
      s.table.push_back(last);
    }
  }
  return s;
}

}  // namespace swapvae
