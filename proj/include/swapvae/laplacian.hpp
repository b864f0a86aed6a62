#pragma once

#include <tuple>
#include <vector>

#include "mesh.hpp"
#include "sparse.hpp"

namespace swapvae {

// Uniform Laplacian with random-walk normalisation, L = I - D^-1 A.
struct LaplacianOperator {
  CsrMatrix matrix;
  std::vector<Index> degree;

  // delta_n = mean of neighbours - x_n, for an N x 3 embedding.
  VertexEmbedding apply(const VertexEmbedding& x) const {
    require(x.rows() == matrix.cols, "laplacian shape mismatch");
    VertexEmbedding out(x.rows());
    matrix.apply<double>(x.values(), out.values(), 3);
    for (double& v : out.values()) v = -v;
    return out;
  }
};

// Note the sign: L x = x_n - mean(neighbours) = -delta_n. Losses only use
// norms of rows, so either sign convention gives the same value.
inline LaplacianOperator build_laplacian(const MeshTopology& topo) {
  LaplacianOperator op;
  std::vector<std::tuple<Index, Index, double>> t;
  op.degree.resize(static_cast<std::size_t>(topo.num_vertices()));
  for (Index n = 0; n < topo.num_vertices(); ++n) {
    const auto& nb = topo.neighbors(n);
    if (nb.empty()) throw DataError("isolated vertex " + std::to_string(n) + " in laplacian");
    op.degree[n] = static_cast<Index>(nb.size());
    t.emplace_back(n, n, 1.0);
    const double w = -1.0 / static_cast<double>(nb.size());
    for (Index e : nb) t.emplace_back(n, e, w);
  }
  op.matrix = CsrMatrix::from_triplets(topo.num_vertices(), topo.num_vertices(), std::move(t));
  return op;
}

}  // namespace swapvae
