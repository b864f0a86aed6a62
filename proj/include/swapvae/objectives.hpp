#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include <nlohmann/json.hpp>

#include "graph.hpp"
#include "laplacian.hpp"
#include "model.hpp"

namespace swapvae {

struct LossWeights {
  double alpha = 1.0;   // Laplacian smoothing
  double beta = 1e-4;   // KL divergence
  double kappa = 1.0;   // latent consistency
  double eta1 = 0.5;    // margin on the swapped subset
  double eta2 = 0.5;    // margin on the remaining subsets

  void validate() const {
    if (alpha < 0 || beta < 0 || kappa < 0 || eta1 < 0 || eta2 < 0) {
      throw ConfigError("loss weights must be non-negative");
    }
  }
};

// gamma = 1 / (B sqrt(B) - B): one over the number of hinge terms per bracket.
inline double consistency_normalizer(int side) {
  const double b = static_cast<double>(side) * side;
  return 1.0 / (b * side - b);
}

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"alpha", w.alpha}, {"beta", w.beta}, {"kappa", w.kappa}, {"eta1", w.eta1}, {"eta2", w.eta2}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  j.at("alpha").get_to(w.alpha);
  j.at("beta").get_to(w.beta);
  j.at("kappa").get_to(w.kappa);
  j.at("eta1").get_to(w.eta1);
  j.at("eta2").get_to(w.eta2);
}

struct LossBreakdown {
  double recon = 0, laplacian = 0, kl = 0, consistency = 0, total = 0;
};

// (1/N) sum_n |x'_n - x_n|^2, averaged over the batch.
template <typename T>
Var<T> recon_loss(Var<T> predicted, Var<T> target) {
  require(predicted.shape() == target.shape(), "recon_loss shape mismatch");
  return ops::scale(ops::sum(ops::square(ops::sub(predicted, target))),
                    T(1) / static_cast<T>(predicted.rows()));
}

// (1/N) sum_n |delta_n|_2 (not squared), averaged over the batch.
template <typename T>
Var<T> laplacian_loss(Var<T> predicted, const LaplacianOperator& lap, std::size_t batch) {
  require(predicted.rows() == batch * static_cast<std::size_t>(lap.matrix.rows) && predicted.cols() == 3,
          "laplacian_loss shape mismatch");
  Var<T> delta = ops::sparse_matmul(lap.matrix, predicted, batch);
  return ops::scale(ops::sum(ops::row_norm(delta)), T(1) / static_cast<T>(predicted.rows()));
}

// KL[N(mu, exp(logvar)) || N(0, I)] summed over latents, averaged over the batch.
template <typename T>
Var<T> kl_loss(Var<T> mu, Var<T> logvar) {
  require(mu.shape() == logvar.shape(), "kl_loss shape mismatch");
  Var<T> terms = ops::sub(ops::add(ops::exp(logvar), ops::square(mu)), ops::add_scalar(logvar, T(1)));
  return ops::scale(ops::sum(terms), T(0.5) / static_cast<T>(mu.rows()));
}

// Row-index lists for the hinge terms over ordered pairs p != q and all s.
// Grid element (i, j) is latent row i * side + j.
struct ConsistencyIndex {
  std::shared_ptr<const std::vector<Index>> col_p, col_q;  // (p, s), (q, s)
  std::shared_ptr<const std::vector<Index>> row_p, row_q;  // (s, p), (s, q)
  std::size_t terms = 0;

  explicit ConsistencyIndex(int side) {
    std::vector<Index> cp, cq, rp, rq;
    for (int s = 0; s < side; ++s) {
      for (int p = 0; p < side; ++p) {
        for (int q = 0; q < side; ++q) {
          if (p == q) continue;
          cp.push_back(p * side + s);
          cq.push_back(q * side + s);
          rp.push_back(s * side + p);
          rq.push_back(s * side + q);
        }
      }
    }
    terms = cp.size();
    col_p = std::make_shared<const std::vector<Index>>(std::move(cp));
    col_q = std::make_shared<const std::vector<Index>>(std::move(cq));
    row_p = std::make_shared<const std::vector<Index>>(std::move(rp));
    row_q = std::make_shared<const std::vector<Index>>(std::move(rq));
  }
};

namespace detail {

template <typename T>
Var<T> pair_sq_distance(Var<T> z, const std::shared_ptr<const std::vector<Index>>& a,
                        const std::shared_ptr<const std::vector<Index>>& b) {
  return ops::row_sum(ops::square(ops::sub(ops::gather_rows(z, a, 1), ops::gather_rows(z, b, 1))));
}

}  // namespace detail

// Latent consistency hinge loss over a side x side grid of latents z [B, k].
// The swapped subset z^f should agree down columns and differ along rows;
// the rest z^c should agree along rows and differ down columns.
template <typename T>
Var<T> latent_consistency_loss(Var<T> z, int side, int feature, const LatentPartition& part,
                               double eta1, double eta2) {
  require(side >= 2 && z.rows() == static_cast<std::size_t>(side * side), "latent grid incomplete");
  require(z.cols() == static_cast<std::size_t>(part.total()), "latent width does not match partition");
  const ConsistencyIndex idx(side);
  Var<T> zf = ops::select_columns(z, part.columns(feature));
  Var<T> zc = ops::select_columns(z, part.complement(feature));

  Var<T> f_same = detail::pair_sq_distance(zf, idx.col_p, idx.col_q);
  Var<T> f_diff = detail::pair_sq_distance(zf, idx.row_p, idx.row_q);
  Var<T> f_hinge = ops::relu(ops::add_scalar(ops::sub(f_same, f_diff), static_cast<T>(eta1)));

  Var<T> c_same = detail::pair_sq_distance(zc, idx.row_p, idx.row_q);
  Var<T> c_diff = detail::pair_sq_distance(zc, idx.col_p, idx.col_q);
  Var<T> c_hinge = ops::relu(ops::add_scalar(ops::sub(c_same, c_diff), static_cast<T>(eta2)));

  const T gamma = static_cast<T>(consistency_normalizer(side));
  return ops::scale(ops::add(ops::sum(f_hinge), ops::sum(c_hinge)), gamma);
}

template <typename T>
struct LossTerms {
  Var<T> total;
  LossBreakdown breakdown;
};

// L = L_R + alpha L_L + beta L_KL + kappa L_c. Terms with zero weight are
// reported but kept out of the graph. `z` may be empty when kappa == 0.
template <typename T>
LossTerms<T> total_loss(Var<T> predicted, Var<T> target, const VariationalVars<T>& vo, Var<T> z,
                        const LaplacianOperator& lap, const LatentPartition& part, int side, int feature,
                        const LossWeights& w, std::size_t batch) {
  w.validate();
  LossTerms<T> out;
  Var<T> lr = recon_loss(predicted, target);
  Var<T> total = lr;
  out.breakdown.recon = lr.value().data[0];

  Var<T> ll = laplacian_loss(predicted, lap, batch);
  out.breakdown.laplacian = ll.value().data[0];
  if (w.alpha != 0) total = ops::add(total, ops::scale(ll, static_cast<T>(w.alpha)));

  Var<T> lkl = kl_loss(vo.mu, vo.logvar);
  out.breakdown.kl = lkl.value().data[0];
  if (w.beta != 0) total = ops::add(total, ops::scale(lkl, static_cast<T>(w.beta)));

  if (z.graph != nullptr && side >= 2) {
    Var<T> lc = latent_consistency_loss(z, side, feature, part, w.eta1, w.eta2);
    out.breakdown.consistency = lc.value().data[0];
    if (w.kappa != 0) total = ops::add(total, ops::scale(lc, static_cast<T>(w.kappa)));
  }
  out.breakdown.total = total.value().data[0];
  out.total = total;
  return out;
}

}  // namespace swapvae
