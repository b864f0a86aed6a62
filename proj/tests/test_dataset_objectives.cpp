#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "support.hpp"
#include "swapvae/dataset.hpp"
#include "swapvae/grad_check.hpp"
#include "swapvae/objectives.hpp"
#include "swapvae/shapes.hpp"

using namespace swapvae;
using swapvae::testing::TempDir;

namespace {

const SyntheticDataset& small_dataset() {
  static const SyntheticDataset ds = [] {
    SyntheticDatasetConfig c;
    c.size = 200;
    c.seed = 21;
    return generate_dataset(c);
  }();
  return ds;
}

double sq_dist(const std::vector<double>& z, int k, int a, int b, const std::vector<int>& cols) {
  double d = 0;
  for (int c : cols) {
    const double t = z[static_cast<std::size_t>(a * k + c)] - z[static_cast<std::size_t>(b * k + c)];
    d += t * t;
  }
  return d;
}

// Direct transcription of the hinge sum over s, ordered p != q.
double consistency_oracle(const std::vector<double>& z, int side, int k, const std::vector<int>& fcols,
                          const std::vector<int>& ccols, double eta1, double eta2) {
  auto at = [side](int i, int j) { return i * side + j; };
  double total = 0;
  for (int s = 0; s < side; ++s) {
    for (int p = 0; p < side; ++p) {
      for (int q = 0; q < side; ++q) {
        if (p == q) continue;
        total += std::max(0.0, sq_dist(z, k, at(p, s), at(q, s), fcols) - sq_dist(z, k, at(s, p), at(s, q), fcols) + eta1);
        total += std::max(0.0, sq_dist(z, k, at(s, p), at(s, q), ccols) - sq_dist(z, k, at(p, s), at(q, s), ccols) + eta2);
      }
    }
  }
  const double b = side * side;
  return total / (b * side - b);
}

double consistency_value(const std::vector<double>& z, int side, int f, const LatentPartition& part,
                         double eta1 = 0.5, double eta2 = 0.5) {
  Graph<double> g;
  Tensor<double> t({static_cast<std::size_t>(side * side), static_cast<std::size_t>(part.total())}, z);
  return latent_consistency_loss(g.constant(t), side, f, part, eta1, eta2).value()[0];
}

std::vector<int> to_int(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(Dataset, DefaultSplitSizes) {
  Rng rng(1);
  auto s = make_splits(2000, rng);
  EXPECT_EQ(s.train.size(), 1800u);
  EXPECT_EQ(s.val.size(), 100u);
  EXPECT_EQ(s.test.size(), 100u);
  std::vector<Index> all;
  for (auto* v : {&s.train, &s.val, &s.test}) all.insert(all.end(), v->begin(), v->end());
  std::sort(all.begin(), all.end());
  for (Index i = 0; i < 2000; ++i) EXPECT_EQ(all[i], i);
  auto odd = make_splits(72, rng);
  EXPECT_EQ(odd.train.size(), 64u);
  EXPECT_EQ(odd.val.size(), 4u);
  EXPECT_EQ(odd.test.size(), 4u);
}

TEST(Dataset, SegmentationAndBasisSupport) {
  const auto& ds = small_dataset();
  EXPECT_EQ(ds.topology.num_vertices(), 642);
  EXPECT_EQ(ds.segmentation.num_features(), 8);
  EXPECT_EQ(ds.basis.fields.size(), 24u);
  for (int f = 0; f < 8; ++f) {
    for (int q = 0; q < 3; ++q) {
      const auto& field = ds.basis.fields[static_cast<std::size_t>(f * 3 + q)];
      for (Index v = 0; v < 642; ++v) {
        const bool inside = ds.segmentation.label(v) == f;
        bool on_boundary = false;
        for (Index w : ds.topology.neighbors(v)) on_boundary = on_boundary || ds.segmentation.label(w) != f;
        for (int c = 0; c < 3; ++c) {
          if (!inside || on_boundary) {
            EXPECT_EQ(field[static_cast<std::size_t>(v) * 3 + c], 0.0);
          }
        }
      }
    }
  }
}

TEST(Dataset, ZeroFactorsGiveTemplate) {
  const auto& ds = small_dataset();
  std::vector<double> zero(24, 0.0);
  EXPECT_EQ(ds.basis.synthesize(ds.template_positions, zero), ds.template_positions);
}

TEST(Dataset, FactorSwapEqualsVertexSwap) {
  const auto& ds = small_dataset();
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const auto i = uniform_index(rng, 200), j = uniform_index(rng, 200);
    const int f = static_cast<int>(uniform_index(rng, 8));
    auto fac = std::vector<double>(ds.factors.identity(i).begin(), ds.factors.identity(i).end());
    for (int q = 0; q < 3; ++q) fac[static_cast<std::size_t>(f * 3 + q)] = ds.factors.identity(j)[static_cast<std::size_t>(f * 3 + q)];
    EXPECT_EQ(ds.basis.synthesize(ds.template_positions, fac), swap_feature(ds.meshes[i], ds.meshes[j], ds.segmentation, f));
  }
}

TEST(Dataset, DeterministicAndSeedSensitive) {
  auto c = swapvae::testing::toy_dataset_config(40, 5);
  auto a = generate_dataset(c), b = generate_dataset(c);
  EXPECT_EQ(a.meshes, b.meshes);
  EXPECT_EQ(a.splits.train, b.splits.train);
  c.seed = 6;
  EXPECT_NE(generate_dataset(c).factors.values, a.factors.values);
}

TEST(Dataset, SaveLoadRoundTrip) {
  TempDir dir("ds");
  auto ds = generate_dataset(swapvae::testing::toy_dataset_config(30, 7));
  save_dataset(dir.path(), ds);
  auto back = load_dataset(dir.path());
  EXPECT_EQ(back.meshes, ds.meshes);
  EXPECT_EQ(back.segmentation.labels(), ds.segmentation.labels());
  EXPECT_EQ(back.splits.test, ds.splits.test);
  EXPECT_EQ(back.landmarks, ds.landmarks);
  std::filesystem::remove(dir / "factors.bin");
  EXPECT_THROW(load_dataset(dir.path()), DataError);
}

TEST(Dataset, InvalidConfigs) {
  SyntheticDatasetConfig c;
  c.features = 1;
  EXPECT_THROW(generate_dataset(c), ConfigError);
  c = SyntheticDatasetConfig{};
  c.icosphere_order = 0;
  c.features = 20;
  EXPECT_THROW(generate_dataset(c), DataError);
}

TEST(Dataset, LandmarksAreSeedsPlusTwoPerRegion) {
  const auto& ds = small_dataset();
  EXPECT_EQ(ds.landmarks.size(), 24u);
  for (int f = 0; f < 8; ++f) EXPECT_EQ(ds.landmarks[f], ds.seeds[f]);
}

TEST(SwapFeature, Properties) {
  const auto& ds = small_dataset();
  const auto& a = ds.meshes[0];
  const auto& b = ds.meshes[1];
  EXPECT_EQ(swap_feature(a, a, ds.segmentation, 3), a);
  auto once = swap_feature(a, b, ds.segmentation, 3);
  EXPECT_EQ(swap_feature(once, a, ds.segmentation, 3), a);
  for (Index v = 0; v < a.rows(); ++v) {
    const bool from_src = once.point(v) == b.point(v) && !(a.point(v) == b.point(v));
    if (from_src) {
      EXPECT_EQ(ds.segmentation.label(v), 3);
    }
    EXPECT_EQ(once.point(v), ds.segmentation.label(v) == 3 ? b.point(v) : a.point(v));
  }
  EXPECT_THROW(swap_feature(a, VertexEmbedding(3), ds.segmentation, 0), DataError);
  EXPECT_THROW(swap_feature(a, b, ds.segmentation, 8), DataError);
}

TEST(SwapBatch, GridInvariants) {
  const auto& ds = small_dataset();
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto b = build_swap_batch(ds.meshes, ds.splits.train, ds.segmentation, 16, rng);
    ASSERT_EQ(b.side, 4);
    ASSERT_EQ(b.grid.size(), 16u);
    std::set<Index> ids(b.identities.begin(), b.identities.end());
    EXPECT_EQ(ids.size(), 4u);
    for (int i = 0; i < 4; ++i) {
      EXPECT_EQ(b.at(i, i), ds.meshes[b.identities[i]]);
      for (int j = 0; j < 4; ++j) {
        for (Index v = 0; v < 642; ++v) {
          const auto& want = ds.segmentation.label(v) == b.feature ? b.at(j, j) : b.at(i, i);
          ASSERT_EQ(b.at(i, j).point(v), want.point(v));
        }
      }
    }
  }
}

TEST(SwapBatch, NonSquareRejectedAndDeterministic) {
  const auto& ds = small_dataset();
  Rng rng(4);
  EXPECT_THROW(build_swap_batch(ds.meshes, ds.splits.train, ds.segmentation, 15, rng), DataError);
  Rng a(9), b(9);
  auto x = build_swap_batch(ds.meshes, ds.splits.train, ds.segmentation, 16, a);
  auto y = build_swap_batch(ds.meshes, ds.splits.train, ds.segmentation, 16, b);
  EXPECT_EQ(x.identities, y.identities);
  EXPECT_EQ(x.feature, y.feature);
}

TEST(SwapBatch, FeatureChoiceIsUniform) {
  const auto& ds = small_dataset();
  Rng rng(5);
  std::vector<int> counts(8, 0);
  const int n = 10000;
  for (int t = 0; t < n; ++t) ++counts[build_swap_batch(ds.meshes, ds.splits.train, ds.segmentation, 4, rng).feature];
  double chi = 0;
  for (int c : counts) chi += (c - n / 8.0) * (c - n / 8.0) / (n / 8.0);
  EXPECT_GT(swapvae::testing::chi_square_p(chi, 7), 0.01) << chi;
}

TEST(ChiSquare, KnownQuantiles) {
  EXPECT_NEAR(swapvae::testing::chi_square_p(18.475, 7), 0.01, 1e-4);
  EXPECT_NEAR(swapvae::testing::chi_square_p(3.841, 1), 0.05, 1e-4);
  EXPECT_NEAR(swapvae::testing::chi_square_p(2.0, 2), std::exp(-1.0), 1e-12);
}

TEST(Loss, ReconstructionExamples) {
  Graph<double> g;
  Tensor<double> x({10, 3});
  Rng rng(6);
  for (auto& v : x.data) v = standard_normal(rng);
  EXPECT_EQ(recon_loss(g.constant(x), g.constant(x)).value()[0], 0.0);
  Tensor<double> y = x;
  y.at(4, 0) += 1.0;
  EXPECT_NEAR(recon_loss(g.constant(y), g.constant(x)).value()[0], 1.0 / 10.0, 1e-15);
}

TEST(Loss, ReconstructionLoopOracle) {
  Rng rng(7);
  const int batch = 3, n = 20;
  Tensor<double> a({batch * n, 3}), b({batch * n, 3});
  for (auto& v : a.data) v = standard_normal(rng);
  for (auto& v : b.data) v = standard_normal(rng);
  double oracle = 0;
  for (int m = 0; m < batch; ++m) {
    double per = 0;
    for (int v = 0; v < n; ++v) {
      for (int c = 0; c < 3; ++c) {
        const double d = a.at(m * n + v, c) - b.at(m * n + v, c);
        per += d * d;
      }
    }
    oracle += per / n;
  }
  oracle /= batch;
  Graph<double> g;
  EXPECT_NEAR(recon_loss(g.constant(a), g.constant(b)).value()[0], oracle, 1e-10);
}

TEST(Loss, LaplacianExamples) {
  Mesh t = tetrahedron();
  auto lap = build_laplacian(t.topology);
  Graph<double> g;
  Tensor<double> x({4, 3}, std::vector<double>(t.positions.values().begin(), t.positions.values().end()));
  EXPECT_NEAR(laplacian_loss(g.constant(x), lap, 1).value()[0], 4.0 / 3.0, 1e-12);
  Tensor<double> flat({4, 3}, 0.7);
  EXPECT_NEAR(laplacian_loss(g.constant(flat), lap, 1).value()[0], 0.0, 1e-15);
}

TEST(Loss, LaplacianLoopOracle) {
  Rng rng(8);
  Mesh m = random_manifold(rng);
  auto lap = build_laplacian(m.topology);
  const Index n = m.topology.num_vertices();
  Tensor<double> x({static_cast<std::size_t>(2 * n), 3});
  for (auto& v : x.data) v = standard_normal(rng);
  double oracle = 0;
  for (int b = 0; b < 2; ++b) {
    double per = 0;
    for (Index v = 0; v < n; ++v) {
      const auto& nb = m.topology.neighbors(v);
      double norm = 0;
      for (int c = 0; c < 3; ++c) {
        double mean = 0;
        for (Index e : nb) mean += x.at(static_cast<std::size_t>(b * n + e), c);
        mean /= static_cast<double>(nb.size());
        const double d = mean - x.at(static_cast<std::size_t>(b * n + v), c);
        norm += d * d;
      }
      per += std::sqrt(norm);
    }
    oracle += per / n;
  }
  Graph<double> g;
  EXPECT_NEAR(laplacian_loss(g.constant(x), lap, 2).value()[0], oracle / 2, 1e-9);
}

TEST(Loss, KlExamples) {
  Graph<double> g;
  EXPECT_EQ(kl_loss(g.constant(Tensor<double>({1, 4})), g.constant(Tensor<double>({1, 4}))).value()[0], 0.0);
  EXPECT_NEAR(kl_loss(g.constant(Tensor<double>({1, 1}, {1.0})), g.constant(Tensor<double>({1, 1}))).value()[0], 0.5,
              1e-15);
}

TEST(Loss, KlMonteCarlo) {
  const double mu = 0.7, logvar = -0.4, sigma = std::exp(0.5 * logvar);
  Rng rng(9);
  double acc = 0;
  const int n = 1000000;
  for (int i = 0; i < n; ++i) {
    const double z = mu + sigma * standard_normal(rng);
    const double log_q = -0.5 * std::pow((z - mu) / sigma, 2) - std::log(sigma);
    const double log_p = -0.5 * z * z;
    acc += log_q - log_p;
  }
  Graph<double> g;
  const double closed = kl_loss(g.constant(Tensor<double>({1, 1}, {mu})), g.constant(Tensor<double>({1, 1}, {logvar}))).value()[0];
  EXPECT_NEAR(acc / n, closed, 0.01 * closed);
}

TEST(Consistency, TermCountAndNormalizer) {
  ConsistencyIndex idx(4);
  EXPECT_EQ(idx.terms, 48u);
  EXPECT_DOUBLE_EQ(consistency_normalizer(4), 1.0 / 48.0);
}

TEST(Consistency, IdenticalGridIsSumOfMargins) {
  LatentPartition part({2, 2, 2, 2});
  std::vector<double> z(16 * 8, 0.3);
  EXPECT_DOUBLE_EQ(consistency_value(z, 4, 1, part), 1.0);
  EXPECT_DOUBLE_EQ(consistency_value(z, 4, 1, part, 0.2, 0.7), 0.9);
}

TEST(Consistency, WellSeparatedGridIsZero) {
  // z^f depends only on the column, z^c only on the row, with spacing 10.
  LatentPartition part({2, 2, 2});
  const int f = 1, side = 4, k = 6;
  std::vector<double> z(static_cast<std::size_t>(side * side * k));
  for (int i = 0; i < side; ++i) {
    for (int j = 0; j < side; ++j) {
      for (int c = 0; c < k; ++c) {
        const bool in_f = part.feature_of(c) == f;
        z[static_cast<std::size_t>((i * side + j) * k + c)] = 10.0 * (in_f ? j : i) + c;
      }
    }
  }
  EXPECT_EQ(consistency_value(z, side, f, part), 0.0);
  EXPECT_EQ(consistency_oracle(z, side, k, to_int(part.columns(f)), to_int(part.complement(f)), 0.5, 0.5), 0.0);
}

TEST(Consistency, MatchesTripleLoopOracle) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const int side = 2 + static_cast<int>(uniform_index(rng, 3));
    LatentPartition part({2, 3, 1, 2});
    const int f = static_cast<int>(uniform_index(rng, 4));
    std::vector<double> z(static_cast<std::size_t>(side * side * 8));
    for (auto& v : z) v = 0.5 * standard_normal(rng);
    EXPECT_NEAR(consistency_value(z, side, f, part, 0.5, 0.3),
                consistency_oracle(z, side, 8, to_int(part.columns(f)), to_int(part.complement(f)), 0.5, 0.3), 1e-10);
  }
}

TEST(Consistency, PermutationCovariant) {
  Rng rng(11);
  LatentPartition part({2, 2, 2, 2});
  const int side = 4, k = 8;
  std::vector<double> z(static_cast<std::size_t>(side * side * k));
  for (auto& v : z) v = standard_normal(rng);
  std::vector<int> perm{2, 0, 3, 1};
  std::vector<double> zp(z.size());
  for (int i = 0; i < side; ++i) {
    for (int j = 0; j < side; ++j) {
      for (int c = 0; c < k; ++c) {
        zp[static_cast<std::size_t>((i * side + j) * k + c)] = z[static_cast<std::size_t>((perm[i] * side + perm[j]) * k + c)];
      }
    }
  }
  EXPECT_NEAR(consistency_value(z, side, 2, part), consistency_value(zp, side, 2, part), 1e-12);
}

TEST(Consistency, ScalingTransformsHingeInputsAffinely) {
  Rng rng(12);
  LatentPartition part({2, 2});
  const int side = 3, k = 4;
  std::vector<double> z(static_cast<std::size_t>(side * side * k));
  for (auto& v : z) v = standard_normal(rng);
  const double c = 1.7;
  std::vector<double> zs = z;
  for (auto& v : zs) v *= c;
  // With zero margins each hinge input scales by c^2, so the loss does too.
  EXPECT_NEAR(consistency_value(zs, side, 0, part, 0, 0), c * c * consistency_value(z, side, 0, part, 0, 0), 1e-10);
  EXPECT_GE(consistency_value(z, side, 0, part), 0.0);
}

TEST(Consistency, GradientMatchesFiniteDifferences) {
  Rng rng(13);
  LatentPartition part({2, 2, 2, 2});
  Parameter<double> z("z", Tensor<double>({16, 8}));
  for (auto& v : z.value.data) v = standard_normal(rng);
  auto loss = [&](Graph<double>& g) { return latent_consistency_loss(g.param(z), 4, 3, part, 0.5, 0.5); };
  GradCheckOptions opt;
  opt.samples_per_tensor = 128;
  EXPECT_LT(grad_check(loss, {&z}, opt).max_relative_error, 1e-5);
}

TEST(Consistency, IncompleteGridRejected) {
  LatentPartition part({2, 2});
  Graph<double> g;
  EXPECT_THROW(latent_consistency_loss(g.constant(Tensor<double>({15, 4})), 4, 0, part, 0.5, 0.5), DataError);
}

TEST(TotalLoss, BreakdownAndAblationModes) {
  Mesh m = icosphere(1);
  auto lap = build_laplacian(m.topology);
  LatentPartition part({2, 2});
  Rng rng(14);
  Tensor<double> pred({4 * 42, 3}), target({4 * 42, 3}), mu({4, 4}), lv({4, 4});
  for (auto* t : {&pred, &target, &mu, &lv}) {
    for (auto& v : t->data) v = 0.5 * standard_normal(rng);
  }
  LossWeights w;
  w.alpha = 1;
  w.beta = 1e-4;
  w.kappa = 1;
  Graph<double> g;
  VariationalVars<double> vo{g.constant(mu), g.constant(lv)};
  auto z = g.constant(mu);
  auto r = total_loss(g.constant(pred), g.constant(target), vo, z, lap, part, 2, 1, w, 4);
  const auto& b = r.breakdown;
  EXPECT_NEAR(b.total, b.recon + w.alpha * b.laplacian + w.beta * b.kl + w.kappa * b.consistency, 1e-10);
  EXPECT_GT(b.consistency, 0.0);

  LossWeights vae_only = w;
  vae_only.kappa = 0;
  auto r0 = total_loss(g.constant(pred), g.constant(target), vo, z, lap, part, 2, 1, vae_only, 4);
  EXPECT_NEAR(r0.breakdown.total, b.recon + b.laplacian + 1e-4 * b.kl, 1e-10);

  LossWeights no_lap = w;
  no_lap.alpha = 0;
  auto r1 = total_loss(g.constant(pred), g.constant(target), vo, z, lap, part, 2, 1, no_lap, 4);
  EXPECT_NEAR(r1.breakdown.total, b.recon + 1e-4 * b.kl + b.consistency, 1e-10);

  LossWeights bad = w;
  bad.beta = -1;
  EXPECT_THROW(total_loss(g.constant(pred), g.constant(target), vo, z, lap, part, 2, 1, bad, 4), ConfigError);
}

TEST(TotalLoss, PerSampleReductionMatchesBatched) {
  Mesh m = icosphere(1);
  auto lap = build_laplacian(m.topology);
  Rng rng(15);
  const std::size_t batch = 3, n = 42;
  Tensor<double> pred({batch * n, 3}), target({batch * n, 3});
  for (auto* t : {&pred, &target}) {
    for (auto& v : t->data) v = standard_normal(rng);
  }
  Graph<double> g;
  const double br = recon_loss(g.constant(pred), g.constant(target)).value()[0];
  const double bl = laplacian_loss(g.constant(pred), lap, batch).value()[0];
  double sr = 0, sl = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    Tensor<double> p({n, 3}), t({n, 3});
    std::copy_n(pred.data.begin() + static_cast<std::ptrdiff_t>(b * n * 3), n * 3, p.data.begin());
    std::copy_n(target.data.begin() + static_cast<std::ptrdiff_t>(b * n * 3), n * 3, t.data.begin());
    sr += recon_loss(g.constant(p), g.constant(t)).value()[0] * static_cast<double>(n) / static_cast<double>(batch * n);
    sl += laplacian_loss(g.constant(p), lap, 1).value()[0] / static_cast<double>(batch);
  }
  EXPECT_NEAR(br, sr, 1e-10);
  EXPECT_NEAR(bl, sl, 1e-10);
}
