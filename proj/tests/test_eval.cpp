#include <gtest/gtest.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"
#include "swapvae/evaluation.hpp"
#include "swapvae/grad_check.hpp"
#include "swapvae/png.hpp"
#include "swapvae/trainer.hpp"

using namespace swapvae;

namespace {

std::vector<double> random_cloud(std::size_t n, Rng& rng, double spread = 1.0) {
  std::vector<double> p(n * 3);
  for (auto& v : p) v = spread * standard_normal(rng);
  return p;
}

double dist(const std::vector<double>& a, std::size_t i, const std::vector<double>& b, std::size_t j) {
  return std::sqrt(std::pow(a[3 * i] - b[3 * j], 2) + std::pow(a[3 * i + 1] - b[3 * j + 1], 2) +
                   std::pow(a[3 * i + 2] - b[3 * j + 2], 2));
}

double chamfer_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  auto one_way = [](const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0;
    for (std::size_t i = 0; i < x.size() / 3; ++i) {
      double best = 1e300;
      for (std::size_t j = 0; j < y.size() / 3; ++j) best = std::min(best, std::pow(dist(x, i, y, j), 2));
      s += best;
    }
    return s / static_cast<double>(x.size() / 3);
  };
  return one_way(a, b) + one_way(b, a);
}

double emd_bruteforce(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size() / 3;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = 1e300;
  do {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += dist(a, i, b, perm[i]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(n);
}

struct ToyModel {
  SyntheticDataset data = generate_dataset(swapvae::testing::toy_dataset_config(72, 3));
  std::unique_ptr<Trainer<double>> trainer;

  explicit ToyModel(int steps) {
    ModelConfig mc;
    mc.levels = 2;
    mc.channels = {8, 16};
    mc.latent_size = 8;
    mc.features = 4;
    TrainConfig tc;
    tc.epochs = 1;
    tc.lr = 1e-3;
    tc.precision = "float64";
    tc.seed = 2;
    trainer = std::make_unique<Trainer<double>>(data, mc, tc);
    trainer->run({}, steps);
  }
  SpiralVae<double>& vae() { return trainer->model(); }
  const ModelAssets& assets() const { return trainer->assets(); }
};

}  // namespace

TEST(Chamfer, Examples) {
  std::vector<double> a{0, 0, 0}, b{1, 0, 0};
  EXPECT_DOUBLE_EQ(chamfer(a, b), 2.0);
  std::vector<double> c{0, 0, 0, 2, 0, 0};
  // a->c: 0; c->a: (0 + 4) / 2.
  EXPECT_DOUBLE_EQ(chamfer(a, c), 2.0);
  EXPECT_EQ(chamfer(c, c), 0.0);
  EXPECT_THROW(chamfer(a, std::vector<double>{}), DataError);
}

TEST(Chamfer, MatchesLoopOracle) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    auto a = random_cloud(5 + uniform_index(rng, 30), rng), b = random_cloud(5 + uniform_index(rng, 30), rng);
    EXPECT_NEAR(chamfer(a, b), chamfer_oracle(a, b), 1e-12);
    EXPECT_DOUBLE_EQ(chamfer(a, b), chamfer(b, a));
  }
}

TEST(Emd, MatchesPermutationBruteForce) {
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    auto a = random_cloud(8, rng), b = random_cloud(8, rng);
    EXPECT_NEAR(emd(a, b), emd_bruteforce(a, b), 1e-12);
  }
}

TEST(Emd, Properties) {
  Rng rng(3);
  auto a = random_cloud(40, rng);
  EXPECT_EQ(emd(a, a), 0.0);
  auto shifted = a;
  for (std::size_t i = 0; i < shifted.size(); i += 3) {
    shifted[i] += 0.3;
    shifted[i + 1] -= 0.4;
  }
  EXPECT_NEAR(emd(a, shifted), 0.5, 1e-12);
  auto b = random_cloud(40, rng);
  EXPECT_NEAR(emd(a, b), emd(b, a), 1e-12);
  auto perm = b;
  std::vector<std::size_t> order(40);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < 40; ++i) std::copy_n(b.begin() + 3 * order[i], 3, perm.begin() + 3 * i);
  EXPECT_NEAR(emd(a, b), emd(a, perm), 1e-12);
  EXPECT_THROW(emd(a, random_cloud(39, rng)), DataError);
}

TEST(Emd, SubsamplingIsSharedAndCapped) {
  Rng rng(4);
  auto a = random_cloud(600, rng);
  EmdOptions opt;
  opt.max_points = 64;
  EXPECT_EQ(emd(a, a, opt), 0.0);
  auto b = a;
  for (std::size_t i = 0; i < b.size(); i += 3) b[i] += 1.0;
  EXPECT_NEAR(emd(a, b, opt), 1.0, 1e-12);
}

TEST(Hungarian, SmallKnownAssignment) {
  std::vector<double> cost{4, 1, 3, 2, 0, 5, 3, 2, 2};
  auto m = hungarian(cost, 3);
  EXPECT_EQ(m, (std::vector<int>{1, 0, 2}));
}

TEST(SetMetrics, MatchesDirectDefinitions) {
  Rng rng(5);
  std::vector<std::vector<double>> gen, ref;
  for (int i = 0; i < 7; ++i) gen.push_back(random_cloud(6, rng));
  for (int i = 0; i < 9; ++i) ref.push_back(random_cloud(6, rng, 1.3));
  const SetDistance d = [](PointSpan a, PointSpan b) { return chamfer(a, b); };
  auto m = set_metrics(cross_distances(gen, ref, d), self_distances(gen, d), self_distances(ref, d), 7, 9);

  double mmd = 0;
  for (const auto& r : ref) {
    double best = 1e300;
    for (const auto& g : gen) best = std::min(best, chamfer_oracle(g, r));
    mmd += best;
  }
  EXPECT_NEAR(m.mmd, mmd / 9, 1e-12);

  std::vector<bool> hit(9, false);
  for (const auto& g : gen) {
    std::size_t arg = 0;
    for (std::size_t r = 0; r < 9; ++r) {
      if (chamfer_oracle(g, ref[r]) < chamfer_oracle(g, ref[arg])) arg = r;
    }
    hit[arg] = true;
  }
  EXPECT_NEAR(m.coverage, 100.0 * std::count(hit.begin(), hit.end(), true) / 9.0, 1e-12);

  std::vector<std::vector<double>> all = gen;
  all.insert(all.end(), ref.begin(), ref.end());
  int correct = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    std::size_t arg = i == 0 ? 1 : 0;
    for (std::size_t j = 0; j < all.size(); ++j) {
      if (j != i && chamfer_oracle(all[i], all[j]) < chamfer_oracle(all[i], all[arg])) arg = j;
    }
    if ((arg < 7) == (i < 7)) ++correct;
  }
  EXPECT_NEAR(m.nna, std::abs(100.0 * correct / 16.0 - 50.0), 1e-12);
}

TEST(SetMetrics, IdenticalCollections) {
  Rng rng(6);
  std::vector<std::vector<double>> a;
  for (int i = 0; i < 5; ++i) a.push_back(random_cloud(4, rng));
  const SetDistance d = [](PointSpan x, PointSpan y) { return chamfer(x, y); };
  auto m = set_metrics(cross_distances(a, a, d), self_distances(a, d), self_distances(a, d), 5, 5);
  EXPECT_EQ(m.mmd, 0.0);
  EXPECT_EQ(m.coverage, 100.0);
  // Every point's nearest neighbour is its copy in the other set.
  EXPECT_EQ(m.nna, 50.0);
  EXPECT_THROW(set_metrics({}, {}, {}, 0, 3), DataError);
}

TEST(Jsd, Properties) {
  Rng rng(7);
  std::vector<std::vector<double>> a, b, far;
  for (int i = 0; i < 10; ++i) {
    a.push_back(random_cloud(50, rng, 0.2));
    b.push_back(random_cloud(50, rng, 0.2));
    auto f = random_cloud(50, rng, 0.05);
    for (std::size_t k = 0; k < f.size(); k += 3) f[k] += 5.0;
    far.push_back(f);
  }
  EXPECT_EQ(occupancy_jsd(a, a), 0.0);
  const double ab = occupancy_jsd(a, b);
  EXPECT_GT(ab, 0.0);
  EXPECT_NEAR(ab, occupancy_jsd(b, a), 1e-12);
  EXPECT_NEAR(occupancy_jsd(a, far), std::log(2.0), 1e-12);
  EXPECT_LE(ab, std::log(2.0));
}

TEST(Jsd, SingleVoxelOracle) {
  // Two clouds of one point each at opposite corners of the shared box.
  std::vector<std::vector<double>> a{{-1, -1, -1}}, b{{1, 1, 1}}, both{{-1, -1, -1}, {1, 1, 1}};
  EXPECT_NEAR(occupancy_jsd(a, b), std::log(2.0), 1e-12);
  // p = (1, 0), q = (1/2, 1/2): JS = 1/2 [ln(4/3)] + 1/2 [1/2 ln(2/3) + 1/2 ln 2].
  const double oracle = 0.5 * std::log(4.0 / 3.0) + 0.25 * std::log(2.0 / 3.0) + 0.25 * std::log(2.0);
  EXPECT_NEAR(occupancy_jsd(a, {both}), oracle, 1e-12);
}

TEST(Diversity, Examples) {
  Rng rng(8);
  VertexEmbedding x(5), y(5);
  for (double& v : y.values()) v = 0;
  for (Index i = 0; i < 5; ++i) y(i, 0) = 2.0;
  EXPECT_EQ(diversity({x, x, x, x}, rng), 0.0);
  EXPECT_DOUBLE_EQ(diversity({x, y}, rng), 2.0);
  EXPECT_EQ(diversity({x}, rng), 0.0);
}

TEST(Traversal, ZeroModelGivesZeroMatrix) {
  ToyModel toy(0);
  for (auto& p : toy.vae().parameters()) std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
  auto tm = traversal_matrix(toy.vae(), toy.assets());
  EXPECT_EQ(tm.latents, 8);
  EXPECT_EQ(tm.features, 4);
  for (double v : tm.values) EXPECT_EQ(v, 0.0);
  auto s = disentanglement_score(tm, toy.vae().partition());
  EXPECT_EQ(s.pass_fraction, 0.0);
}

TEST(Traversal, EntriesMatchDirectDecodes) {
  ToyModel toy(5);
  auto tm = traversal_matrix(toy.vae(), toy.assets(), 2.0);
  const auto& seg = toy.assets().segmentation;
  for (int i = 0; i < 8; ++i) {
    auto lo = traverse(toy.vae(), toy.assets(), {}, i, -2.0);
    auto hi = traverse(toy.vae(), toy.assets(), {}, i, 2.0);
    for (int f = 0; f < 4; ++f) {
      double s = 0;
      for (Index v : seg.vertices(f)) s += (hi.point(v) - lo.point(v)).norm();
      EXPECT_NEAR(tm.at(i, f), s / static_cast<double>(seg.vertices(f).size()), 1e-12);
    }
  }
  EXPECT_THROW(traverse(toy.vae(), toy.assets(), {}, 8, 1.0), DataError);
}

TEST(Disentanglement, ScoreExamples) {
  TraversalMatrix tm;
  tm.latents = 4;
  tm.features = 2;
  tm.values = {6, 1,    // own 6, other 1: ratio 6
               2, 1,    // ratio 2
               0, 5,    // latent 2 belongs to feature 1: ratio 5 / 0 -> inf
               0, 0};   // no response: ratio 0
  LatentPartition part({2, 2});
  auto s = disentanglement_score(tm, part);
  EXPECT_DOUBLE_EQ(s.ratios[0], 6.0);
  EXPECT_DOUBLE_EQ(s.ratios[1], 2.0);
  EXPECT_TRUE(std::isinf(s.ratios[2]));
  EXPECT_EQ(s.ratios[3], 0.0);
  EXPECT_DOUBLE_EQ(s.pass_fraction, 0.5);
  EXPECT_THROW(disentanglement_score(tm, LatentPartition({1, 1})), DataError);
}

TEST(Reconstruction, MatchesPerMeshEncodeDecode) {
  ToyModel toy(8);
  auto ck = toy.trainer->checkpoint();
  auto m = load_model<double>(ck);
  std::vector<VertexEmbedding> meshes(toy.data.meshes.begin(), toy.data.meshes.begin() + 20);
  auto errs = reconstruction_errors(toy.vae(), toy.assets(), meshes, 7);
  ASSERT_EQ(errs.size(), 20u);
  for (std::size_t i = 0; i < meshes.size(); ++i) {
    auto [mu, lv] = m.encode(meshes[i]);
    auto y = m.decode(mu);
    double s = 0;
    for (Index v = 0; v < y.rows(); ++v) s += (y.point(v) - meshes[i].point(v)).norm();
    EXPECT_NEAR(errs[i], s / y.rows(), 1e-10);
  }
  auto r = summarize_errors(errs);
  EXPECT_NEAR(r.mean, std::accumulate(errs.begin(), errs.end(), 0.0) / 20, 1e-15);
  EXPECT_EQ(r.max, *std::max_element(errs.begin(), errs.end()));
}

TEST(Generation, ReportOnToyModel) {
  ToyModel toy(8);
  Rng rng(9);
  GenerationOptions opt;
  opt.samples = 12;
  opt.emd_max_points = 32;
  std::vector<VertexEmbedding> ref(toy.data.meshes.begin(), toy.data.meshes.begin() + 10);
  auto r = generation_report(toy.vae(), toy.assets(), ref, rng, opt);
  EXPECT_EQ(r.samples, 12u);
  EXPECT_EQ(r.references, 10u);
  EXPECT_EQ(r.points, 162u);
  EXPECT_EQ(r.emd_points, 32u);
  for (double v : {r.diversity, r.jsd, r.cd.mmd, r.cd.coverage, r.cd.nna, r.emd.mmd, r.reconstruction.mean}) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0);
  }
  auto j = to_json_report(r);
  EXPECT_TRUE(j.contains("emd"));
  EXPECT_EQ(j.at("cd").at("cov"), r.cd.coverage);
}

TEST(Fit, RecoversDecodedTarget) {
  ToyModel toy(16);
  Rng rng(10);
  std::vector<double> zstar(8);
  for (auto& v : zstar) v = standard_normal(rng);
  auto target = decode_batch(toy.vae(), toy.assets(), zstar, 1).front();
  const auto& lm = toy.data.landmarks;
  std::vector<double> lm_pos;
  for (Index l : lm) {
    for (int c = 0; c < 3; ++c) lm_pos.push_back(target(l, c));
  }
  FitSchedule sched;
  sched.landmark_iterations = 60;
  sched.chamfer_iterations = 60;
  sched.lr = 5e-2;
  auto r = fit_target(toy.vae(), toy.assets(), lm, lm_pos, target.values(), sched);
  ASSERT_EQ(r.loss_trace.size(), 120u);
  EXPECT_LT(r.final_error, 0.5 * r.error_trace.front());
  EXPECT_EQ(r.final_errors.size(), 162u);
  EXPECT_THROW(fit_target(toy.vae(), toy.assets(), {999}, std::vector<double>{0, 0, 0}, target.values()), DataError);
}

TEST(ChamferOp, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  Parameter<double> x("x", Tensor<double>({12, 3}));
  for (auto& v : x.value.data) v = standard_normal(rng);
  auto y = std::make_shared<const std::vector<double>>(random_cloud(9, rng));
  auto loss = [&](Graph<double>& g) { return ops::chamfer(g.param(x), y); };
  EXPECT_LT(grad_check(loss, {&x}).max_relative_error, 1e-5);
  Graph<double> g;
  EXPECT_NEAR(ops::chamfer(g.constant(x.value), y).value()[0],
              chamfer_oracle(x.value.data, *y), 1e-12);
}

TEST(Png, EncodesDecodableImage) {
  auto img = heatmap({0, 1, 2, 3, 4, 5}, 2, 3, 4);
  ASSERT_EQ(img.width, 12);
  ASSERT_EQ(img.height, 8);
  const auto bytes = encode_png(img);
  ASSERT_EQ(bytes.substr(0, 8), std::string("\x89PNG\r\n\x1a\n", 8));
  auto be32 = [&](std::size_t at) {
    return (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at])) << 24) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 1])) << 16) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 2])) << 8) |
           static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 3]));
  };
  EXPECT_EQ(bytes.substr(12, 4), "IHDR");
  EXPECT_EQ(be32(16), 12u);
  EXPECT_EQ(be32(20), 8u);
  // Walk chunks, checking every CRC and inflating IDAT.
  std::size_t at = 8;
  std::string idat;
  while (at < bytes.size()) {
    const auto len = be32(at);
    const std::string type = bytes.substr(at + 4, 4);
    const auto crc = crc32(0, reinterpret_cast<const Bytef*>(bytes.data() + at + 4), len + 4);
    EXPECT_EQ(be32(at + 8 + len), crc) << type;
    if (type == "IDAT") idat += bytes.substr(at + 8, len);
    at += 12 + len;
  }
  EXPECT_EQ(at, bytes.size());
  std::string raw(8 * (1 + 12 * 3), '\0');
  uLongf size = raw.size();
  ASSERT_EQ(uncompress(reinterpret_cast<Bytef*>(raw.data()), &size, reinterpret_cast<const Bytef*>(idat.data()),
                       idat.size()),
            Z_OK);
  ASSERT_EQ(size, raw.size());
  for (int y = 0; y < 8; ++y) {
    EXPECT_EQ(raw[y * 37], '\0');
    for (int x = 0; x < 36; ++x) EXPECT_EQ(static_cast<std::uint8_t>(raw[y * 37 + 1 + x]), img.pixels[y * 36 + x]);
  }
  EXPECT_EQ(heat_color(0.0), heat_color(-3.0));
  EXPECT_NE(heat_color(0.0), heat_color(1.0));
}
