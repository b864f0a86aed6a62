#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "swapvae/dataset.hpp"
#include "swapvae/grad_check.hpp"
#include "swapvae/model.hpp"
#include "swapvae/objectives.hpp"

namespace swapvae::testing {

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("swapvae_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// Small dataset on icosphere-2 for fast training tests.
inline SyntheticDatasetConfig toy_dataset_config(int size = 64, std::uint64_t seed = 3) {
  SyntheticDatasetConfig c;
  c.icosphere_order = 2;
  c.features = 4;
  c.params_per_feature = 2;
  c.size = size;
  c.seed = seed;
  return c;
}

// Upper tail P[X >= x] of a chi-square variable with `dof` degrees of
// freedom, via the regularized incomplete gamma function Q(dof/2, x/2).
inline double chi_square_p(double x, int dof) {
  const double a = 0.5 * dof, z = 0.5 * x;
  if (z <= 0) return 1.0;
  const double lg = std::lgamma(a);
  if (z < a + 1) {
    double term = 1.0 / a, sum = term;
    for (int n = 1; n < 1000; ++n) {
      term *= z / (a + n);
      sum += term;
      if (std::abs(term) < std::abs(sum) * 1e-15) break;
    }
    return 1.0 - sum * std::exp(-z + a * std::log(z) - lg);
  }
  // Lentz continued fraction.
  double b = z + 1 - a, c = 1e300, d = 1 / b, h = d;
  for (int i = 1; i < 1000; ++i) {
    const double an = -i * (i - a);
    b += 2;
    d = an * d + b;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1) < 1e-15) break;
  }
  return std::exp(-z + a * std::log(z) - lg) * h;
}

// Gradient check of the whole training loss (encoder, reparameterization,
// decoder, all four terms) in float64 on one swap batch of the toy dataset.
inline GradCheckResult full_loss_grad_check(std::uint64_t seed, std::size_t samples_per_tensor = 50) {
  static const SyntheticDataset ds = generate_dataset(toy_dataset_config(72, 3));
  ModelConfig mc;
  mc.levels = 2;
  mc.channels = {8, 16};
  mc.latent_size = 8;
  mc.features = 4;
  const MeshOperators ops = build_operators(ds.topology, ds.template_positions, mc);
  SpiralVae<double> vae(mc, ops);
  Rng rng(seed);
  vae.initialize(rng);
  for (auto& p : vae.parameters()) {
    if (p.value.shape.size() == 1) {
      for (auto& v : p.value.data) v = 0.1 * standard_normal(rng);
    }
  }
  const SwapBatch b = build_swap_batch(ds.meshes, ds.splits.train, ds.segmentation, 16, rng);
  const std::size_t n = static_cast<std::size_t>(ds.topology.num_vertices());
  Tensor<double> x({16 * n, 3});
  for (std::size_t m = 0; m < 16; ++m) {
    const auto v = b.grid[m].values();
    std::copy(v.begin(), v.end(), x.data.begin() + static_cast<std::ptrdiff_t>(m * n * 3));
  }
  const std::uint64_t eps_seed = seed + 1000;
  auto loss = [&](Graph<double>& g) {
    Rng eps(eps_seed);
    Var<double> xin = g.constant(x);
    auto vo = vae.encode(g, xin, 16);
    Var<double> z = vae.reparameterize(g, vo, eps);
    Var<double> xp = vae.decode(g, z, 16);
    return total_loss(xp, xin, vo, z, ops.laplacian, vae.partition(), 4, b.feature, LossWeights{}, 16).total;
  };
  GradCheckOptions opt;
  opt.samples_per_tensor = samples_per_tensor;
  opt.seed = seed;
  return grad_check(loss, vae.parameter_ptrs(), opt);
}

}  // namespace swapvae::testing
