#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <vector>

#include <nlohmann/json.hpp>

#include "mesh_io.hpp"
#include "rng.hpp"
#include "shapes.hpp"

namespace swapvae {

struct SyntheticDatasetConfig {
  int icosphere_order = 3;
  int features = 8;
  int params_per_feature = 3;
  double amplitude = 0.15;  // fraction of the template radius
  int size = 2000;
  std::uint64_t seed = 0;

  void validate() const {
    if (features < 2) throw ConfigError("dataset.features must be >= 2");
    if (params_per_feature < 1) throw ConfigError("dataset.params_per_feature must be >= 1");
    if (!(amplitude > 0)) throw ConfigError("dataset.amplitude must be > 0");
    if (size < 1) throw ConfigError("dataset.size must be >= 1");
    if (icosphere_order < 0) throw ConfigError("dataset.icosphere_order must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const SyntheticDatasetConfig& c) {
  j = {{"icosphere_order", c.icosphere_order}, {"features", c.features},
       {"params_per_feature", c.params_per_feature}, {"amplitude", c.amplitude},
       {"size", c.size}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticDatasetConfig& c) {
  j.at("icosphere_order").get_to(c.icosphere_order);
  j.at("features").get_to(c.features);
  j.at("params_per_feature").get_to(c.params_per_feature);
  j.at("amplitude").get_to(c.amplitude);
  j.at("size").get_to(c.size);
  j.at("seed").get_to(c.seed);
}

struct DatasetSplits {
  std::vector<Index> train, val, test;
};

// Ground-truth factors of every identity: size x features x params, in [-1, 1].
struct FactorTable {
  int features = 0;
  int params = 0;
  std::vector<double> values;

  std::size_t identities() const { return values.size() / static_cast<std::size_t>(features * params); }
  std::span<const double> identity(std::size_t m) const {
    const std::size_t w = static_cast<std::size_t>(features * params);
    return {values.data() + m * w, w};
  }
};

// Deformation model: one smooth displacement field per (feature, param),
// each vanishing outside the interior of its feature region.
struct DeformationBasis {
  int features = 0;
  int params = 0;
  double amplitude = 0.0;
  std::vector<std::vector<double>> fields;  // [feature * params + q] -> N x 3

  VertexEmbedding synthesize(const VertexEmbedding& base, std::span<const double> factors) const {
    VertexEmbedding out = base;
    auto v = out.values();
    for (int f = 0; f < features; ++f) {
      for (int q = 0; q < params; ++q) {
        const double c = amplitude * factors[static_cast<std::size_t>(f * params + q)];
        const auto& field = fields[static_cast<std::size_t>(f * params + q)];
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += c * field[i];
      }
    }
    return out;
  }
};

// Farthest-point seeds starting from `first`, Euclidean distance.
inline std::vector<Index> farthest_point_seeds(const VertexEmbedding& x, int count, Index first) {
  std::vector<Index> seeds{first};
  std::vector<double> dist(static_cast<std::size_t>(x.rows()), std::numeric_limits<double>::infinity());
  while (static_cast<int>(seeds.size()) < count) {
    const Eigen::Vector3d s = x.point(seeds.back());
    Index best = 0;
    for (Index v = 0; v < x.rows(); ++v) {
      dist[v] = std::min(dist[v], (x.point(v) - s).squaredNorm());
      if (dist[v] > dist[best]) best = v;
    }
    seeds.push_back(best);
  }
  return seeds;
}

// Nearest-seed partition; ties go to the lower seed.
inline FeatureSegmentation nearest_seed_segmentation(const VertexEmbedding& x, const std::vector<Index>& seeds) {
  std::vector<Index> labels(static_cast<std::size_t>(x.rows()));
  for (Index v = 0; v < x.rows(); ++v) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const double d = (x.point(v) - x.point(seeds[s])).squaredNorm();
      if (d < best) {
        best = d;
        labels[v] = static_cast<Index>(s);
      }
    }
  }
  std::vector<std::string> names;
  for (std::size_t s = 0; s < seeds.size(); ++s) names.push_back("region" + std::to_string(s));
  return FeatureSegmentation(std::move(labels), std::move(names));
}

// Hop distance of each vertex to the border of its own region; vertices with a
// neighbour in another region are at depth 0.
inline std::vector<int> region_depth(const MeshTopology& topo, const FeatureSegmentation& seg) {
  std::vector<int> depth(static_cast<std::size_t>(topo.num_vertices()), -1);
  std::deque<Index> queue;
  for (Index v = 0; v < topo.num_vertices(); ++v) {
    for (Index w : topo.neighbors(v)) {
      if (seg.label(w) != seg.label(v)) {
        depth[v] = 0;
        queue.push_back(v);
        break;
      }
    }
  }
  while (!queue.empty()) {
    Index v = queue.front();
    queue.pop_front();
    for (Index w : topo.neighbors(v)) {
      if (depth[w] < 0 && seg.label(w) == seg.label(v)) {
        depth[w] = depth[v] + 1;
        queue.push_back(w);
      }
    }
  }
  return depth;
}

// Radial bumps with weight (1 - cos(pi * depth / max_depth)) / 2, modulated by
// tangential ramps so each region gets `params` independent shape modes.
inline DeformationBasis build_deformation_basis(const MeshTopology& topo, const VertexEmbedding& tmpl,
                                                const FeatureSegmentation& seg, int params, double amplitude) {
  DeformationBasis basis;
  basis.features = seg.num_features();
  basis.params = params;
  const auto n = static_cast<std::size_t>(tmpl.rows());
  double radius = 0.0;
  for (Index v = 0; v < tmpl.rows(); ++v) radius = std::max(radius, tmpl.point(v).norm());
  basis.amplitude = amplitude * radius;

  const auto depth = region_depth(topo, seg);
  for (int f = 0; f < seg.num_features(); ++f) {
    const auto& members = seg.vertices(f);
    int max_depth = 0;
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    for (Index v : members) {
      max_depth = std::max(max_depth, depth[v]);
      centroid += tmpl.point(v);
    }
    if (max_depth == 0) throw DataError("degenerate region " + std::to_string(f) + " has no interior vertices");
    centroid /= static_cast<double>(members.size());
    const Eigen::Vector3d axis = centroid.norm() > 0 ? centroid.normalized() : Eigen::Vector3d::UnitZ();
    Eigen::Vector3d t1 = axis.unitOrthogonal();
    Eigen::Vector3d t2 = axis.cross(t1);
    double extent = 0.0;
    for (Index v : members) {
      const Eigen::Vector3d d = tmpl.point(v) - centroid;
      extent = std::max({extent, std::abs(d.dot(t1)), std::abs(d.dot(t2))});
    }
    if (extent <= 0) extent = 1.0;

    for (int q = 0; q < params; ++q) {
      std::vector<double> field(n * 3, 0.0);
      for (Index v : members) {
        const double t = static_cast<double>(depth[v]) / max_depth;
        const double w = 0.5 * (1.0 - std::cos(std::numbers::pi * t));
        const Eigen::Vector3d p = tmpl.point(v);
        const Eigen::Vector3d normal = p.norm() > 0 ? p.normalized() : axis;
        const double u1 = (p - centroid).dot(t1) / extent;
        const double u2 = (p - centroid).dot(t2) / extent;
        double mod = 1.0;
        switch (q % 4) {
          case 0: mod = 1.0; break;
          case 1: mod = u1; break;
          case 2: mod = u2; break;
          case 3: mod = u1 * u2; break;
        }
        if (q >= 4) mod *= w;  // sharper variants for large param counts
        const Eigen::Vector3d d = w * mod * normal;
        for (int c = 0; c < 3; ++c) field[static_cast<std::size_t>(v) * 3 + c] = d[c];
      }
      basis.fields.push_back(std::move(field));
    }
  }
  return basis;
}

inline DatasetSplits make_splits(int size, Rng& rng) {
  std::vector<Index> order(static_cast<std::size_t>(size));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto train = static_cast<std::size_t>(std::floor(0.9 * size));
  const auto val = std::min(static_cast<std::size_t>(std::ceil(0.05 * size)), order.size() - train);
  DatasetSplits s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(train), order.begin() + static_cast<std::ptrdiff_t>(train + val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(train + val), order.end());
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

struct SyntheticDataset {
  SyntheticDatasetConfig config;
  MeshTopology topology;
  VertexEmbedding template_positions;
  FeatureSegmentation segmentation;
  DeformationBasis basis;
  FactorTable factors;
  std::vector<VertexEmbedding> meshes;
  DatasetSplits splits;
  std::vector<Index> seeds;
  std::vector<Index> landmarks;

  std::vector<VertexEmbedding> split_meshes(const std::vector<Index>& ids) const {
    std::vector<VertexEmbedding> out;
    for (Index i : ids) out.push_back(meshes[i]);
    return out;
  }
};

namespace detail {

// Region seeds plus two extra interior vertices per region (farthest from the
// seed, then farthest from both), in region order.
inline std::vector<Index> synthetic_landmarks(const VertexEmbedding& x, const FeatureSegmentation& seg,
                                              const std::vector<Index>& seeds) {
  std::vector<Index> out(seeds.begin(), seeds.end());
  for (int f = 0; f < seg.num_features(); ++f) {
    std::vector<Index> chosen{seeds[f]};
    for (int extra = 0; extra < 2; ++extra) {
      Index best = -1;
      double best_d = -1.0;
      for (Index v : seg.vertices(f)) {
        double d = std::numeric_limits<double>::infinity();
        for (Index c : chosen) d = std::min(d, (x.point(v) - x.point(c)).squaredNorm());
        if (d > best_d) {
          best_d = d;
          best = v;
        }
      }
      if (best >= 0 && best_d > 0) {
        chosen.push_back(best);
        out.push_back(best);
      }
    }
  }
  return out;
}

inline void finish_dataset(SyntheticDataset& ds) {
  ds.basis = build_deformation_basis(ds.topology, ds.template_positions, ds.segmentation,
                                     ds.config.params_per_feature, ds.config.amplitude);
  ds.meshes.clear();
  for (std::size_t m = 0; m < ds.factors.identities(); ++m) {
    ds.meshes.push_back(ds.basis.synthesize(ds.template_positions, ds.factors.identity(m)));
  }
  ds.landmarks = synthetic_landmarks(ds.template_positions, ds.segmentation, ds.seeds);
}

}  // namespace detail

inline SyntheticDataset generate_dataset(const SyntheticDatasetConfig& cfg) {
  cfg.validate();
  SyntheticDataset ds;
  ds.config = cfg;
  Mesh sphere = icosphere(cfg.icosphere_order);
  if (cfg.features > sphere.topology.num_vertices()) throw DataError("feature count exceeds vertex count");
  ds.topology = sphere.topology;
  ds.template_positions = sphere.positions;
  Rng rng = make_stream(cfg.seed, Stream::kDataset);
  const auto first = static_cast<Index>(uniform_index(rng, static_cast<std::size_t>(sphere.topology.num_vertices())));
  ds.seeds = farthest_point_seeds(ds.template_positions, cfg.features, first);
  ds.segmentation = nearest_seed_segmentation(ds.template_positions, ds.seeds);
  ds.factors.features = cfg.features;
  ds.factors.params = cfg.params_per_feature;
  ds.factors.values.resize(static_cast<std::size_t>(cfg.size) * cfg.features * cfg.params_per_feature);
  for (auto& v : ds.factors.values) v = uniform(rng, -1.0, 1.0);
  ds.splits = make_splits(cfg.size, rng);
  detail::finish_dataset(ds);
  return ds;
}

// Output equals dst on every vertex outside feature f and src inside it.
inline VertexEmbedding swap_feature(const VertexEmbedding& dst, const VertexEmbedding& src,
                                    const FeatureSegmentation& seg, int f) {
  require(dst.rows() == src.rows() && dst.rows() == seg.num_vertices(), "swap_feature topology mismatch");
  require(f >= 0 && f < seg.num_features(), "feature id out of range");
  VertexEmbedding out = dst;
  for (Index v : seg.vertices(f)) {
    for (int c = 0; c < 3; ++c) out(v, c) = src(v, c);
  }
  return out;
}

// sqrt(B) x sqrt(B) grid, row-major: grid[i * side + j] = swap(dst = X_ii, src = X_jj, f).
struct SwapBatch {
  int side = 0;
  int feature = 0;
  std::vector<Index> identities;  // dataset ids of the diagonal
  std::vector<VertexEmbedding> grid;

  int size() const { return side * side; }
  const VertexEmbedding& at(int i, int j) const { return grid[static_cast<std::size_t>(i * side + j)]; }
};

inline int perfect_square_root(int b) {
  const int s = static_cast<int>(std::lround(std::sqrt(static_cast<double>(b))));
  if (b < 1 || s * s != b) throw DataError("batch size " + std::to_string(b) + " is not a perfect square");
  return s;
}

// Draws side distinct identities from `pool`, then one feature uniformly.
inline SwapBatch build_swap_batch(const std::vector<VertexEmbedding>& meshes, const std::vector<Index>& pool,
                                  const FeatureSegmentation& seg, int batch_size, Rng& rng) {
  SwapBatch b;
  b.side = perfect_square_root(batch_size);
  require(static_cast<std::size_t>(b.side) <= pool.size(), "batch needs more identities than the pool holds");
  std::vector<Index> candidates = pool;
  for (int s = 0; s < b.side; ++s) {
    const std::size_t k = s + uniform_index(rng, candidates.size() - s);
    std::swap(candidates[s], candidates[k]);
    b.identities.push_back(candidates[s]);
  }
  b.feature = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(seg.num_features())));
  for (int i = 0; i < b.side; ++i) {
    for (int j = 0; j < b.side; ++j) {
      if (i == j) {
        b.grid.push_back(meshes[b.identities[i]]);
      } else {
        b.grid.push_back(swap_feature(meshes[b.identities[i]], meshes[b.identities[j]], seg, b.feature));
      }
    }
  }
  return b;
}

// Directory layout: template.ply, segmentation.json, factors.bin, splits.json,
// landmarks.json, dataset.json.
inline void save_dataset(const std::filesystem::path& dir, const SyntheticDataset& ds) {
  std::filesystem::create_directories(dir);
  save_mesh(dir / "template.ply", ds.topology, ds.template_positions);
  save_segmentation(dir / "segmentation.json", ds.segmentation);
  {
    std::ofstream out(dir / "factors.bin", std::ios::binary);
    const char magic[8] = {'S', 'W', 'F', 'A', 'C', 'T', '0', '1'};
    out.write(magic, 8);
    detail::write_le<std::uint64_t>(out, ds.factors.identities());
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.factors.features));
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.factors.params));
    for (double v : ds.factors.values) detail::write_le(out, v);
  }
  {
    std::ofstream out(dir / "splits.json");
    out << nlohmann::json{{"train", ds.splits.train}, {"val", ds.splits.val}, {"test", ds.splits.test}}.dump() << '\n';
  }
  {
    std::ofstream out(dir / "landmarks.json");
    out << nlohmann::json{{"seeds", ds.seeds}, {"landmarks", ds.landmarks}}.dump() << '\n';
  }
  {
    std::ofstream out(dir / "dataset.json");
    out << nlohmann::json(ds.config).dump(2) << '\n';
  }
}

inline SyntheticDataset load_dataset(const std::filesystem::path& dir) {
  auto read_json = [&](const char* name) {
    std::ifstream in(dir / name);
    if (!in) throw DataError("missing dataset file " + (dir / name).string());
    try {
      return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed ") + name + ": " + e.what());
    }
  };
  SyntheticDataset ds;
  ds.config = read_json("dataset.json").get<SyntheticDatasetConfig>();
  Mesh m = load_mesh(dir / "template.ply");
  ds.topology = std::move(m.topology);
  ds.template_positions = std::move(m.positions);
  ds.segmentation = load_segmentation(dir / "segmentation.json", ds.topology);
  {
    std::ifstream in(dir / "factors.bin", std::ios::binary);
    if (!in) throw DataError("missing dataset file factors.bin");
    char magic[8];
    in.read(magic, 8);
    if (std::string(magic, 8) != "SWFACT01") throw DataError("bad factors.bin magic");
    const auto count = detail::read_le<std::uint64_t>(in);
    ds.factors.features = static_cast<int>(detail::read_le<std::uint32_t>(in));
    ds.factors.params = static_cast<int>(detail::read_le<std::uint32_t>(in));
    ds.factors.values.resize(count * ds.factors.features * ds.factors.params);
    for (auto& v : ds.factors.values) v = detail::read_le<double>(in);
  }
  auto splits = read_json("splits.json");
  ds.splits.train = splits.at("train").get<std::vector<Index>>();
  ds.splits.val = splits.at("val").get<std::vector<Index>>();
  ds.splits.test = splits.at("test").get<std::vector<Index>>();
  auto lm = read_json("landmarks.json");
  ds.seeds = lm.at("seeds").get<std::vector<Index>>();
  detail::finish_dataset(ds);
  return ds;
}

}  // namespace swapvae
