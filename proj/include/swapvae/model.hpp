#pragma once

#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "graph.hpp"
#include "laplacian.hpp"
#include "quadric.hpp"
#include "rng.hpp"
#include "spiral.hpp"

namespace swapvae {

struct ModelConfig {
  int levels = 3;
  // Output channels of each encoder convolution; the generator mirrors them.
  std::vector<int> channels{32, 32, 64};
  int spiral_length = 9;
  int dilation = 1;
  double sampling_factor = 4.0;
  int latent_size = 32;
  int features = 8;
  // Optional explicit per-feature latent sizes (must sum to latent_size).
  std::vector<int> latent_split;

  void validate() const {
    if (levels < 1) throw ConfigError("model.levels must be >= 1");
    if (static_cast<int>(channels.size()) != levels) throw ConfigError("model.channels must have one entry per level");
    if (features < 1) throw ConfigError("model.features must be >= 1");
    if (latent_split.empty()) {
      if (latent_size % features != 0) throw ConfigError("model.latent_size must be divisible by model.features");
    } else {
      if (static_cast<int>(latent_split.size()) != features) throw ConfigError("model.latent_split needs one entry per feature");
      if (std::accumulate(latent_split.begin(), latent_split.end(), 0) != latent_size) {
        throw ConfigError("model.latent_split must sum to model.latent_size");
      }
    }
    if (spiral_length < 1 || dilation < 1) throw ConfigError("spiral length and dilation must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"levels", c.levels},           {"channels", c.channels},       {"spiral_length", c.spiral_length},
       {"dilation", c.dilation},       {"sampling_factor", c.sampling_factor},
       {"latent_size", c.latent_size}, {"features", c.features},       {"latent_split", c.latent_split}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("levels").get_to(c.levels);
  j.at("channels").get_to(c.channels);
  j.at("spiral_length").get_to(c.spiral_length);
  j.at("dilation").get_to(c.dilation);
  j.at("sampling_factor").get_to(c.sampling_factor);
  j.at("latent_size").get_to(c.latent_size);
  j.at("features").get_to(c.features);
  j.at("latent_split").get_to(c.latent_split);
}

// Index ranges of the per-feature latent subsets.
class LatentPartition {
 public:
  LatentPartition() = default;
  explicit LatentPartition(std::vector<int> sizes) : sizes_(std::move(sizes)) {
    for (int s : sizes_) offsets_.push_back(offsets_.back() + s);
  }
  static LatentPartition from_config(const ModelConfig& c) {
    if (!c.latent_split.empty()) return LatentPartition(c.latent_split);
    return LatentPartition(std::vector<int>(static_cast<std::size_t>(c.features), c.latent_size / c.features));
  }

  int features() const { return static_cast<int>(sizes_.size()); }
  int total() const { return offsets_.back(); }
  int begin(int f) const { return offsets_[f]; }
  int end(int f) const { return offsets_[f + 1]; }
  int size(int f) const { return sizes_[f]; }
  int feature_of(int index) const {
    for (int f = 0; f < features(); ++f) {
      if (index < offsets_[f + 1]) return f;
    }
    return -1;
  }

  std::vector<std::size_t> columns(int f) const {
    check_feature(f);
    std::vector<std::size_t> c;
    for (int i = begin(f); i < end(f); ++i) c.push_back(static_cast<std::size_t>(i));
    return c;
  }
  std::vector<std::size_t> complement(int f) const {
    check_feature(f);
    std::vector<std::size_t> c;
    for (int i = 0; i < total(); ++i) {
      if (i < begin(f) || i >= end(f)) c.push_back(static_cast<std::size_t>(i));
    }
    return c;
  }
  void check_feature(int f) const {
    if (f < 0 || f >= features()) throw DataError("feature id " + std::to_string(f) + " out of range");
  }

 private:
  std::vector<int> sizes_;
  std::vector<int> offsets_{0};
};

// z = (z^f | z^c): the swapped subset and the remaining subsets in order.
template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_latent(std::span<const T> z, const LatentPartition& part, int f) {
  part.check_feature(f);
  require(static_cast<int>(z.size()) == part.total(), "latent length mismatch");
  std::vector<T> zf, zc;
  for (auto c : part.columns(f)) zf.push_back(z[c]);
  for (auto c : part.complement(f)) zc.push_back(z[c]);
  return {zf, zc};
}

template <typename T>
std::vector<T> merge_latent(std::span<const T> zf, std::span<const T> zc, const LatentPartition& part, int f) {
  part.check_feature(f);
  std::vector<T> z(static_cast<std::size_t>(part.total()));
  auto cf = part.columns(f);
  auto cc = part.complement(f);
  require(zf.size() == cf.size() && zc.size() == cc.size(), "latent subset length mismatch");
  for (std::size_t i = 0; i < cf.size(); ++i) z[cf[i]] = zf[i];
  for (std::size_t i = 0; i < cc.size(); ++i) z[cc[i]] = zc[i];
  return z;
}

// Precomputed operators for every resolution level of the template.
struct MeshOperators {
  std::vector<MeshTopology> topologies;       // levels + 1, finest first
  std::vector<VertexEmbedding> positions;     // reference geometry per level
  std::vector<SpiralIndex> spirals;           // levels (one per convolved resolution)
  std::vector<SamplingTransform> transforms;  // levels (level k -> k + 1)
  LaplacianOperator laplacian;                // finest level
  std::vector<std::shared_ptr<const std::vector<Index>>> spiral_tables;

  Index vertices(int level) const { return topologies[level].num_vertices(); }

  std::string hash() const {
    Fnv1a h;
    for (const auto& t : topologies) {
      const auto n = t.num_vertices();
      h.update(&n, sizeof(n));
      h.update(t.faces());
    }
    for (const auto& s : spirals) s.hash_into(h);
    for (const auto& q : transforms) q.hash_into(h);
    laplacian.matrix.hash_into(h);
    return h.hex();
  }
};

inline MeshOperators build_operators(const MeshTopology& topo, const VertexEmbedding& reference,
                                     const ModelConfig& config) {
  config.validate();
  MeshOperators ops;
  ops.topologies.push_back(topo);
  ops.positions.push_back(reference);
  for (int level = 0; level < config.levels; ++level) {
    ops.spirals.push_back(build_spirals(ops.topologies.back(), config.spiral_length, config.dilation));
    auto coarse = quadric_simplify(ops.topologies.back(), ops.positions.back(), config.sampling_factor);
    ops.transforms.push_back(std::move(coarse.transform));
    ops.topologies.push_back(std::move(coarse.topology));
    ops.positions.push_back(std::move(coarse.positions));
  }
  ops.laplacian = build_laplacian(topo);
  for (const auto& s : ops.spirals) ops.spiral_tables.push_back(std::make_shared<const std::vector<Index>>(s.table));
  return ops;
}

template <typename T>
struct VariationalVars {
  Var<T> mu;
  Var<T> logvar;
};

// Spiral-convolution VAE: encoder [conv -> ELU -> pool] x L with two linear
// heads, generator linear -> [unpool -> conv -> ELU] x L -> linear conv.
template <typename T>
class SpiralVae {
 public:
  static constexpr T kLogvarMin = T(-10);
  static constexpr T kLogvarMax = T(10);

  SpiralVae(ModelConfig config, const MeshOperators& ops) : config_(std::move(config)), ops_(&ops) {
    config_.validate();
    require(static_cast<int>(ops.spirals.size()) == config_.levels, "operator hierarchy depth does not match model");
    partition_ = LatentPartition::from_config(config_);
    const std::size_t l = static_cast<std::size_t>(config_.spiral_length);
    const std::size_t k = static_cast<std::size_t>(config_.latent_size);
    const auto& ch = config_.channels;
    int in = 3;
    for (int i = 0; i < config_.levels; ++i) {
      add_linear("enc" + std::to_string(i), l * in, ch[i]);
      in = ch[i];
    }
    const std::size_t coarse = static_cast<std::size_t>(ops.vertices(config_.levels)) * ch.back();
    add_linear("mu", coarse, k);
    add_linear("logvar", coarse, k);
    add_linear("dec_fc", k, coarse);
    // Generator block i works on level (levels - 1 - i).
    for (int i = 0; i < config_.levels; ++i) {
      const int out = i == 0 ? ch.back() : ch[config_.levels - 1 - i];
      const int prev = i == 0 ? ch.back() : ch[config_.levels - i];
      add_linear("dec" + std::to_string(i), l * prev, out);
    }
    add_linear("out", l * ch.front(), 3);
  }

  const ModelConfig& config() const { return config_; }
  const MeshOperators& operators() const { return *ops_; }
  const LatentPartition& partition() const { return partition_; }
  Index num_vertices() const { return ops_->vertices(0); }
  int latent_size() const { return config_.latent_size; }

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  std::vector<Parameter<T>*> parameter_ptrs() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }
  Parameter<T>& parameter(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return p;
    }
    throw DataError("no parameter named '" + name + "'");
  }
  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // Glorot-uniform weights, zero biases.
  void initialize(Rng& rng) {
    for (auto& p : params_) {
      if (p.value.shape.size() == 2) {
        const double bound = std::sqrt(6.0 / static_cast<double>(p.value.shape[0] + p.value.shape[1]));
        for (auto& v : p.value.data) v = static_cast<T>(uniform(rng, -bound, bound));
      } else {
        std::fill(p.value.data.begin(), p.value.data.end(), T(0));
      }
      p.zero_grad();
    }
  }

  // x: [batch * N, 3] normalized vertices -> mu, logvar: [batch, k].
  VariationalVars<T> encode(Graph<T>& g, Var<T> x, std::size_t batch) {
    require(x.rows() == batch * static_cast<std::size_t>(num_vertices()) && x.cols() == 3,
            "encoder input shape " + shape_string(x.shape()) + " does not match template");
    Var<T> h = x;
    for (int i = 0; i < config_.levels; ++i) {
      h = ops::elu(conv(g, h, i, "enc" + std::to_string(i), batch));
      h = ops::sparse_matmul(ops_->transforms[i].pool, h, batch);
    }
    const std::size_t flat = h.value().size() / batch;
    h = ops::reshape(h, {batch, flat});
    Var<T> mu = linear(g, h, "mu");
    Var<T> logvar = ops::clamp(linear(g, h, "logvar"), kLogvarMin, kLogvarMax);
    return {mu, logvar};
  }

  // z: [batch, k] -> [batch * N, 3] normalized vertices.
  Var<T> decode(Graph<T>& g, Var<T> z, std::size_t batch) {
    require(z.rows() == batch && z.cols() == static_cast<std::size_t>(config_.latent_size),
            "latent shape " + shape_string(z.shape()) + " does not match model");
    const int levels = config_.levels;
    Var<T> h = linear(g, z, "dec_fc");
    h = ops::reshape(h, {batch * static_cast<std::size_t>(ops_->vertices(levels)),
                         static_cast<std::size_t>(config_.channels.back())});
    for (int i = 0; i < levels; ++i) {
      const int level = levels - 1 - i;
      h = ops::sparse_matmul(ops_->transforms[level].unpool, h, batch);
      h = ops::elu(conv(g, h, level, "dec" + std::to_string(i), batch));
    }
    return conv(g, h, 0, "out", batch);
  }

  // z = mu + exp(logvar / 2) * eps with eps drawn from `rng`.
  Var<T> reparameterize(Graph<T>& g, const VariationalVars<T>& vo, Rng& rng) {
    Tensor<T> eps(vo.mu.shape());
    for (auto& e : eps.data) e = static_cast<T>(standard_normal(rng));
    Var<T> sigma = ops::exp(ops::scale(vo.logvar, T(0.5)));
    return ops::add(vo.mu, ops::mul(sigma, g.constant(std::move(eps))));
  }

  // Value-level helpers for inference.
  Tensor<T> decode_values(const Tensor<T>& z) {
    Graph<T> g(false);
    const std::size_t batch = z.shape.size() == 1 ? 1 : z.rows();
    Tensor<T> zz({batch, static_cast<std::size_t>(config_.latent_size)}, z.data);
    return decode(g, g.constant(std::move(zz)), batch).value();
  }
  std::pair<Tensor<T>, Tensor<T>> encode_values(const Tensor<T>& x, std::size_t batch = 1) {
    Graph<T> g(false);
    Tensor<T> xx({batch * static_cast<std::size_t>(num_vertices()), 3}, x.data);
    auto vo = encode(g, g.constant(std::move(xx)), batch);
    return {vo.mu.value(), vo.logvar.value()};
  }

 private:
  void add_linear(const std::string& name, std::size_t in, std::size_t out) {
    params_.emplace_back(name + ".weight", Tensor<T>({in, out}));
    params_.emplace_back(name + ".bias", Tensor<T>({out}));
  }

  Var<T> linear(Graph<T>& g, Var<T> x, const std::string& name) {
    return ops::add_bias(ops::matmul(x, g.param(parameter(name + ".weight"))), g.param(parameter(name + ".bias")));
  }

  Var<T> conv(Graph<T>& g, Var<T> x, int level, const std::string& name, std::size_t batch) {
    Var<T> gathered = ops::gather_rows(x, ops_->spiral_tables[level], static_cast<std::size_t>(config_.spiral_length), batch);
    return linear(g, gathered, name);
  }

  ModelConfig config_;
  const MeshOperators* ops_;
  LatentPartition partition_;
  std::vector<Parameter<T>> params_;
};

}  // namespace swapvae
