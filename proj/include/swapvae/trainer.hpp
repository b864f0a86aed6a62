#pragma once

#include <nlohmann/json.hpp>

#include <cstdio>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "adam.hpp"
#include "checkpoint.hpp"
#include "dataset.hpp"
#include "evaluation.hpp"
#include "model.hpp"
#include "objectives.hpp"

namespace swapvae {

struct TrainConfig {
  int epochs = 40;
  int batch_size = 16;
  double lr = 1e-4;
  LossWeights weights;
  std::uint64_t seed = 0;
  std::string precision = "float32";  // or "float64"
  bool no_consistency = false;
  bool no_laplacian = false;
  bool no_normalization = false;
  bool consistency_on_mean = false;  // L_c on mu instead of sampled z
  int checkpoint_every = 1;          // epochs between checkpoints, 0 = final only

  void validate() const {
    if (epochs < 0) throw ConfigError("trainer.epochs must be >= 0");
    if (!(lr > 0)) throw ConfigError("trainer.lr must be > 0");
    if (precision != "float32" && precision != "float64") throw ConfigError("trainer.precision must be float32 or float64");
    if (checkpoint_every < 0) throw ConfigError("trainer.checkpoint_every must be >= 0");
    try {
      perfect_square_root(batch_size);
      weights.validate();
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
  }

  LossWeights effective_weights() const {
    LossWeights w = weights;
    if (no_consistency) w.kappa = 0;
    if (no_laplacian) w.alpha = 0;
    return w;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"weights", c.weights},
       {"seed", c.seed},
       {"precision", c.precision},
       {"no_consistency", c.no_consistency},
       {"no_laplacian", c.no_laplacian},
       {"no_normalization", c.no_normalization},
       {"consistency_on_mean", c.consistency_on_mean},
       {"checkpoint_every", c.checkpoint_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr").get_to(c.lr);
  j.at("weights").get_to(c.weights);
  j.at("seed").get_to(c.seed);
  j.at("precision").get_to(c.precision);
  j.at("no_consistency").get_to(c.no_consistency);
  j.at("no_laplacian").get_to(c.no_laplacian);
  j.at("no_normalization").get_to(c.no_normalization);
  j.at("consistency_on_mean").get_to(c.consistency_on_mean);
  j.at("checkpoint_every").get_to(c.checkpoint_every);
}

struct StepRecord {
  long long step = 0;
  LossBreakdown loss;
};

struct EpochRecord {
  int epoch = 0;
  double validation_error = 0;  // mean per-vertex error, data units
};

inline void write_loss_header(std::ostream& out) { out << "step,L_R,L_L,L_KL,L_c,total\n"; }

inline void write_loss_row(std::ostream& out, const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.loss.recon, r.loss.laplacian,
                r.loss.kl, r.loss.consistency, r.loss.total);
  out << buf;
}

// Owns one training run: model, optimizer, RNG streams and loss history.
template <typename T>
class Trainer {
 public:
  Trainer(const SyntheticDataset& data, ModelConfig model_config, TrainConfig config)
      : data_(&data), config_(std::move(config)) {
    config_.validate();
    model_config.validate();
    if (model_config.features != data.segmentation.num_features()) {
      throw ConfigError("model.features (" + std::to_string(model_config.features) + ") does not match the dataset's " +
                        std::to_string(data.segmentation.num_features()) + " features");
    }
    if (config_.precision != dtype_name<T>()) throw ConfigError("trainer precision does not match instantiation");
    side_ = perfect_square_root(config_.batch_size);
    if (data.splits.train.size() < static_cast<std::size_t>(side_)) throw DataError("training split smaller than sqrt(B)");

    assets_.config = model_config;
    assets_.precision = config_.precision;
    assets_.topology = data.topology;
    assets_.template_positions = data.template_positions;
    assets_.segmentation = data.segmentation;
    assets_.landmarks = data.landmarks;
    assets_.normalized = !config_.no_normalization;
    const auto train = data.split_meshes(data.splits.train);
    assets_.stats = assets_.normalized ? fit_normalization(std::span<const VertexEmbedding>(train))
                                       : identity_stats(data.topology.num_vertices());
    assets_.operators = std::make_shared<MeshOperators>(build_operators(data.topology, data.template_positions, model_config));

    model_space_.reserve(data.meshes.size());
    for (const auto& m : data.meshes) model_space_.push_back(assets_.to_model_space(m));
    validation_ = data.split_meshes(data.splits.val);

    vae_ = std::make_unique<SpiralVae<T>>(model_config, *assets_.operators);
    Rng init = make_stream(config_.seed, Stream::kInit);
    vae_->initialize(init);
    params_ = vae_->parameter_ptrs();
    adam_.lr = static_cast<T>(config_.lr);
    batch_rng_ = make_stream(config_.seed, Stream::kBatches);
    reparam_rng_ = make_stream(config_.seed, Stream::kReparam);
  }

  // Continues a run from a checkpoint written by checkpoint().
  Trainer(const SyntheticDataset& data, const Checkpoint& ckpt)
      : Trainer(data, ckpt.manifest.at("model").get<ModelConfig>(), ckpt.manifest.at("trainer").get<TrainConfig>()) {
    verify_operators(ckpt, *assets_.operators);
    get_parameters(ckpt, vae_->parameters());
    const auto& st = ckpt.manifest.at("state");
    step_ = st.at("step").get<long long>();
    adam_.step = st.at("adam_step").get<long long>();
    set_rng_state(batch_rng_, st.at("batch_rng").get<std::string>());
    set_rng_state(reparam_rng_, st.at("reparam_rng").get<std::string>());
    digest_ = Fnv1a(std::stoull(st.at("loss_digest").get<std::string>(), nullptr, 16));
    for (const auto& e : st.at("validation")) epochs_.push_back({e.at(0).get<int>(), e.at(1).get<double>()});
    if (adam_.step > 0) {
      for (const auto& p : vae_->parameters()) {
        adam_.m.push_back(ckpt.get<T>("adam.m." + p.name));
        adam_.v.push_back(ckpt.get<T>("adam.v." + p.name));
      }
    }
  }

  const TrainConfig& config() const { return config_; }
  const ModelAssets& assets() const { return assets_; }
  SpiralVae<T>& model() { return *vae_; }
  int side() const { return side_; }
  long long step() const { return step_; }
  long long batches_per_epoch() const { return static_cast<long long>(data_->splits.train.size()) / side_; }
  long long total_steps() const { return batches_per_epoch() * config_.epochs; }
  const std::vector<EpochRecord>& validation_history() const { return epochs_; }
  std::string loss_digest() const { return digest_.hex(); }

  // Model input for one swap batch, [B * N, 3] in model space.
  Tensor<T> batch_input(const SwapBatch& b) const {
    const auto n = static_cast<std::size_t>(assets_.topology.num_vertices());
    Tensor<T> x({b.grid.size() * n, 3});
    for (std::size_t k = 0; k < b.grid.size(); ++k) {
      const auto v = b.grid[k].values();
      for (std::size_t i = 0; i < n * 3; ++i) x.data[k * n * 3 + i] = static_cast<T>(v[i]);
    }
    return x;
  }

  SwapBatch next_batch() {
    return build_swap_batch(model_space_, data_->splits.train, assets_.segmentation, config_.batch_size, batch_rng_);
  }

  // One optimization step. Throws NumericalError on a non-finite loss
  // before any parameter is touched.
  StepRecord train_step() {
    const SwapBatch b = next_batch();
    const auto batch = static_cast<std::size_t>(config_.batch_size);
    const LossWeights w = config_.effective_weights();
    vae_->zero_grad();
    Graph<T> g;
    Var<T> x = g.constant(batch_input(b));
    auto vo = vae_->encode(g, x, batch);
    Var<T> z = vae_->reparameterize(g, vo, reparam_rng_);
    Var<T> xp = vae_->decode(g, z, batch);
    Var<T> zc = config_.consistency_on_mean ? vo.mu : z;
    auto terms = total_loss(xp, x, vo, zc, assets_.operators->laplacian, vae_->partition(), side_, b.feature, w, batch);
    if (!std::isfinite(terms.breakdown.total)) {
      throw NumericalError("non-finite loss at step " + std::to_string(step_ + 1));
    }
    g.backward(terms.total);
    for (const auto* p : params_) {
      if (!p->grad.all_finite()) throw NumericalError("non-finite gradient for '" + p->name + "' at step " + std::to_string(step_ + 1));
    }
    adam_step(params_, adam_);
    ++step_;
    StepRecord r{step_, terms.breakdown};
    const double row[6] = {static_cast<double>(r.step), r.loss.recon, r.loss.laplacian, r.loss.kl, r.loss.consistency,
                           r.loss.total};
    digest_.update(row, sizeof(row));
    return r;
  }

  double validate() {
    if (validation_.empty()) return 0.0;
    const auto errs = reconstruction_errors(*vae_, assets_, validation_);
    double s = 0;
    for (double e : errs) s += e;
    return s / static_cast<double>(errs.size());
  }

  struct Hooks {
    std::function<void(const StepRecord&)> on_step;
    std::function<void(const EpochRecord&)> on_epoch;  // after validation, model state is the epoch's end
  };

  // Runs until total_steps() or `stop_at` steps, whichever is first. The last
  // state that completed without a numerical failure stays in last_good().
  void run(const Hooks& hooks = {}, std::optional<long long> stop_at = std::nullopt) {
    const long long end = std::min(total_steps(), stop_at.value_or(total_steps()));
    if (!last_good_) last_good_ = checkpoint();
    while (step_ < end) {
      StepRecord r = train_step();
      if (hooks.on_step) hooks.on_step(r);
      if (step_ % batches_per_epoch() == 0) {
        EpochRecord e{static_cast<int>(step_ / batches_per_epoch()), validate()};
        if (!std::isfinite(e.validation_error)) throw NumericalError("non-finite validation error at epoch " + std::to_string(e.epoch));
        epochs_.push_back(e);
        last_good_ = checkpoint();
        if (hooks.on_epoch) hooks.on_epoch(e);
      }
    }
  }

  const std::optional<Checkpoint>& last_good() const { return last_good_; }

  Checkpoint checkpoint() const {
    Checkpoint c;
    put_assets(c, assets_);
    c.manifest["trainer"] = config_;
    c.manifest["dataset"] = data_->config;
    nlohmann::json val = nlohmann::json::array();
    for (const auto& e : epochs_) val.push_back({e.epoch, e.validation_error});
    c.manifest["state"] = {{"step", step_},
                           {"epoch", static_cast<double>(step_) / static_cast<double>(batches_per_epoch())},
                           {"adam_step", adam_.step},
                           {"batch_rng", rng_state(batch_rng_)},
                           {"reparam_rng", rng_state(reparam_rng_)},
                           {"loss_digest", digest_.hex()},
                           {"validation", val}};
    put_parameters(c, vae_->parameters());
    if (adam_.step > 0) {
      const auto& ps = vae_->parameters();
      for (std::size_t k = 0; k < ps.size(); ++k) {
        c.put<T>("adam.m." + ps[k].name, adam_.m[k]);
        c.put<T>("adam.v." + ps[k].name, adam_.v[k]);
      }
    }
    return c;
  }

 private:
  const SyntheticDataset* data_;
  TrainConfig config_;
  ModelAssets assets_;
  std::vector<VertexEmbedding> model_space_;
  std::vector<VertexEmbedding> validation_;
  std::unique_ptr<SpiralVae<T>> vae_;
  std::vector<Parameter<T>*> params_;
  AdamState<T> adam_;
  Rng batch_rng_;
  Rng reparam_rng_;
  int side_ = 0;
  long long step_ = 0;
  Fnv1a digest_;
  std::vector<EpochRecord> epochs_;
  std::optional<Checkpoint> last_good_;
};

}  // namespace swapvae
