#include <CLI11.hpp>
#include <malloc.h>
#include <nlohmann/json.hpp>

#include <Eigen/Core>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "swapvae/checkpoint.hpp"
#include "swapvae/config.hpp"
#include "swapvae/dataset.hpp"
#include "swapvae/evaluation.hpp"
#include "swapvae/mesh_io.hpp"
#include "swapvae/png.hpp"
#include "swapvae/service.hpp"
#include "swapvae/trainer.hpp"

namespace fs = std::filesystem;
using namespace swapvae;

namespace {

constexpr const char* kVersion = "0.3.0";

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

// Reproducibility record for one command; deliberately free of timestamps.
void write_manifest(const fs::path& dir, const std::string& command, const Config& cfg, const nlohmann::json& extra = {}) {
  nlohmann::json j = {{"command", command},
                      {"config", config_json(cfg)},
                      {"versions",
                       {{"swapvae", kVersion},
                        {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                      std::to_string(EIGEN_MINOR_VERSION)},
                        {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                              std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                              std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                        {"compiler", __VERSION__}}}};
  if (!extra.is_null()) j["inputs"] = extra;
  write_json(dir / "manifest.json", j);
}

Config resolve(const Common& c) { return load_config(c.config, c.overrides); }

void add_common(CLI::App* app, Common& c, bool needs_out = true) {
  app->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  app->add_option("--override", c.overrides, "Dotted key=value config override (repeatable)");
  auto* out = app->add_option("--out", c.out, "Output directory");
  if (needs_out) out->required();
}

// ---- dataset ------------------------------------------------------------

int cmd_dataset_generate(const Common& c, std::optional<std::uint64_t> seed) {
  Config cfg = resolve(c);
  if (seed) cfg.dataset.seed = *seed;
  const auto ds = generate_dataset(cfg.dataset);
  save_dataset(c.out, ds);
  write_manifest(c.out, "dataset generate", cfg);
  std::cout << "wrote " << ds.meshes.size() << " identities (" << ds.splits.train.size() << "/" << ds.splits.val.size()
            << "/" << ds.splits.test.size() << ") to " << c.out << "\n";
  return 0;
}

// ---- train --------------------------------------------------------------

template <typename T>
int run_training(const SyntheticDataset& ds, const Config& cfg, const fs::path& out, const std::string& resume,
                 const std::string& label) {
  std::unique_ptr<Trainer<T>> tr;
  if (resume.empty()) {
    tr = std::make_unique<Trainer<T>>(ds, cfg.model, cfg.trainer);
  } else {
    tr = std::make_unique<Trainer<T>>(ds, load_checkpoint(resume));
  }
  fs::create_directories(out);
  std::ofstream log(out / "loss.csv", resume.empty() ? std::ios::trunc : std::ios::app);
  if (resume.empty()) write_loss_header(log);
  std::ofstream val(out / "validation.csv", resume.empty() ? std::ios::trunc : std::ios::app);
  if (resume.empty()) val << "epoch,mean_vertex_error\n";

  typename Trainer<T>::Hooks hooks;
  hooks.on_step = [&](const StepRecord& r) { write_loss_row(log, r); };
  hooks.on_epoch = [&](const EpochRecord& e) {
    val << e.epoch << "," << fmt(e.validation_error) << "\n";
    log.flush();
    val.flush();
    std::cerr << label << "epoch " << e.epoch << " validation error " << e.validation_error << "\n";
    const int every = tr->config().checkpoint_every;
    if (every > 0 && e.epoch % every == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoints/epoch_%03d.ckpt", e.epoch);
      save_checkpoint(out / name, tr->checkpoint());
    }
  };
  try {
    tr->run(hooks);
  } catch (const NumericalError&) {
    log.flush();
    if (tr->last_good()) save_checkpoint(out / "last_good.ckpt", *tr->last_good());
    throw;
  }
  save_checkpoint(out / "model.ckpt", tr->checkpoint());
  return 0;
}

int train_into(const SyntheticDataset& ds, const Config& cfg, const fs::path& out, const std::string& resume,
               const std::string& label = "") {
  if (cfg.trainer.precision == "float64") return run_training<double>(ds, cfg, out, resume, label);
  return run_training<float>(ds, cfg, out, resume, label);
}

int cmd_train(const Common& c, const std::string& dataset_dir, const std::string& resume) {
  Config cfg = resolve(c);
  const auto ds = load_dataset(dataset_dir);
  cfg.dataset = ds.config;
  if (!resume.empty()) {
    const auto ck = load_checkpoint(resume);
    cfg.model = ck.manifest.at("model").get<ModelConfig>();
    cfg.trainer = ck.manifest.at("trainer").get<TrainConfig>();
  }
  train_into(ds, cfg, c.out, resume);
  write_manifest(c.out, "train", cfg, {{"dataset", dataset_dir}, {"resume", resume}});
  return 0;
}

// ---- eval ---------------------------------------------------------------

void write_traversal(const fs::path& out, const TraversalMatrix& tm, const DisentanglementScore& score,
                     const ModelAssets& assets, bool fields) {
  std::string csv = "latent";
  for (const auto& name : assets.segmentation.names()) csv += "," + name;
  csv += "\n";
  for (int i = 0; i < tm.latents; ++i) {
    csv += std::to_string(i);
    for (int f = 0; f < tm.features; ++f) csv += "," + fmt(tm.at(i, f));
    csv += "\n";
  }
  write_text(out / "traversal.csv", csv);
  write_png(out / "traversal.png", heatmap(tm.values, tm.latents, tm.features));
  nlohmann::json ratios = nlohmann::json::array();
  for (double r : score.ratios) ratios.push_back(std::isinf(r) ? nlohmann::json("inf") : nlohmann::json(r));
  write_json(out / "disentanglement.json",
             {{"bound", tm.bound}, {"threshold", score.threshold}, {"pass_fraction", score.pass_fraction}, {"ratios", ratios}});
  if (fields) {
    fs::create_directories(out / "fields");
    for (int i = 0; i < tm.latents; ++i) {
      char name[64];
      std::snprintf(name, sizeof(name), "fields/latent_%03d.ply", i);
      std::ofstream ply(out / name, std::ios::binary);
      write_ply(ply, assets.topology, assets.template_positions, true, PlyScalar{"distance", tm.fields[i]});
    }
  }
}

int cmd_eval_traversal(const Common& c, const std::string& ckpt_path, bool fields) {
  const Config cfg = resolve(c);
  const auto ckpt = load_checkpoint(ckpt_path);
  with_model(ckpt, [&](auto& m) {
    const auto tm = traversal_matrix(m.model(), m.assets, cfg.eval.traversal_bound);
    const auto score = disentanglement_score(tm, m.model().partition(), cfg.eval.threshold);
    write_traversal(c.out, tm, score, m.assets, fields);
    std::cout << "pass fraction " << score.pass_fraction << "\n";
    return 0;
  });
  write_manifest(c.out, "eval traversal", cfg, {{"checkpoint", ckpt_path}});
  return 0;
}

int cmd_eval_generation(const Common& c, const std::string& ckpt_path, const std::string& dataset_dir) {
  const Config cfg = resolve(c);
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto ds = load_dataset(dataset_dir);
  const Mesh reference{ds.topology, ds.template_positions};
  with_model(
      ckpt,
      [&](auto& m) {
        Rng rng = make_stream(cfg.eval.seed, Stream::kEval);
        const auto test = ds.split_meshes(ds.splits.test);
        const auto report = generation_report(m.model(), m.assets, test, rng, cfg.eval.generation);
        write_json(fs::path(c.out) / "generation.json", to_json_report(report));
        std::string csv = "mesh,mean_vertex_error\n";
        for (std::size_t i = 0; i < test.size(); ++i) {
          csv += std::to_string(ds.splits.test[i]) + "," + fmt(report.reconstruction.per_mesh[i]) + "\n";
        }
        write_text(fs::path(c.out) / "reconstruction.csv", csv);
        std::cout << to_json_report(report).dump(2) << "\n";
        return 0;
      },
      &reference);
  write_manifest(c.out, "eval generation", cfg, {{"checkpoint", ckpt_path}, {"dataset", dataset_dir}});
  return 0;
}

int cmd_eval_fit(const Common& c, const std::string& ckpt_path, const std::string& target_path,
                 const std::string& landmark_path) {
  const Config cfg = resolve(c);
  const auto ckpt = load_checkpoint(ckpt_path);
  const Mesh target = load_mesh(target_path);
  with_model(ckpt, [&](auto& m) {
    const auto& lms = m.assets.landmarks;
    std::vector<double> target_lms;
    if (!landmark_path.empty()) {
      std::ifstream in(landmark_path);
      const auto j = nlohmann::json::parse(in, nullptr, false);
      if (j.is_discarded()) throw DataError("landmark file is not valid JSON");
      target_lms = j.get<std::vector<double>>();
    } else {
      if (target.positions.rows() != m.num_vertices()) {
        throw DataError("target is not in template correspondence; pass --target-landmarks");
      }
      for (Index l : lms) {
        for (int k = 0; k < 3; ++k) target_lms.push_back(target.positions(l, k));
      }
    }
    const auto r = fit_target(m.model(), m.assets, lms, target_lms, target.positions.values(), cfg.eval.fit);
    std::string csv = "iteration,phase,loss,mean_closest_error\n";
    for (std::size_t i = 0; i < r.loss_trace.size(); ++i) {
      const bool landmark = static_cast<int>(i) < cfg.eval.fit.landmark_iterations;
      csv += std::to_string(i) + "," + (landmark ? "landmark" : "chamfer") + "," + fmt(r.loss_trace[i]) + "," +
             fmt(r.error_trace[i]) + "\n";
    }
    write_text(fs::path(c.out) / "fit_trace.csv", csv);
    write_json(fs::path(c.out) / "fit.json", {{"z", r.z}, {"final_error", r.final_error}});
    std::ofstream ply(fs::path(c.out) / "fitted.ply", std::ios::binary);
    write_ply(ply, m.assets.topology, r.mesh, true, PlyScalar{"error", r.final_errors});
    std::cout << "final mean error " << r.final_error << "\n";
    return 0;
  });
  write_manifest(c.out, "eval fit", cfg, {{"checkpoint", ckpt_path}, {"target", target_path}});
  return 0;
}

// ---- sample -------------------------------------------------------------

int cmd_sample(const Common& c, const std::string& ckpt_path, int count, std::uint64_t seed) {
  const Config cfg = resolve(c);
  if (count < 1) throw ConfigError("--count must be >= 1");
  const auto ckpt = load_checkpoint(ckpt_path);
  fs::create_directories(c.out);
  with_model(ckpt, [&](auto& m) {
    Rng rng = make_stream(seed, Stream::kEval);
    std::vector<double> z(static_cast<std::size_t>(count * m.latent_size()));
    for (auto& v : z) v = standard_normal(rng);
    const auto meshes = decode_batch(m.model(), m.assets, z, static_cast<std::size_t>(count));
    nlohmann::json latents = nlohmann::json::array();
    for (int i = 0; i < count; ++i) {
      char name[64];
      std::snprintf(name, sizeof(name), "sample_%03d.ply", i);
      save_mesh(fs::path(c.out) / name, m.assets.topology, meshes[static_cast<std::size_t>(i)]);
      latents.push_back(std::vector<double>(z.begin() + i * m.latent_size(), z.begin() + (i + 1) * m.latent_size()));
    }
    write_json(fs::path(c.out) / "latents.json", latents);
    return 0;
  });
  write_manifest(c.out, "sample", cfg, {{"checkpoint", ckpt_path}, {"count", count}, {"seed", seed}});
  return 0;
}

// ---- ops ----------------------------------------------------------------

int cmd_ops_precompute(const Common& c, const std::string& dataset_dir, const std::string& mesh_path) {
  const Config cfg = resolve(c);
  Mesh mesh;
  if (!mesh_path.empty()) {
    mesh = load_mesh(mesh_path);
  } else if (!dataset_dir.empty()) {
    const auto ds = load_dataset(dataset_dir);
    mesh = {ds.topology, ds.template_positions};
  } else {
    throw ConfigError("ops precompute needs --dataset or --mesh");
  }
  const auto ops = build_operators(mesh.topology, mesh.positions, cfg.model);
  Checkpoint blob;
  blob.manifest["operator_hash"] = ops.hash();
  blob.manifest["model"] = cfg.model;
  std::vector<Index> sizes;
  auto put_csr = [&](const std::string& name, const CsrMatrix& m) {
    blob.put<std::int32_t>(name + ".row_offsets", {m.row_offsets.size()}, m.row_offsets);
    blob.put<std::int32_t>(name + ".col_indices", {m.col_indices.size()}, m.col_indices);
    blob.put<double>(name + ".values", {m.values.size()}, m.values);
  };
  for (std::size_t l = 0; l < ops.topologies.size(); ++l) sizes.push_back(ops.topologies[l].num_vertices());
  for (std::size_t l = 0; l < ops.spirals.size(); ++l) {
    const auto& s = ops.spirals[l];
    blob.put<std::int32_t>("spiral." + std::to_string(l), {static_cast<std::size_t>(s.rows), static_cast<std::size_t>(s.length)},
                           s.table);
    put_csr("pool." + std::to_string(l), ops.transforms[l].pool);
    put_csr("unpool." + std::to_string(l), ops.transforms[l].unpool);
  }
  put_csr("laplacian", ops.laplacian.matrix);
  blob.manifest["level_vertices"] = sizes;
  save_checkpoint(fs::path(c.out) / "operators.bin", blob);
  write_json(fs::path(c.out) / "operators.json", {{"operator_hash", ops.hash()}, {"level_vertices", sizes}});
  write_manifest(c.out, "ops precompute", cfg, {{"dataset", dataset_dir}, {"mesh", mesh_path}});
  std::cout << "operator hash " << ops.hash() << "\n";
  return 0;
}

// ---- serve --------------------------------------------------------------

int cmd_serve(const Common& c, const std::string& ckpt_path, const std::string& dataset_dir, int port) {
  Config cfg = resolve(c);
  if (port >= 0) cfg.serve.port = port;
  const auto ckpt = load_checkpoint(ckpt_path);
  std::optional<Mesh> reference;
  if (!dataset_dir.empty()) {
    const auto ds = load_dataset(dataset_dir);
    reference = Mesh{ds.topology, ds.template_positions};
  }
  return with_model(
      ckpt,
      [&](auto& m) {
        StudioApi<typename std::decay_t<decltype(m)>::value_type> api(std::move(m));
        httplib::Server server;
        ServeOptions opt{cfg.serve.host, cfg.serve.port, cfg.serve.cors_origin};
        const int bound = bind_studio(server, api, opt);
        std::cerr << "serving on http://" << opt.host << ":" << bound << "\n";
        server.listen_after_bind();
        return 0;
      },
      reference ? &*reference : nullptr);
}

// ---- ablation -----------------------------------------------------------

int cmd_ablation(const Common& c, const std::string& dataset_dir) {
  const Config base = resolve(c);
  const auto ds = load_dataset(dataset_dir);
  const auto test = ds.split_meshes(ds.splits.test);
  struct Variant {
    const char* name;
    void (*apply)(TrainConfig&);
  };
  const Variant variants[] = {{"proposed", [](TrainConfig&) {}},
                              {"no_consistency", [](TrainConfig& t) { t.no_consistency = true; }},
                              {"no_laplacian", [](TrainConfig& t) { t.no_laplacian = true; }},
                              {"no_normalization", [](TrainConfig& t) { t.no_normalization = true; }}};
  nlohmann::json summary = nlohmann::json::object();
  std::string csv = "variant,pass_fraction,test_mean_error,test_max_error\n";
  for (const auto& v : variants) {
    Config cfg = base;
    cfg.dataset = ds.config;
    v.apply(cfg.trainer);
    const fs::path out = fs::path(c.out) / v.name;
    train_into(ds, cfg, out, "", std::string(v.name) + ": ");
    write_manifest(out, std::string("ablation run ") + v.name, cfg, {{"dataset", dataset_dir}});
    const auto ckpt = load_checkpoint(out / "model.ckpt");
    with_model(ckpt, [&](auto& m) {
      const auto tm = traversal_matrix(m.model(), m.assets, cfg.eval.traversal_bound);
      const auto score = disentanglement_score(tm, m.model().partition(), cfg.eval.threshold);
      write_traversal(out, tm, score, m.assets, false);
      const auto rec = reconstruction_report(m.model(), m.assets, test);
      summary[v.name] = {{"pass_fraction", score.pass_fraction}, {"test_mean_error", rec.mean}, {"test_max_error", rec.max}};
      csv += std::string(v.name) + "," + fmt(score.pass_fraction) + "," + fmt(rec.mean) + "," + fmt(rec.max) + "\n";
      return 0;
    });
  }
  write_json(fs::path(c.out) / "ablation.json", summary);
  write_text(fs::path(c.out) / "ablation.csv", csv);
  write_manifest(c.out, "ablation run", base, {{"dataset", dataset_dir}});
  std::cout << summary.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Keep freed tensor memory in the heap; per-step allocations otherwise
  // round-trip through mmap and page faults dominate training time.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Feature-swapping mesh VAE: data, training, evaluation and latent studio"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Common common;
  std::optional<std::uint64_t> seed;
  std::string dataset_dir, checkpoint, resume, target, target_landmarks, mesh;
  int count = 8, port = -1;
  std::uint64_t sample_seed = 0;
  bool fields = false;

  auto* dataset = app.add_subcommand("dataset", "Synthetic dataset tools");
  dataset->require_subcommand(1);
  auto* generate = dataset->add_subcommand("generate", "Generate the synthetic dataset");
  add_common(generate, common);
  generate->add_option("--seed", seed, "Dataset seed (overrides dataset.seed)");

  auto* train = app.add_subcommand("train", "Train a model on a dataset directory");
  add_common(train, common);
  train->add_option("--dataset", dataset_dir, "Dataset directory")->required();
  train->add_option("--resume", resume, "Continue from a checkpoint");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->require_subcommand(1);
  auto* traversal = eval->add_subcommand("traversal", "Latent traversal matrix and disentanglement score");
  add_common(traversal, common);
  traversal->add_option("--checkpoint", checkpoint)->required();
  traversal->add_flag("--fields", fields, "Also write per-vertex distance fields as PLY");
  auto* generation = eval->add_subcommand("generation", "Generation metrics and reconstruction errors");
  add_common(generation, common);
  generation->add_option("--checkpoint", checkpoint)->required();
  generation->add_option("--dataset", dataset_dir, "Dataset directory (test split is the reference)")->required();
  auto* fit = eval->add_subcommand("fit", "Fit a latent code to a target mesh");
  add_common(fit, common);
  fit->add_option("--checkpoint", checkpoint)->required();
  fit->add_option("--target", target, "Target mesh (OBJ or PLY)")->required();
  fit->add_option("--target-landmarks", target_landmarks, "JSON array of landmark positions, flat xyz");

  auto* sample = app.add_subcommand("sample", "Decode random latents");
  add_common(sample, common);
  sample->add_option("--checkpoint", checkpoint)->required();
  sample->add_option("--count", count, "Number of samples");
  sample->add_option("--seed", sample_seed, "Sampling seed");

  auto* ops_cmd = app.add_subcommand("ops", "Mesh operator tools");
  ops_cmd->require_subcommand(1);
  auto* precompute = ops_cmd->add_subcommand("precompute", "Build spirals, sampling and Laplacian operators");
  add_common(precompute, common);
  precompute->add_option("--dataset", dataset_dir, "Dataset directory providing the template");
  precompute->add_option("--mesh", mesh, "Template mesh file");

  auto* serve = app.add_subcommand("serve", "Run the latent studio HTTP service");
  add_common(serve, common, false);
  serve->add_option("--checkpoint", checkpoint)->required();
  serve->add_option("--dataset-dir", dataset_dir, "Dataset whose template the checkpoint must match");
  serve->add_option("--port", port, "Port (overrides serve.port)");

  auto* ablation = app.add_subcommand("ablation", "Ablation studies");
  ablation->require_subcommand(1);
  auto* ablation_run = ablation->add_subcommand("run", "Train and evaluate the proposed model and its ablations");
  add_common(ablation_run, common);
  ablation_run->add_option("--dataset", dataset_dir, "Dataset directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (generate->parsed()) return cmd_dataset_generate(common, seed);
    if (train->parsed()) return cmd_train(common, dataset_dir, resume);
    if (traversal->parsed()) return cmd_eval_traversal(common, checkpoint, fields);
    if (generation->parsed()) return cmd_eval_generation(common, checkpoint, dataset_dir);
    if (fit->parsed()) return cmd_eval_fit(common, checkpoint, target, target_landmarks);
    if (sample->parsed()) return cmd_sample(common, checkpoint, count, sample_seed);
    if (precompute->parsed()) return cmd_ops_precompute(common, dataset_dir, mesh);
    if (serve->parsed()) return cmd_serve(common, checkpoint, dataset_dir, port);
    if (ablation_run->parsed()) return cmd_ablation(common, dataset_dir);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
