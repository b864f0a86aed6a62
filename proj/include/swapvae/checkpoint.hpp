#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "hash.hpp"
#include "mesh.hpp"
#include "mesh_io.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace swapvae {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host order");

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "float32";
  else if constexpr (std::is_same_v<T, double>) return "float64";
  else if constexpr (std::is_same_v<T, std::int32_t>) return "int32";
  else static_assert(sizeof(T) == 0, "unsupported tensor dtype");
}

struct TensorRecord {
  std::string name;
  std::string dtype;
  Shape shape;
  std::vector<std::uint8_t> bytes;
};

// Manifest plus named raw tensors. The container layout is
//   "SWCKPT01" | u64 manifest size | manifest JSON | tensor blobs
// with each blob's offset, size and FNV-1a checksum listed in the manifest.
struct Checkpoint {
  static constexpr char kMagic[9] = "SWCKPT01";

  nlohmann::json manifest = nlohmann::json::object();
  std::vector<TensorRecord> tensors;

  bool has(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return true;
    }
    return false;
  }

  const TensorRecord& record(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t;
    }
    throw DataError("checkpoint has no tensor '" + name + "'");
  }

  template <typename T>
  void put(const std::string& name, const Shape& shape, std::span<const T> values) {
    require(shape_size(shape) == values.size(), "tensor '" + name + "' size does not match shape");
    TensorRecord r{name, dtype_name<T>(), shape, {}};
    r.bytes.resize(values.size_bytes());
    if (!values.empty()) std::memcpy(r.bytes.data(), values.data(), values.size_bytes());
    for (auto& t : tensors) {
      if (t.name == name) {
        t = std::move(r);
        return;
      }
    }
    tensors.push_back(std::move(r));
  }

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    put<T>(name, t.shape, t.values());
  }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    const auto& r = record(name);
    if (r.dtype != dtype_name<T>()) {
      throw DataError("tensor '" + name + "' has dtype " + r.dtype + ", expected " + dtype_name<T>());
    }
    Tensor<T> out(r.shape);
    require(out.size() * sizeof(T) == r.bytes.size(), "tensor '" + name + "' byte size does not match shape");
    if (!r.bytes.empty()) std::memcpy(out.data.data(), r.bytes.data(), r.bytes.size());
    return out;
  }
};

inline std::string checkpoint_bytes(const Checkpoint& ckpt) {
  nlohmann::json manifest = ckpt.manifest;
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    Fnv1a h;
    h.update(t.bytes);
    table.push_back({{"name", t.name},
                     {"dtype", t.dtype},
                     {"shape", t.shape},
                     {"offset", offset},
                     {"bytes", t.bytes.size()},
                     {"fnv1a", h.hex()}});
    offset += t.bytes.size();
  }
  manifest["tensors"] = table;
  const std::string text = manifest.dump(1);
  std::string out(Checkpoint::kMagic, 8);
  const std::uint64_t size = text.size();
  out.append(reinterpret_cast<const char*>(&size), sizeof(size));
  out += text;
  for (const auto& t : ckpt.tensors) out.append(reinterpret_cast<const char*>(t.bytes.data()), t.bytes.size());
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 8, Checkpoint::kMagic) != 0) throw DataError("not a checkpoint file");
  std::uint64_t size = 0;
  std::memcpy(&size, bytes.data() + 8, sizeof(size));
  if (size > bytes.size() - 16) throw DataError("truncated checkpoint manifest");
  Checkpoint ckpt;
  try {
    ckpt.manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(size));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  const std::size_t base = 16 + size;
  try {
    for (const auto& entry : ckpt.manifest.at("tensors")) {
      TensorRecord r;
      r.name = entry.at("name").get<std::string>();
      r.dtype = entry.at("dtype").get<std::string>();
      r.shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto count = entry.at("bytes").get<std::uint64_t>();
      if (base + offset + count > bytes.size()) throw DataError("truncated checkpoint tensor '" + r.name + "'");
      r.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(base + offset),
                     bytes.begin() + static_cast<std::ptrdiff_t>(base + offset + count));
      Fnv1a h;
      h.update(r.bytes);
      if (h.hex() != entry.at("fnv1a").get<std::string>()) throw DataError("checksum error in tensor '" + r.name + "'");
      ckpt.tensors.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  ckpt.manifest.erase("tensors");
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    const std::string bytes = checkpoint_bytes(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

// Everything besides the network weights that inference needs: template,
// segmentation, normalization and the rebuilt operator hierarchy.
struct ModelAssets {
  ModelConfig config;
  std::string precision = "float32";
  MeshTopology topology;
  VertexEmbedding template_positions;
  FeatureSegmentation segmentation;
  NormalizationStats stats;
  bool normalized = true;
  std::vector<Index> landmarks;
  std::shared_ptr<const MeshOperators> operators;

  VertexEmbedding to_model_space(const VertexEmbedding& x) const { return normalized ? normalize(x, stats) : x; }
  VertexEmbedding from_model_space(const VertexEmbedding& x) const { return normalized ? denormalize(x, stats) : x; }
  std::string template_hash() const {
    Fnv1a h;
    h.update(topology.faces());
    h.update(template_positions.values());
    return h.hex();
  }
};

inline NormalizationStats identity_stats(Index rows) {
  NormalizationStats s;
  s.mean.assign(static_cast<std::size_t>(rows) * 3, 0.0);
  s.std.assign(static_cast<std::size_t>(rows) * 3, 1.0);
  return s;
}

inline void put_assets(Checkpoint& ckpt, const ModelAssets& a) {
  ckpt.manifest["model"] = a.config;
  ckpt.manifest["precision"] = a.precision;
  ckpt.manifest["normalized"] = a.normalized;
  ckpt.manifest["operator_hash"] = a.operators->hash();
  ckpt.manifest["template_hash"] = a.template_hash();
  ckpt.manifest["feature_names"] = a.segmentation.names();
  ckpt.manifest["landmarks"] = a.landmarks;
  const auto n = static_cast<std::size_t>(a.topology.num_vertices());
  std::vector<std::int32_t> faces;
  for (const auto& f : a.topology.faces()) faces.insert(faces.end(), f.begin(), f.end());
  ckpt.put<std::int32_t>("template.faces", {a.topology.faces().size(), 3}, faces);
  ckpt.put<double>("template.positions", {n, 3}, a.template_positions.values());
  std::vector<std::int32_t> labels(a.segmentation.labels().begin(), a.segmentation.labels().end());
  ckpt.put<std::int32_t>("segmentation.labels", {n}, labels);
  ckpt.put<double>("normalization.mean", {n, 3}, a.stats.mean);
  ckpt.put<double>("normalization.std", {n, 3}, a.stats.std);
}

inline void verify_operators(const Checkpoint& ckpt, const MeshOperators& ops) {
  if (ckpt.manifest.at("operator_hash").get<std::string>() != ops.hash()) throw DataError("operator hash mismatch");
}

// Rebuilds operators from the stored template and checks them against the
// manifest. With `reference` given, that template is used instead, so a
// checkpoint trained on another mesh is rejected.
inline ModelAssets load_assets(const Checkpoint& ckpt, const Mesh* reference = nullptr) {
  ModelAssets a;
  try {
    a.config = ckpt.manifest.at("model").get<ModelConfig>();
    a.precision = ckpt.manifest.at("precision").get<std::string>();
    a.normalized = ckpt.manifest.at("normalized").get<bool>();
    a.landmarks = ckpt.manifest.at("landmarks").get<std::vector<Index>>();
    const auto names = ckpt.manifest.at("feature_names").get<std::vector<std::string>>();
    const auto faces = ckpt.get<std::int32_t>("template.faces");
    std::vector<Face> fs;
    for (std::size_t i = 0; i < faces.rows(); ++i) fs.push_back({faces.at(i, 0), faces.at(i, 1), faces.at(i, 2)});
    const auto pos = ckpt.get<double>("template.positions");
    a.topology = MeshTopology(static_cast<Index>(pos.rows()), fs);
    a.template_positions = VertexEmbedding(pos.data);
    const auto labels = ckpt.get<std::int32_t>("segmentation.labels");
    a.segmentation = FeatureSegmentation(std::vector<Index>(labels.data.begin(), labels.data.end()), names);
    a.stats.mean = ckpt.get<double>("normalization.mean").data;
    a.stats.std = ckpt.get<double>("normalization.std").data;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  if (reference) {
    if (reference->topology.num_vertices() != a.topology.num_vertices()) throw DataError("operator hash mismatch");
    a.topology = reference->topology;
    a.template_positions = reference->positions;
  }
  auto ops = std::make_shared<MeshOperators>(build_operators(a.topology, a.template_positions, a.config));
  verify_operators(ckpt, *ops);
  a.operators = std::move(ops);
  return a;
}

template <typename T>
void put_parameters(Checkpoint& ckpt, const std::vector<Parameter<T>>& params) {
  for (const auto& p : params) ckpt.put<T>("param." + p.name, p.value);
}

template <typename T>
void get_parameters(const Checkpoint& ckpt, std::vector<Parameter<T>>& params) {
  for (auto& p : params) {
    auto t = ckpt.get<T>("param." + p.name);
    require(t.shape == p.value.shape, "parameter '" + p.name + "' shape " + shape_string(t.shape) +
                                          " does not match model " + shape_string(p.value.shape));
    p.value = std::move(t);
    p.zero_grad();
  }
}

// Network plus assets, ready for inference.
template <typename T>
struct LoadedModel {
  using value_type = T;

  ModelAssets assets;
  std::unique_ptr<SpiralVae<T>> vae;

  SpiralVae<T>& model() const { return *vae; }
  Index num_vertices() const { return assets.topology.num_vertices(); }
  int latent_size() const { return assets.config.latent_size; }

  // z (k values) -> mesh in data units.
  VertexEmbedding decode(std::span<const double> z) const {
    require(z.size() == static_cast<std::size_t>(latent_size()),
            "latent has " + std::to_string(z.size()) + " values, model expects " + std::to_string(latent_size()));
    Tensor<T> zt({1, z.size()});
    for (std::size_t i = 0; i < z.size(); ++i) zt.data[i] = static_cast<T>(z[i]);
    const auto out = vae->decode_values(zt);
    VertexEmbedding x(num_vertices());
    for (std::size_t i = 0; i < out.size(); ++i) x.values()[i] = static_cast<double>(out.data[i]);
    return assets.from_model_space(x);
  }

  // Mesh in data units -> (mu, logvar).
  std::pair<std::vector<double>, std::vector<double>> encode(const VertexEmbedding& x) const {
    require(x.rows() == num_vertices(), "mesh has " + std::to_string(x.rows()) + " vertices, template has " +
                                            std::to_string(num_vertices()));
    const auto xn = assets.to_model_space(x);
    Tensor<T> xt({static_cast<std::size_t>(num_vertices()), 3});
    for (std::size_t i = 0; i < xt.size(); ++i) xt.data[i] = static_cast<T>(xn.values()[i]);
    auto [mu, lv] = vae->encode_values(xt);
    return {std::vector<double>(mu.data.begin(), mu.data.end()), std::vector<double>(lv.data.begin(), lv.data.end())};
  }
};

template <typename T>
LoadedModel<T> load_model(const Checkpoint& ckpt, const Mesh* reference = nullptr) {
  LoadedModel<T> m;
  m.assets = load_assets(ckpt, reference);
  if (m.assets.precision != dtype_name<T>()) {
    throw DataError("checkpoint precision " + m.assets.precision + " does not match requested " + dtype_name<T>());
  }
  m.vae = std::make_unique<SpiralVae<T>>(m.assets.config, *m.assets.operators);
  get_parameters(ckpt, m.vae->parameters());
  return m;
}

// Calls fn(LoadedModel<float>&) or fn(LoadedModel<double>&) by stored precision.
template <typename Fn>
decltype(auto) with_model(const Checkpoint& ckpt, Fn&& fn, const Mesh* reference = nullptr) {
  const auto precision = ckpt.manifest.at("precision").get<std::string>();
  if (precision == "float64") {
    auto m = load_model<double>(ckpt, reference);
    return fn(m);
  }
  if (precision != "float32") throw DataError("unknown checkpoint precision " + precision);
  auto m = load_model<float>(ckpt, reference);
  return fn(m);
}

}  // namespace swapvae
