#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mesh.hpp"

namespace swapvae {

enum class MeshFormat { kObj, kPly };

struct Mesh {
  MeshTopology topology;
  VertexEmbedding positions;
};

namespace detail {

inline MeshFormat format_from_path(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".obj") return MeshFormat::kObj;
  if (ext == ".ply") return MeshFormat::kPly;
  throw DataError("unknown mesh extension '" + ext + "'");
}

inline Index parse_obj_index(const std::string& token, Index num_vertices) {
  // "a", "a/b", "a//c", "a/b/c"
  auto slash = token.find('/');
  long idx = 0;
  try {
    idx = std::stol(token.substr(0, slash));
  } catch (const std::exception&) {
    throw DataError("malformed OBJ face index '" + token + "'");
  }
  if (idx < 0) idx = num_vertices + idx + 1;
  if (idx < 1 || idx > num_vertices) throw DataError("OBJ face index out of range: " + token);
  return static_cast<Index>(idx - 1);
}

inline Mesh read_obj(std::istream& in) {
  std::vector<double> coords;
  std::vector<Face> faces;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ls >> x >> y >> z)) throw DataError("malformed OBJ vertex: " + line);
      coords.insert(coords.end(), {x, y, z});
    } else if (tag == "f") {
      std::vector<std::string> tokens;
      std::string t;
      while (ls >> t) tokens.push_back(t);
      if (tokens.size() != 3) throw DataError("non-triangular face: " + line);
      const auto n = static_cast<Index>(coords.size() / 3);
      faces.push_back({parse_obj_index(tokens[0], n), parse_obj_index(tokens[1], n),
                       parse_obj_index(tokens[2], n)});
    }
  }
  const auto n = static_cast<Index>(coords.size() / 3);
  return {MeshTopology(n, std::move(faces)), VertexEmbedding(std::move(coords))};
}

enum class PlyType { kInt8, kUInt8, kInt16, kUInt16, kInt32, kUInt32, kFloat32, kFloat64 };

inline PlyType parse_ply_type(const std::string& s) {
  if (s == "char" || s == "int8") return PlyType::kInt8;
  if (s == "uchar" || s == "uint8") return PlyType::kUInt8;
  if (s == "short" || s == "int16") return PlyType::kInt16;
  if (s == "ushort" || s == "uint16") return PlyType::kUInt16;
  if (s == "int" || s == "int32") return PlyType::kInt32;
  if (s == "uint" || s == "uint32") return PlyType::kUInt32;
  if (s == "float" || s == "float32") return PlyType::kFloat32;
  if (s == "double" || s == "float64") return PlyType::kFloat64;
  throw DataError("unknown PLY type '" + s + "'");
}

template <typename T>
T read_le(std::istream& in) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("truncated binary PLY");
  return v;
}

inline double read_ply_value(std::istream& in, PlyType type, bool binary) {
  if (!binary) {
    double v;
    if (!(in >> v)) throw DataError("truncated ASCII PLY");
    return v;
  }
  switch (type) {
    case PlyType::kInt8: return read_le<std::int8_t>(in);
    case PlyType::kUInt8: return read_le<std::uint8_t>(in);
    case PlyType::kInt16: return read_le<std::int16_t>(in);
    case PlyType::kUInt16: return read_le<std::uint16_t>(in);
    case PlyType::kInt32: return read_le<std::int32_t>(in);
    case PlyType::kUInt32: return read_le<std::uint32_t>(in);
    case PlyType::kFloat32: return read_le<float>(in);
    case PlyType::kFloat64: return read_le<double>(in);
  }
  return 0.0;
}

struct PlyProperty {
  std::string name;
  PlyType type = PlyType::kFloat32;
  bool is_list = false;
  PlyType count_type = PlyType::kUInt8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> properties;
};

inline Mesh read_ply(std::istream& in, std::vector<double>* scalar = nullptr,
                     const std::string& scalar_name = {}) {
  std::string line;
  std::getline(in, line);
  if (line.rfind("ply", 0) != 0) throw DataError("missing PLY magic");
  bool binary = false;
  std::vector<PlyElement> elements;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "binary_little_endian") binary = true;
      else if (fmt != "ascii") throw DataError("unsupported PLY format '" + fmt + "'");
    } else if (tag == "element") {
      PlyElement e;
      ls >> e.name >> e.count;
      elements.push_back(e);
    } else if (tag == "property") {
      if (elements.empty()) throw DataError("PLY property before element");
      PlyProperty p;
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string count_type, item_type;
        ls >> count_type >> item_type >> p.name;
        p.is_list = true;
        p.count_type = parse_ply_type(count_type);
        p.type = parse_ply_type(item_type);
      } else {
        p.type = parse_ply_type(type);
        ls >> p.name;
      }
      elements.back().properties.push_back(p);
    } else if (tag == "end_header") {
      break;
    }
  }

  std::vector<double> coords;
  std::vector<Face> faces;
  for (const auto& e : elements) {
    for (std::size_t i = 0; i < e.count; ++i) {
      double xyz[3] = {0, 0, 0};
      for (const auto& p : e.properties) {
        if (p.is_list) {
          auto count = static_cast<std::size_t>(read_ply_value(in, p.count_type, binary));
          std::vector<Index> idx(count);
          for (auto& v : idx) v = static_cast<Index>(read_ply_value(in, p.type, binary));
          if (e.name == "face") {
            if (count != 3) throw DataError("non-triangular face");
            faces.push_back({idx[0], idx[1], idx[2]});
          }
        } else {
          double v = read_ply_value(in, p.type, binary);
          if (e.name == "vertex") {
            if (p.name == "x") xyz[0] = v;
            else if (p.name == "y") xyz[1] = v;
            else if (p.name == "z") xyz[2] = v;
            else if (scalar && p.name == scalar_name) scalar->push_back(v);
          }
        }
      }
      if (e.name == "vertex") coords.insert(coords.end(), xyz, xyz + 3);
    }
  }
  const auto n = static_cast<Index>(coords.size() / 3);
  for (const auto& f : faces) {
    for (Index v : f) {
      if (v < 0 || v >= n) throw DataError("PLY face index out of range");
    }
  }
  return {MeshTopology(n, std::move(faces)), VertexEmbedding(std::move(coords))};
}

template <typename T>
void write_le(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

}  // namespace detail

inline Mesh load_mesh(const std::filesystem::path& path, std::optional<MeshFormat> format = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open mesh file " + path.string());
  const auto fmt = format.value_or(detail::format_from_path(path));
  return fmt == MeshFormat::kObj ? detail::read_obj(in) : detail::read_ply(in);
}

inline Mesh load_mesh_from_string(const std::string& text, MeshFormat format) {
  std::istringstream in(text);
  return format == MeshFormat::kObj ? detail::read_obj(in) : detail::read_ply(in);
}

inline void write_obj(std::ostream& out, const MeshTopology& topo, const VertexEmbedding& x) {
  require_matching(topo, x);
  char buf[128];
  for (Index n = 0; n < x.rows(); ++n) {
    std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", x(n, 0), x(n, 1), x(n, 2));
    out << buf;
  }
  for (const auto& f : topo.faces()) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

struct PlyScalar {
  std::string name;
  std::span<const double> values;
};

// Vertex coordinates are written as doubles so binary round trips are exact.
inline void write_ply(std::ostream& out, const MeshTopology& topo, const VertexEmbedding& x,
                      bool binary = true, std::optional<PlyScalar> scalar = {}) {
  require_matching(topo, x);
  if (scalar) require(scalar->values.size() == static_cast<std::size_t>(x.rows()), "scalar size mismatch");
  out << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n";
  out << "element vertex " << x.rows() << "\n";
  out << "property double x\nproperty double y\nproperty double z\n";
  if (scalar) out << "property double " << scalar->name << "\n";
  out << "element face " << topo.num_faces() << "\n";
  out << "property list uchar int vertex_indices\nend_header\n";
  char buf[160];
  for (Index n = 0; n < x.rows(); ++n) {
    if (binary) {
      for (int c = 0; c < 3; ++c) detail::write_le(out, x(n, c));
      if (scalar) detail::write_le(out, scalar->values[n]);
    } else {
      std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g", x(n, 0), x(n, 1), x(n, 2));
      out << buf;
      if (scalar) {
        std::snprintf(buf, sizeof(buf), " %.17g", scalar->values[n]);
        out << buf;
      }
      out << '\n';
    }
  }
  for (const auto& f : topo.faces()) {
    if (binary) {
      detail::write_le<std::uint8_t>(out, 3);
      for (Index v : f) detail::write_le<std::int32_t>(out, v);
    } else {
      out << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
    }
  }
}

inline void save_mesh(const std::filesystem::path& path, const MeshTopology& topo,
                      const VertexEmbedding& x, std::optional<MeshFormat> format = {},
                      bool binary_ply = true) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write mesh file " + path.string());
  if (format.value_or(detail::format_from_path(path)) == MeshFormat::kObj) {
    write_obj(out, topo, x);
  } else {
    write_ply(out, topo, x, binary_ply);
  }
}

inline std::string ply_bytes(const MeshTopology& topo, const VertexEmbedding& x, bool binary = true) {
  std::ostringstream out(std::ios::binary);
  write_ply(out, topo, x, binary);
  return out.str();
}

// Segmentation JSON: {"features": [{"name": str, "vertices": [int, ...]}, ...]}.
// A plain text file with one integer label per line is also accepted.
inline FeatureSegmentation segmentation_from_json(const nlohmann::json& doc, Index num_vertices) {
  if (!doc.contains("features") || !doc["features"].is_array()) {
    throw DataError("segmentation JSON lacks a 'features' array");
  }
  std::vector<std::vector<Index>> groups;
  std::vector<std::string> names;
  for (const auto& f : doc["features"]) {
    names.push_back(f.value("name", "feature" + std::to_string(names.size())));
    groups.push_back(f.at("vertices").get<std::vector<Index>>());
  }
  return FeatureSegmentation::from_groups(num_vertices, groups, std::move(names));
}

inline nlohmann::json segmentation_to_json(const FeatureSegmentation& seg) {
  nlohmann::json features = nlohmann::json::array();
  for (int f = 0; f < seg.num_features(); ++f) {
    features.push_back({{"name", seg.names()[f]}, {"vertices", seg.vertices(f)}});
  }
  return {{"features", features}};
}

inline FeatureSegmentation load_segmentation(const std::filesystem::path& path,
                                             const MeshTopology& topo) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open segmentation file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed segmentation JSON: ") + e.what());
    }
    return segmentation_from_json(doc, topo.num_vertices());
  }
  std::istringstream ls(text);
  std::vector<Index> labels;
  Index label;
  while (ls >> label) labels.push_back(label);
  require(static_cast<Index>(labels.size()) == topo.num_vertices(),
          labels.size() < static_cast<std::size_t>(topo.num_vertices()) ? "uncovered vertex in label column"
                                                                        : "label column longer than vertex count");
  Index count = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::vector<Index>> groups(static_cast<std::size_t>(std::max<Index>(count, 0)));
  for (Index v = 0; v < static_cast<Index>(labels.size()); ++v) {
    require(labels[v] >= 0, "negative feature label");
    groups[labels[v]].push_back(v);
  }
  std::vector<std::string> names;
  for (Index f = 0; f < count; ++f) names.push_back("feature" + std::to_string(f));
  return FeatureSegmentation::from_groups(topo.num_vertices(), groups, std::move(names));
}

inline void save_segmentation(const std::filesystem::path& path, const FeatureSegmentation& seg) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write segmentation file " + path.string());
  out << segmentation_to_json(seg).dump(1) << '\n';
}

}  // namespace swapvae
