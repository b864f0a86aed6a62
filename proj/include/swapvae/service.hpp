#pragma once

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <atomic>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "evaluation.hpp"
#include "mesh_io.hpp"
#include "studio.hpp"

namespace swapvae {

struct HttpError : std::runtime_error {
  int status;
  HttpError(int s, const std::string& msg) : std::runtime_error(msg), status(s) {}
};

struct ApiResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

// Request handling for the studio endpoints, independent of the transport.
template <typename T>
class StudioApi {
 public:
  explicit StudioApi(LoadedModel<T> model) : model_(std::move(model)) {}

  const LoadedModel<T>& model() const { return model_; }
  SessionStore& sessions() { return sessions_; }

  ApiResponse handle(const std::string& method, const std::string& path, const std::string& body,
                     const std::string& accept = "") {
    try {
      return route(method, path, body, accept);
    } catch (const HttpError& e) {
      return error(e.status, e.what());
    } catch (const nlohmann::json::exception& e) {
      return error(400, std::string("malformed request: ") + e.what());
    } catch (const DataError& e) {
      return error(422, e.what());
    } catch (const NumericalError& e) {
      return error(422, e.what());
    }
  }

 private:
  static ApiResponse error(int status, const std::string& msg) {
    return {status, nlohmann::json{{"error", msg}}.dump(), "application/json"};
  }
  static ApiResponse ok(const nlohmann::json& j) { return {200, j.dump(), "application/json"}; }

  static nlohmann::json parse(const std::string& body) {
    if (body.empty()) return nlohmann::json::object();
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw HttpError(400, "request body must be a JSON object");
    return j;
  }

  std::vector<double> latent(const nlohmann::json& j, const char* key, bool required = true) const {
    if (!j.contains(key)) {
      if (required) throw HttpError(400, std::string("missing field '") + key + "'");
      return std::vector<double>(static_cast<std::size_t>(model_.latent_size()), 0.0);
    }
    auto z = j.at(key).get<std::vector<double>>();
    if (z.size() != static_cast<std::size_t>(model_.latent_size())) {
      throw HttpError(422, std::string("'") + key + "' has " + std::to_string(z.size()) + " values, model expects " +
                               std::to_string(model_.latent_size()));
    }
    return z;
  }

  static nlohmann::json mesh_json(const VertexEmbedding& x) {
    return nlohmann::json{{"vertices", std::vector<double>(x.values().begin(), x.values().end())}};
  }

  std::shared_ptr<Session> session(const std::string& id) {
    auto s = sessions_.find(id);
    if (!s) throw HttpError(404, "unknown session '" + id + "'");
    return s;
  }

  // Runs fn with the session locked, rejecting concurrent mutation.
  template <typename Fn>
  auto mutate(Session& s, Fn&& fn) {
    std::unique_lock<std::mutex> lock(s.lock, std::try_to_lock);
    if (!lock.owns_lock()) throw HttpError(409, "session '" + s.id + "' is being modified by another request");
    return fn();
  }

  std::vector<double> sample_latent(std::uint64_t seed) const {
    Rng rng = make_stream(seed, Stream::kService);
    std::vector<double> z(static_cast<std::size_t>(model_.latent_size()));
    for (auto& v : z) v = standard_normal(rng);
    return z;
  }

  ApiResponse route(const std::string& method, const std::string& path, const std::string& body,
                    const std::string& accept) {
    const auto& a = model_.assets;
    auto& vae = model_.model();
    if (method == "GET" && path == "/api/model") {
      std::vector<int> sizes;
      for (int f = 0; f < vae.partition().features(); ++f) sizes.push_back(vae.partition().size(f));
      return ok({{"config", a.config},
                 {"features", a.segmentation.num_features()},
                 {"k_total", model_.latent_size()},
                 {"latent_sizes", sizes},
                 {"feature_names", a.segmentation.names()},
                 {"template_hash", a.template_hash()},
                 {"precision", a.precision},
                 {"vertices", model_.num_vertices()}});
    }
    if (method == "GET" && path == "/api/template") {
      if (accept.find("ply") != std::string::npos || accept.find("octet-stream") != std::string::npos) {
        std::vector<double> labels(a.segmentation.labels().begin(), a.segmentation.labels().end());
        std::ostringstream os;
        write_ply(os, a.topology, a.template_positions, true, PlyScalar{"feature", labels});
        return {200, os.str(), "application/x-ply"};
      }
      std::vector<Index> faces;
      for (const auto& f : a.topology.faces()) faces.insert(faces.end(), f.begin(), f.end());
      return ok({{"vertices", std::vector<double>(a.template_positions.values().begin(), a.template_positions.values().end())},
                 {"faces", faces},
                 {"labels", a.segmentation.labels()},
                 {"feature_names", a.segmentation.names()}});
    }
    if (method != "POST" && method != "GET" && method != "PUT") throw HttpError(404, "no route for " + method + " " + path);
    const auto j = parse(body);

    if (method == "POST" && path == "/api/sample") {
      const auto z = sample_latent(j.value("seed", std::uint64_t{0}));
      return ok({{"z", z}, {"mesh", mesh_json(model_.decode(z))}});
    }
    if (method == "POST" && path == "/api/encode") {
      const auto v = j.at("vertices").get<std::vector<double>>();
      if (v.size() != static_cast<std::size_t>(model_.num_vertices()) * 3) {
        throw HttpError(422, "vertices must hold " + std::to_string(model_.num_vertices() * 3) + " values");
      }
      auto [mu, logvar] = model_.encode(VertexEmbedding(v));
      return ok({{"mu", mu}, {"logvar", logvar}});
    }
    if (method == "POST" && path == "/api/decode") {
      return ok({{"mesh", mesh_json(model_.decode(latent(j, "z")))}});
    }
    if (method == "POST" && path == "/api/traverse") {
      const int index = j.at("index").get<int>();
      if (index < 0 || index >= model_.latent_size()) throw HttpError(422, "latent index out of range");
      return ok({{"mesh", mesh_json(traverse(vae, a, latent(j, "z", false), index, j.at("value").get<double>()))}});
    }
    if (method == "POST" && path == "/api/manipulate") {
      ManipulationRequest req;
      req.vertices = j.at("vertices").get<std::vector<Index>>();
      req.targets = j.at("targets").get<std::vector<double>>();
      req.restrict_features = j.value("restrict_features", std::vector<int>{});
      req.iterations = j.value("iterations", 50);
      req.lr = j.value("lr", 0.1);
      if (j.contains("session")) {
        auto s = session(j.at("session").get<std::string>());
        return mutate(*s, [&] {
          const auto r = direct_manipulate(vae, a, s->z, req);
          s->push(r.z);
          return ok({{"session", s->id}, {"z", r.z}, {"mesh", mesh_json(r.mesh)}, {"loss_trace", r.loss_trace}});
        });
      }
      const auto r = direct_manipulate(vae, a, latent(j, "z"), req);
      return ok({{"z", r.z}, {"mesh", mesh_json(r.mesh)}, {"loss_trace", r.loss_trace}});
    }
    if (method == "POST" && path == "/api/interpolate") {
      std::optional<std::vector<int>> subset;
      if (j.contains("subset") && !j.at("subset").is_null()) subset = j.at("subset").get<std::vector<int>>();
      const auto path_z = interpolation_path(latent(j, "z_a"), latent(j, "z_b"), j.at("steps").get<int>(), subset,
                                             vae.partition());
      nlohmann::json meshes = nlohmann::json::array();
      for (const auto& z : path_z) meshes.push_back(mesh_json(model_.decode(z)));
      return ok({{"z", path_z}, {"meshes", meshes}});
    }
    if (method == "POST" && path == "/api/session") {
      std::vector<double> z = j.contains("z") ? latent(j, "z") : j.contains("seed")
                                                                   ? sample_latent(j.at("seed").get<std::uint64_t>())
                                                                   : latent(j, "z", false);
      auto s = sessions_.create(z);
      return ok({{"id", s->id}, {"z", s->z}, {"mesh", mesh_json(model_.decode(s->z))}});
    }
    const std::string prefix = "/api/session/";
    if (path.rfind(prefix, 0) == 0) {
      const auto rest = path.substr(prefix.size());
      const auto slash = rest.find('/');
      if (slash == std::string::npos) throw HttpError(404, "no route for " + method + " " + path);
      const auto id = rest.substr(0, slash);
      const auto action = rest.substr(slash + 1);
      if (action == "latent" && method == "GET") {
        auto s = session(id);
        return mutate(*s, [&] { return ok({{"id", s->id}, {"z", s->z}, {"undo_depth", s->undo.size()}}); });
      }
      if (action == "latent" && method == "PUT") {
        auto s = session(id);
        const auto z = latent(j, "z");
        return mutate(*s, [&] {
          s->push(z);
          return ok({{"id", s->id}, {"z", s->z}, {"mesh", mesh_json(model_.decode(s->z))}});
        });
      }
      if (action == "undo" && method == "POST") {
        auto s = session(id);
        return mutate(*s, [&] {
          if (!s->pop()) throw HttpError(422, "nothing to undo");
          return ok({{"id", s->id}, {"z", s->z}, {"mesh", mesh_json(model_.decode(s->z))}});
        });
      }
    }
    throw HttpError(404, "no route for " + method + " " + path);
  }

  LoadedModel<T> model_;
  SessionStore sessions_;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::string cors_origin = "*";
};

// Binds the API to an httplib server. Returns the bound port; call
// server.listen_after_bind() to start serving.
template <typename T>
int bind_studio(httplib::Server& server, StudioApi<T>& api, const ServeOptions& opt) {
  const std::string origin = opt.cors_origin;
  auto forward = [&api, origin](const httplib::Request& req, httplib::Response& res) {
    const auto r = api.handle(req.method, req.path, req.body, req.get_header_value("Accept"));
    res.status = r.status;
    res.set_content(r.body, r.content_type);
    res.set_header("Access-Control-Allow-Origin", origin);
  };
  const char* pattern = R"(/api/.*)";
  server.Get(pattern, forward);
  server.Post(pattern, forward);
  server.Put(pattern, forward);
  server.Options(pattern, [origin](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", origin);
    res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type, Accept");
    res.status = 204;
  });
  if (opt.port == 0) return server.bind_to_any_port(opt.host);
  if (!server.bind_to_port(opt.host, opt.port)) throw DataError("cannot bind " + opt.host + ":" + std::to_string(opt.port));
  return opt.port;
}

}  // namespace swapvae
