#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "errors.hpp"
#include "evaluation.hpp"
#include "model.hpp"
#include "trainer.hpp"

namespace swapvae {

struct EvalConfig {
  double traversal_bound = 3.0;
  double threshold = 3.0;
  std::uint64_t seed = 0;
  GenerationOptions generation;
  FitSchedule fit;
};

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"traversal_bound", c.traversal_bound},
       {"threshold", c.threshold},
       {"seed", c.seed},
       {"samples", c.generation.samples},
       {"max_points", c.generation.max_points},
       {"emd_max_points", c.generation.emd_max_points},
       {"jsd_resolution", c.generation.jsd_resolution},
       {"with_emd", c.generation.with_emd},
       {"fit", {{"landmark_iterations", c.fit.landmark_iterations},
                {"chamfer_iterations", c.fit.chamfer_iterations},
                {"lr", c.fit.lr}}}};
}

inline void from_json(const nlohmann::json& j, EvalConfig& c) {
  j.at("traversal_bound").get_to(c.traversal_bound);
  j.at("threshold").get_to(c.threshold);
  j.at("seed").get_to(c.seed);
  j.at("samples").get_to(c.generation.samples);
  j.at("max_points").get_to(c.generation.max_points);
  j.at("emd_max_points").get_to(c.generation.emd_max_points);
  j.at("jsd_resolution").get_to(c.generation.jsd_resolution);
  j.at("with_emd").get_to(c.generation.with_emd);
  j.at("fit").at("landmark_iterations").get_to(c.fit.landmark_iterations);
  j.at("fit").at("chamfer_iterations").get_to(c.fit.chamfer_iterations);
  j.at("fit").at("lr").get_to(c.fit.lr);
}

struct ServeConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string cors_origin = "*";
};

inline void to_json(nlohmann::json& j, const ServeConfig& c) {
  j = {{"host", c.host}, {"port", c.port}, {"cors_origin", c.cors_origin}};
}
inline void from_json(const nlohmann::json& j, ServeConfig& c) {
  j.at("host").get_to(c.host);
  j.at("port").get_to(c.port);
  j.at("cors_origin").get_to(c.cors_origin);
}

struct Config {
  SyntheticDatasetConfig dataset;
  ModelConfig model;
  TrainConfig trainer;
  EvalConfig eval;
  ServeConfig serve;

  void validate() const {
    try {
      dataset.validate();
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
    model.validate();
    trainer.validate();
    if (model.features != dataset.features) throw ConfigError("model.features must equal dataset.features");
    if (eval.generation.samples < 1) throw ConfigError("eval.samples must be >= 1");
    if (eval.generation.emd_max_points < 1) throw ConfigError("eval.emd_max_points must be >= 1");
    if (eval.fit.lr <= 0) throw ConfigError("eval.fit.lr must be > 0");
  }
};

inline nlohmann::json config_json(const Config& c) {
  return {{"dataset", c.dataset}, {"model", c.model}, {"trainer", c.trainer}, {"eval", c.eval}, {"serve", c.serve}};
}

namespace detail {

inline bool same_kind(const nlohmann::json& schema, const nlohmann::json& value) {
  if (schema.is_boolean()) return value.is_boolean();
  if (schema.is_number_integer()) return value.is_number_integer() && (schema.is_number_unsigned() ? value >= 0 : true);
  if (schema.is_number()) return value.is_number();
  if (schema.is_string()) return value.is_string();
  if (schema.is_array()) {
    if (!value.is_array()) return false;
    if (schema.empty()) return true;
    for (const auto& v : value) {
      if (!same_kind(schema.front(), v)) return false;
    }
    return true;
  }
  if (schema.is_object()) return value.is_object();
  return false;
}

// Copies `patch` over `base`, rejecting keys or types the base does not have.
inline void merge_checked(nlohmann::json& base, const nlohmann::json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError(where.empty() ? "config must be a JSON object" : where + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string name = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + name + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      merge_checked(slot, value, name);
    } else {
      if (!same_kind(slot, value)) throw ConfigError("config key '" + name + "' expects " + slot.type_name());
      slot = value;
    }
  }
}

}  // namespace detail

// Applies "a.b.c=value"; the value is read as JSON and falls back to a plain
// string, then must match the type of the existing key.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos;) {
    parts.push_back(rest.substr(0, pos));
    rest = rest.substr(pos + 1);
  }
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
  detail::merge_checked(cfg, patch, "");
}

inline Config config_from_json(const nlohmann::json& j) {
  Config c;
  try {
    j.at("dataset").get_to(c.dataset);
    j.at("model").get_to(c.model);
    j.at("trainer").get_to(c.trainer);
    j.at("eval").get_to(c.eval);
    j.at("serve").get_to(c.serve);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  c.validate();
  return c;
}

// Defaults, then the optional file, then overrides in order.
inline Config load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  nlohmann::json cfg = config_json(Config{});
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    nlohmann::json file = nlohmann::json::parse(in, nullptr, false);
    if (file.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
    detail::merge_checked(cfg, file, "");
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  return config_from_json(cfg);
}

}  // namespace swapvae
