// Run configuration: one JSON document with world/model/train/probe/paths/
// ablate sections, every key optional, unknown keys rejected, and
// `--key value` overrides applied on top.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxssl/error.hpp"
#include "ctxssl/evaluation.hpp"
#include "ctxssl/model.hpp"
#include "ctxssl/synthetic_world.hpp"
#include "ctxssl/training.hpp"

namespace ctxssl {

struct PathsConfig {
  std::string world = "world.bin";
  std::string out_dir = "run";
  std::string checkpoint;  // empty: <out_dir>/checkpoint.bin
  std::int64_t checkpoint_every = 1000;
  bool resume = false;
  bool svg = true;
};

inline void to_json(json& j, const PathsConfig& c) {
  j = json{{"world", c.world},
           {"out_dir", c.out_dir},
           {"checkpoint", c.checkpoint},
           {"checkpoint_every", c.checkpoint_every},
           {"resume", c.resume},
           {"svg", c.svg}};
}

inline void from_json(const json& j, PathsConfig& c) {
  c.world = j.at("world");
  c.out_dir = j.at("out_dir");
  c.checkpoint = j.at("checkpoint");
  c.checkpoint_every = j.at("checkpoint_every");
  c.resume = j.at("resume");
  c.svg = j.at("svg");
}

struct AblateConfig {
  std::vector<double> p_grid = {0.0, 0.2, 0.5, 0.75, 0.9, 0.98};
  std::vector<double> lambda_grid;  // empty: the train section's lambda only
  std::vector<std::uint64_t> seeds = {0};
};

inline void to_json(json& j, const AblateConfig& c) {
  j = json{{"p_grid", c.p_grid}, {"lambda_grid", c.lambda_grid}, {"seeds", c.seeds}};
}

inline void from_json(const json& j, AblateConfig& c) {
  c.p_grid = j.at("p_grid").get<std::vector<double>>();
  c.lambda_grid = j.at("lambda_grid").get<std::vector<double>>();
  c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
}

struct RunConfig {
  WorldConfig world;
  ModelConfig model;
  TrainConfig train;
  ProbeConfig probe;
  PathsConfig paths;
  AblateConfig ablate;

  std::filesystem::path checkpoint_path() const {
    return paths.checkpoint.empty() ? std::filesystem::path(paths.out_dir) / "checkpoint.bin"
                                    : std::filesystem::path(paths.checkpoint);
  }
};

inline void to_json(json& j, const RunConfig& c) {
  j = json{{"world", c.world}, {"model", c.model}, {"train", c.train},
           {"probe", c.probe}, {"paths", c.paths}, {"ablate", c.ablate}};
}

inline void from_json(const json& j, RunConfig& c) {
  c.world = j.at("world");
  c.model = j.at("model");
  c.train = j.at("train");
  c.probe = j.at("probe");
  c.paths = j.at("paths");
  c.ablate = j.at("ablate");
}

/// Short flag names accepted in addition to "section.key".
inline const std::map<std::string, std::string>& override_aliases() {
  static const std::map<std::string, std::string> m = {
      {"steps", "train.steps"},       {"mode", "train.mode"},         {"seed", "train.seed"},
      {"lr", "train.lr"},             {"p", "train.mask_p"},          {"lambda", "train.lambda"},
      {"k-max", "train.k_max"},       {"batch", "train.batch_sequences"},
      {"groups", "train.groups"},     {"lengths", "probe.lengths"},   {"eval-seed", "probe.eval_seed"},
      {"world", "paths.world"},       {"out", "paths.out_dir"},       {"checkpoint", "paths.checkpoint"},
      {"resume", "paths.resume"},     {"world-seed", "world.seed"},   {"active-groups", "world.active_groups"},
  };
  return m;
}

namespace detail {

/// Overlays `patch` onto `base`, rejecting keys `base` does not have.
inline void merge_strict(json& base, const json& patch, const std::string& where) {
  require(patch.is_object(), ErrorKind::Config, "config section '" + where + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    require(base.contains(it.key()), ErrorKind::Config, "unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), key);
    } else {
      const bool numeric = slot.is_number() && it.value().is_number();
      require(numeric || slot.type() == it.value().type(), ErrorKind::Config,
              "config key '" + key + "' has the wrong type");
      slot = it.value();
    }
  }
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

/// Parses a flag value using the type of the default it replaces.
inline json parse_like(const json& like, const std::string& text, const std::string& key) {
  try {
    if (like.is_boolean()) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw Error(ErrorKind::Config, "expected true/false");
    }
    if (like.is_number_unsigned()) return std::stoull(text);
    if (like.is_number_integer()) return std::stoll(text);
    if (like.is_number()) return std::stod(text);
    if (like.is_string()) return text;
    if (like.is_array()) {
      json arr = json::array();
      const json elem = like.empty() ? json(0.0) : like.front();
      for (const auto& item : split_list(text)) arr.push_back(parse_like(elem, item, key));
      return arr;
    }
  } catch (const Error&) {
    throw Error(ErrorKind::Config, "bad value '" + text + "' for '" + key + "'");
  } catch (const std::exception&) {
    throw Error(ErrorKind::Config, "bad value '" + text + "' for '" + key + "'");
  }
  throw Error(ErrorKind::Config, "cannot override '" + key + "' from the command line");
}

}  // namespace detail

inline json default_config_json() { return json(RunConfig{}); }

/// Resolves a run config: defaults, then the JSON file (if any), then
/// `--key value` overrides in order.
inline RunConfig resolve_config(const json& file_cfg,
                                const std::vector<std::pair<std::string, std::string>>& overrides) {
  json cfg = default_config_json();
  if (!file_cfg.is_null()) detail::merge_strict(cfg, file_cfg, "");
  for (const auto& [raw_key, value] : overrides) {
    std::string key = raw_key;
    if (const auto it = override_aliases().find(key); it != override_aliases().end()) key = it->second;
    const auto dot = key.find('.');
    require(dot != std::string::npos, ErrorKind::Config, "unknown option '--" + raw_key + "'");
    const std::string section = key.substr(0, dot), field = key.substr(dot + 1);
    require(cfg.contains(section) && cfg[section].contains(field), ErrorKind::Config,
            "unknown option '--" + raw_key + "'");
    // Group lists are stored as string arrays even when empty by default.
    const json like = (field == "groups" || field == "active_groups") ? json::array({""}) : cfg[section][field];
    cfg[section][field] = detail::parse_like(like, value, raw_key);
  }
  RunConfig rc;
  try {
    rc = cfg.get<RunConfig>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Config, std::string("invalid config: ") + e.what());
  }
  rc.world.validate();
  rc.model.validate();
  rc.train.validate();
  for (double p : rc.ablate.p_grid) require(p >= 0.0 && p <= 1.0, ErrorKind::Config, "ablate p outside [0,1]");
  for (double l : rc.ablate.lambda_grid) require(l >= 0.0, ErrorKind::Config, "ablate lambda must be >= 0");
  return rc;
}

inline json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Config, "cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Config, "config " + path.string() + " is not valid JSON: " + e.what());
  }
}

inline std::uint64_t config_hash(const json& j) { return fnv1a64(j.dump()); }

}  // namespace ctxssl
