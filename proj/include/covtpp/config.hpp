#pragma once

// Run configuration read from an INI file with sections [sim], [model],
// [train], [gradcheck] and [paths]. Every key is optional; unknown sections
// and keys are rejected. Per-feature vectors accept a comma-separated list or
// a single scalar that is broadcast to all sim.num_features entries.
//
// The name "tiny" selects a built-in preset instead of a file.

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "covtpp/encoder.hpp"
#include "covtpp/errors.hpp"
#include "covtpp/simulator.hpp"
#include "covtpp/train.hpp"

namespace covtpp {

struct GradCheckConfig {
  std::size_t seq_length = 5;     // L
  std::size_t num_sequences = 2;  // batch size of the random instance
  double eps = 1e-4;
  std::size_t samples_per_tensor = 64;
  double tolerance = 1e-4;
};

struct PathConfig {
  std::string data, model, out;
};

struct RunConfig {
  SimConfig sim;
  HyperParams model;
  TrainConfig train;
  GradCheckConfig gradcheck;
  PathConfig paths;
  std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
};

/// Small everything: M=8, H=H~=2, C=2, L=5, F=3, K=2.
inline RunConfig tiny_preset() {
  RunConfig c;
  c.model.embed_dim = 8;
  c.model.key_dim = 8;
  c.model.value_dim = 4;
  c.model.heads = 2;
  c.model.fisan_heads = 2;
  c.model.mixture_components = 2;
  c.model.aux_dim = 8;
  c.model.ffn_dim = 8;
  c.model.num_features = 3;
  c.model.num_types = 2;
  c.sim.num_features = 3;
  c.sim.covariate_low.assign(3, 0.0);
  c.sim.covariate_high.assign(3, 1.0);
  c.sim.time_weights.assign(3, 0.5);
  c.sim.type_weights = {2.0, 0.0, 0.0};
  c.sim.threshold = 1.2;
  c.sim.num_sequences = 30;
  c.train.max_epochs = 5;
  c.train.batch_size = 8;
  c.gradcheck.seq_length = 5;
  return c;
}

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (...) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw UsageError("config key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

inline std::size_t to_count(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d < 0 || d != static_cast<double>(static_cast<std::size_t>(d))) {
    throw UsageError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return static_cast<std::size_t>(d);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw UsageError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::vector<double> to_vector(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(key, trim(item)));
  if (out.empty()) throw UsageError("config key '" + key + "': empty list");
  return out;
}

}  // namespace config_detail

/// Applies key/value pairs onto `cfg`. Vectors given as one scalar are
/// broadcast after all keys are read, so key order does not matter.
inline void apply_config(RunConfig& cfg, const std::map<std::string, std::map<std::string, std::string>>& sections) {
  using namespace config_detail;
  std::map<std::string, std::vector<double>*> vectors = {{"covariate_low", &cfg.sim.covariate_low},
                                                         {"covariate_high", &cfg.sim.covariate_high},
                                                         {"time_weights", &cfg.sim.time_weights},
                                                         {"type_weights", &cfg.sim.type_weights}};
  std::set<std::string> scalar_vectors;
  bool features_set = false;
  for (const auto& [section, keys] : sections) {
    for (const auto& [key, value] : keys) {
      const std::string full = section + "." + key;
      bool known = true;
      if (section == "sim") {
        if (key == "model") {
          if (value == "poisson") {
            cfg.sim.model = SimModel::poisson;
          } else if (value == "hawkes") {
            cfg.sim.model = SimModel::hawkes;
          } else {
            throw UsageError("config key 'sim.model': expected poisson or hawkes");
          }
        } else if (key == "horizon") {
          cfg.sim.horizon = to_double(full, value);
        } else if (key == "num_features") {
          cfg.sim.num_features = to_count(full, value);
          features_set = true;
        } else if (key == "alpha") {
          cfg.sim.alpha = to_double(full, value);
        } else if (key == "beta") {
          cfg.sim.beta = to_double(full, value);
        } else if (key == "history_weight") {
          cfg.sim.history_weight = to_double(full, value);
        } else if (key == "threshold") {
          cfg.sim.threshold = to_double(full, value);
        } else if (key == "num_sequences") {
          cfg.sim.num_sequences = to_count(full, value);
        } else if (vectors.contains(key)) {
          *vectors[key] = to_vector(full, value);
          if (vectors[key]->size() == 1) scalar_vectors.insert(key);
        } else {
          known = false;
        }
      } else if (section == "model") {
        auto& m = cfg.model;
        if (key == "embed_dim") m.embed_dim = to_count(full, value);
        else if (key == "key_dim") m.key_dim = to_count(full, value);
        else if (key == "value_dim") m.value_dim = to_count(full, value);
        else if (key == "heads") m.heads = to_count(full, value);
        else if (key == "fisan_heads") m.fisan_heads = to_count(full, value);
        else if (key == "mixture_components") m.mixture_components = to_count(full, value);
        else if (key == "aux_dim") m.aux_dim = to_count(full, value);
        else if (key == "ffn_dim") m.ffn_dim = to_count(full, value);
        else if (key == "layers") m.layers = to_count(full, value);
        else if (key == "residual_layer_norm") m.residual_layer_norm = to_bool(full, value);
        else if (key == "dropout") m.dropout = to_double(full, value);
        else known = false;
      } else if (section == "train") {
        auto& t = cfg.train;
        if (key == "learning_rate") t.learning_rate = to_double(full, value);
        else if (key == "batch_size") t.batch_size = to_count(full, value);
        else if (key == "max_epochs") t.max_epochs = to_count(full, value);
        else if (key == "patience") t.patience = to_count(full, value);
        else if (key == "clip_norm") t.clip_norm = to_double(full, value);
        else if (key == "rescale_times") t.rescale_times = to_bool(full, value);
        else if (key == "bucket_pool") t.bucket_pool = to_count(full, value);
        else if (key == "split_ratios") {
          const auto r = to_vector(full, value);
          if (r.size() != 3) throw UsageError("config key 'train.split_ratios': expected three values");
          cfg.split_ratios = {r[0], r[1], r[2]};
        } else known = false;
      } else if (section == "gradcheck") {
        auto& g = cfg.gradcheck;
        if (key == "seq_length") g.seq_length = to_count(full, value);
        else if (key == "num_sequences") g.num_sequences = to_count(full, value);
        else if (key == "eps") g.eps = to_double(full, value);
        else if (key == "samples_per_tensor") g.samples_per_tensor = to_count(full, value);
        else if (key == "tolerance") g.tolerance = to_double(full, value);
        else known = false;
      } else if (section == "paths") {
        if (key == "data") cfg.paths.data = value;
        else if (key == "model") cfg.paths.model = value;
        else if (key == "out") cfg.paths.out = value;
        else known = false;
      } else {
        throw UsageError("unknown config section '[" + section + "]'");
      }
      if (!known) throw UsageError("unknown config key '" + full + "'");
    }
  }
  const std::size_t nf = cfg.sim.num_features;
  for (auto& [key, vec] : vectors) {
    if (scalar_vectors.contains(key) || (vec->size() == 1)) {
      vec->assign(nf, vec->front());
    } else if (features_set && vec->size() != nf) {
      // Defaults sized for a different F: pad with zeros or truncate only when
      // the key was not given explicitly.
      if (sections.contains("sim") && sections.at("sim").contains(key)) {
        throw UsageError("config key 'sim." + key + "' has " + std::to_string(vec->size()) +
                         " entries, expected " + std::to_string(nf));
      }
      vec->resize(nf, key == "covariate_high" ? 1.0 : 0.0);
    }
  }
}

inline RunConfig parse_config(std::istream& in) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw UsageError(std::string("malformed config: ") + e.message() + " at line " + std::to_string(e.line()));
  }
  std::map<std::string, std::map<std::string, std::string>> sections;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw UsageError("config key '" + section + "' lies outside any section");
    for (const auto& [key, value] : body) sections[section][key] = config_detail::trim(value.data());
  }
  RunConfig cfg;
  apply_config(cfg, sections);
  return cfg;
}

/// Loads a config file, or the built-in preset when `path` is "tiny".
inline RunConfig load_config(const std::string& path) {
  if (path == "tiny") return tiny_preset();
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config '" + path + "'");
  return parse_config(in);
}

}  // namespace covtpp
