#pragma once

// Model container: one JSON document
//
//   {"format":"covtpp-model","version":1,
//    "hyperparams":{...},
//    "standardization":{"mean":[...],"std":[...]} | null,
//    "split_seed":n (optional),
//    "params":[{"name":"...","shape":[rows,cols],"values":[...]}, ...]}
//
// Values are written with shortest round-trip formatting, so a load/save
// cycle reproduces every 64-bit value exactly.

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "covtpp/errors.hpp"
#include "covtpp/model.hpp"

namespace covtpp {

inline constexpr int kModelFormatVersion = 1;

inline nlohmann::json model_to_json(const TransFeatModel& model) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, p] : model.params()) {
    params.push_back({{"name", name}, {"shape", {p.value.rows(), p.value.cols()}}, {"values", p.value.values()}});
  }
  nlohmann::json j = {{"format", "covtpp-model"},
                      {"version", kModelFormatVersion},
                      {"hyperparams", model.hyperparams()},
                      {"params", std::move(params)}};
  if (model.standardization) {
    j["standardization"] = {{"mean", model.standardization->mean}, {"std", model.standardization->stddev}};
  } else {
    j["standardization"] = nullptr;
  }
  if (model.split_seed) j["split_seed"] = *model.split_seed;
  return j;
}

inline TransFeatModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "covtpp-model") throw DataError("not a covtpp model container");
    if (j.at("version").get<int>() != kModelFormatVersion) {
      throw DataError("unsupported model format version " + std::to_string(j.at("version").get<int>()));
    }
    const HyperParams hp = j.at("hyperparams").get<HyperParams>();
    // Shapes come from the hyperparameters; the container must match them.
    TransFeatModel model(hp, 0);
    std::size_t seen = 0;
    for (const auto& e : j.at("params")) {
      const auto name = e.at("name").get<std::string>();
      if (!model.params().contains(name)) throw DataError("unexpected parameter '" + name + "' in model container");
      auto& value = model.params().at(name).value;
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2 || shape[0] != value.rows() || shape[1] != value.cols()) {
        throw DataError("parameter '" + name + "' has shape inconsistent with hyperparameters");
      }
      auto values = e.at("values").get<std::vector<double>>();
      if (values.size() != value.size()) throw DataError("parameter '" + name + "' has the wrong number of values");
      value = Tensor(shape[0], shape[1], std::move(values));
      ++seen;
    }
    if (seen != model.params().size()) throw DataError("model container is missing parameters");
    if (!j.at("standardization").is_null()) {
      Standardization st;
      st.mean = j.at("standardization").at("mean").get<std::vector<double>>();
      st.stddev = j.at("standardization").at("std").get<std::vector<double>>();
      model.standardization = std::move(st);
    }
    if (j.contains("split_seed")) model.split_seed = j.at("split_seed").get<std::uint64_t>();
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model container: ") + e.what());
  }
}

inline void save_model(const std::string& path, const TransFeatModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write model '" + path + "'");
  out << model_to_json(model).dump() << '\n';
}

inline TransFeatModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed model container '" + path + "': " + e.what());
  }
  return model_from_json(j);
}

}  // namespace covtpp
