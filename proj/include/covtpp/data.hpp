#pragma once

// Event-sequence records, the line-delimited JSON dataset format, splitting
// and covariate standardization.
//
// File layout (one JSON object per line):
//
//   {"covtpp_dataset":1,"num_types":2,"num_features":3,
//    "ground_truth_importance":[...],"feature_names":[...],
//    "standardization":{"mean":[...],"std":[...]}}          <- optional header
//   {"times":[0.4,1.2],"types":[0,1],"covariates":[[..],[..]],
//    "meta":"...","split":"train"}                           <- one per sequence
//
// Without a header, num_types is inferred as max(type)+1 and num_features
// from the first covariate row.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "covtpp/errors.hpp"
#include "covtpp/tensor.hpp"

namespace covtpp {

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw UsageError("unknown split '" + s + "' (expected train, val or test)");
}

/// One realization: times strictly increasing, covariates L x F.
struct EventSequence {
  std::vector<double> times;
  std::vector<std::size_t> types;
  Tensor covariates;
  std::string meta;

  std::size_t size() const { return times.size(); }
  std::size_t num_features() const { return covariates.cols(); }

  friend bool operator==(const EventSequence&, const EventSequence&) = default;
};

/// Per-feature affine map x -> (x - mean) / std fitted on the training split.
struct Standardization {
  std::vector<double> mean;
  std::vector<double> stddev;

  void apply(EventSequence& s) const {
    if (s.covariates.cols() != mean.size()) throw ShapeError("standardization width mismatch");
    for (std::size_t i = 0; i < s.covariates.rows(); ++i)
      for (std::size_t f = 0; f < mean.size(); ++f) s.covariates(i, f) = (s.covariates(i, f) - mean[f]) / stddev[f];
  }

  friend bool operator==(const Standardization&, const Standardization&) = default;
};

struct Dataset {
  std::vector<EventSequence> sequences;
  std::vector<Split> splits;  // parallel to sequences
  std::size_t num_types = 0;
  std::size_t num_features = 0;
  std::optional<Standardization> standardization;
  std::vector<double> ground_truth_importance;
  std::vector<std::string> feature_names;

  std::size_t size() const { return sequences.size(); }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == s) out.push_back(i);
    return out;
  }

  std::size_t count(Split s) const { return static_cast<std::size_t>(std::count(splits.begin(), splits.end(), s)); }

  std::size_t event_count(Split s) const {
    std::size_t n = 0;
    for (auto i : indices(s)) n += sequences[i].size();
    return n;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Throws DataError unless the sequence satisfies the record invariants.
inline void validate_sequence(const EventSequence& s, std::size_t num_types, std::size_t num_features,
                              const std::string& where) {
  const std::size_t n = s.times.size();
  if (n == 0) throw DataError("empty sequence " + where);
  if (s.types.size() != n || s.covariates.rows() != n) {
    throw DataError("times, types and covariates differ in length " + where);
  }
  if (s.covariates.cols() != num_features) {
    throw DataError("inconsistent covariate dimension " + std::to_string(s.covariates.cols()) + " (expected " +
                    std::to_string(num_features) + ") " + where);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(s.times[i]) || s.times[i] < 0.0) throw DataError("negative or non-finite time " + where);
    if (i > 0 && !(s.times[i] > s.times[i - 1])) throw DataError("non-increasing times " + where);
    if (s.types[i] >= num_types) {
      throw DataError("type " + std::to_string(s.types[i]) + " >= K=" + std::to_string(num_types) + " " + where);
    }
  }
  if (!s.covariates.all_finite()) throw DataError("non-finite covariate " + where);
}

namespace detail {

inline EventSequence sequence_from_json(const nlohmann::json& j, std::optional<Split>& split) {
  EventSequence s;
  s.times = j.at("times").get<std::vector<double>>();
  s.types = j.at("types").get<std::vector<std::size_t>>();
  const auto& cov = j.at("covariates");
  if (!cov.is_array()) throw DataError("covariates must be an array");
  const std::size_t width = cov.empty() ? 0 : cov.front().size();
  std::vector<double> flat;
  flat.reserve(cov.size() * width);
  for (const auto& row : cov) {
    if (!row.is_array() || row.size() != width) throw DataError("ragged covariate rows");
    for (const auto& v : row) flat.push_back(v.get<double>());
  }
  s.covariates = Tensor(cov.size(), width, std::move(flat));
  if (j.contains("meta")) s.meta = j.at("meta").get<std::string>();
  if (j.contains("split")) split = parse_split(j.at("split").get<std::string>());
  return s;
}

inline nlohmann::json sequence_to_json(const EventSequence& s, Split split) {
  nlohmann::json cov = nlohmann::json::array();
  for (std::size_t i = 0; i < s.covariates.rows(); ++i) {
    auto row = s.covariates.row_span(i);
    cov.push_back(std::vector<double>(row.begin(), row.end()));
  }
  nlohmann::json j = nlohmann::json::object();
  j["times"] = s.times;
  j["types"] = s.types;
  j["covariates"] = std::move(cov);
  if (!s.meta.empty()) j["meta"] = s.meta;
  j["split"] = split_name(split);
  return j;
}

}  // namespace detail

/// Parses a dataset from a stream. Sequences without a "split" field are
/// assigned to the training split.
inline Dataset read_dataset(std::istream& in) {
  Dataset d;
  std::optional<std::size_t> header_types;
  std::optional<std::size_t> header_features;
  std::vector<std::size_t> line_of;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "at line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed record " + where + ": " + e.what());
    }
    try {
      if (j.contains("covtpp_dataset")) {
        if (!d.sequences.empty()) throw DataError("header must precede sequences " + where);
        if (j.at("covtpp_dataset").get<int>() != 1) throw DataError("unsupported dataset version " + where);
        header_types = j.at("num_types").get<std::size_t>();
        header_features = j.at("num_features").get<std::size_t>();
        if (j.contains("ground_truth_importance"))
          d.ground_truth_importance = j.at("ground_truth_importance").get<std::vector<double>>();
        if (j.contains("feature_names")) d.feature_names = j.at("feature_names").get<std::vector<std::string>>();
        if (j.contains("standardization")) {
          Standardization st;
          st.mean = j.at("standardization").at("mean").get<std::vector<double>>();
          st.stddev = j.at("standardization").at("std").get<std::vector<double>>();
          d.standardization = std::move(st);
        }
        continue;
      }
      std::optional<Split> split;
      EventSequence s = detail::sequence_from_json(j, split);
      if (s.times.empty()) throw DataError("empty sequence " + where);
      for (std::size_t i = 1; i < s.times.size(); ++i)
        if (!(s.times[i] > s.times[i - 1])) throw DataError("non-increasing times " + where);
      d.sequences.push_back(std::move(s));
      d.splits.push_back(split.value_or(Split::train));
      line_of.push_back(line_no);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed record " + where + ": " + e.what());
    }
  }
  if (d.sequences.empty()) throw DataError("empty dataset");

  std::size_t max_type = 0;
  for (const auto& s : d.sequences)
    for (auto y : s.types) max_type = std::max(max_type, y);
  d.num_types = header_types.value_or(max_type + 1);
  d.num_features = header_features.value_or(d.sequences.front().covariates.cols());
  for (std::size_t i = 0; i < d.sequences.size(); ++i)
    validate_sequence(d.sequences[i], d.num_types, d.num_features, "at line " + std::to_string(line_of[i]));
  if (!d.ground_truth_importance.empty() && d.ground_truth_importance.size() != d.num_features)
    throw DataError("ground_truth_importance length differs from num_features");
  if (!d.feature_names.empty() && d.feature_names.size() != d.num_features)
    throw DataError("feature_names length differs from num_features");
  return d;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  return read_dataset(in);
}

inline void write_dataset(std::ostream& out, const Dataset& d) {
  nlohmann::json header = nlohmann::json::object();
  header["covtpp_dataset"] = 1;
  header["num_types"] = d.num_types;
  header["num_features"] = d.num_features;
  if (!d.ground_truth_importance.empty()) header["ground_truth_importance"] = d.ground_truth_importance;
  if (!d.feature_names.empty()) header["feature_names"] = d.feature_names;
  if (d.standardization) {
    header["standardization"] = {{"mean", d.standardization->mean}, {"std", d.standardization->stddev}};
  }
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < d.sequences.size(); ++i)
    out << detail::sequence_to_json(d.sequences[i], d.splits[i]).dump() << '\n';
}

inline void save_dataset(const std::string& path, const Dataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset '" + path + "'");
  write_dataset(out, d);
}

/// Random partition into train/val/test. Val and test receive
/// floor(ratio * N) sequences; the remainder goes to train.
inline Dataset split_dataset(Dataset d, const std::array<double, 3>& ratios, std::uint64_t seed) {
  if (std::any_of(ratios.begin(), ratios.end(), [](double r) { return !(r > 0.0); }))
    throw std::invalid_argument("split ratios must be positive");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9)
    throw std::invalid_argument("split ratios must sum to 1");
  const std::size_t n = d.sequences.size();
  if (n < 3) throw std::invalid_argument("need at least 3 sequences to split");
  const auto n_val = static_cast<std::size_t>(std::floor(ratios[1] * static_cast<double>(n) + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(ratios[2] * static_cast<double>(n) + 1e-9));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Fisher-Yates with explicit index draws so the permutation does not
  // depend on the standard library's shuffle implementation.
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(order[i], order[j]);
  }
  d.splits.assign(n, Split::train);
  for (std::size_t k = 0; k < n_val; ++k) d.splits[order[k]] = Split::val;
  for (std::size_t k = n_val; k < n_val + n_test; ++k) d.splits[order[k]] = Split::test;
  return d;
}

/// Fits per-feature mean and population std on the training split and
/// applies them to every split. Zero-variance features keep std = 1.
inline Dataset standardize_covariates(Dataset d) {
  const auto train = d.indices(Split::train);
  if (train.empty()) throw DataError("standardization needs a non-empty training split");
  const std::size_t nf = d.num_features;
  Standardization st;
  st.mean.assign(nf, 0.0);
  st.stddev.assign(nf, 0.0);
  double count = 0.0;
  for (auto i : train) {
    const Tensor& x = d.sequences[i].covariates;
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t f = 0; f < nf; ++f) st.mean[f] += x(r, f);
    count += static_cast<double>(x.rows());
  }
  for (auto& m : st.mean) m /= count;
  for (auto i : train) {
    const Tensor& x = d.sequences[i].covariates;
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t f = 0; f < nf; ++f) st.stddev[f] += (x(r, f) - st.mean[f]) * (x(r, f) - st.mean[f]);
  }
  for (auto& s : st.stddev) {
    s = std::sqrt(s / count);
    if (!(s > 1e-12)) s = 1.0;
  }
  for (auto& s : d.sequences) st.apply(s);
  d.standardization = std::move(st);
  return d;
}

}  // namespace covtpp
