#pragma once

// Feature-importance self-attention over covariates.
//
// Per head h the covariate x gets scores softmax(x W_h + b_h) over features.
// Importance fi(x) is the head average of those scores; the attended vector
// omega(x) is the head average of x * scores, which feeds a two-layer dense
// map to the auxiliary representation H2. Everything is per event: row i of
// H2 and fi depends on x_i only.
//
// Scores are computed on standardized covariates, so they rank features in
// standardized units.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "covtpp/autodiff.hpp"
#include "covtpp/data.hpp"
#include "covtpp/encoder.hpp"

namespace covtpp {

namespace names {
inline std::string fisan_head(std::size_t h, const char* leaf) { return "fisan.h" + std::to_string(h) + "." + leaf; }
}  // namespace names

template <class Rng>
void add_fisan_params(ParamStore& store, const HyperParams& hp, Rng& rng) {
  const std::size_t f = hp.num_features;
  for (std::size_t h = 0; h < hp.fisan_heads; ++h) {
    store.add(names::fisan_head(h, "weight"), init_uniform(f, f, f, rng));
    store.add(names::fisan_head(h, "bias"), Tensor(1, f));
  }
  store.add("fisan.aux1.weight", init_uniform(f, hp.aux_dim, f, rng));
  store.add("fisan.aux1.bias", Tensor(1, hp.aux_dim));
  store.add("fisan.aux2.weight", init_uniform(hp.aux_dim, hp.embed_dim, hp.aux_dim, rng));
  store.add("fisan.aux2.bias", Tensor(1, hp.embed_dim));
}

struct FisanScores {
  std::vector<double> omega;
  std::vector<double> importance;
};

/// Attention scores and attended covariate for a single event.
inline FisanScores fisan_attend(std::span<const double> x, const ParamStore& params, const HyperParams& hp) {
  const std::size_t nf = hp.num_features;
  if (x.size() != nf) throw ShapeError("fisan_attend: covariate width " + std::to_string(x.size()));
  FisanScores out{std::vector<double>(nf, 0.0), std::vector<double>(nf, 0.0)};
  std::vector<double> logits(nf);
  const double inv_heads = 1.0 / static_cast<double>(hp.fisan_heads);
  for (std::size_t h = 0; h < hp.fisan_heads; ++h) {
    const Tensor& w = params.at(names::fisan_head(h, "weight")).value;
    const Tensor& b = params.at(names::fisan_head(h, "bias")).value;
    for (std::size_t j = 0; j < nf; ++j) {
      double s = b[j];
      for (std::size_t i = 0; i < nf; ++i) s += x[i] * w(i, j);
      logits[j] = s;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (auto& v : logits) z += v = std::exp(v - mx);
    for (std::size_t j = 0; j < nf; ++j) {
      const double p = logits[j] / z;
      out.importance[j] += inv_heads * p;
      out.omega[j] += inv_heads * x[j] * p;
    }
  }
  return out;
}

struct FisanOutput {
  Var omega;       // rows x F
  Var importance;  // rows x F, rows on the simplex
  Var aux;         // H2, rows x M
};

inline FisanOutput fisan_forward(Tape& tape, Var covariates, const HyperParams& hp) {
  if (covariates.cols() != hp.num_features) throw ShapeError("fisan_forward: covariate width");
  std::vector<Var> omegas;
  std::vector<Var> scores;
  for (std::size_t h = 0; h < hp.fisan_heads; ++h) {
    Var p = softmax(add_bias(matmul(covariates, tape.param(names::fisan_head(h, "weight"))),
                             tape.param(names::fisan_head(h, "bias"))));
    scores.push_back(p);
    omegas.push_back(mul(covariates, p));
  }
  const double inv_heads = 1.0 / static_cast<double>(hp.fisan_heads);
  auto average = [&](const std::vector<Var>& parts) {
    Var acc = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
    return scale(acc, inv_heads);
  };
  FisanOutput out;
  out.omega = average(omegas);
  out.importance = average(scores);
  Var hidden = relu(add_bias(matmul(out.omega, tape.param("fisan.aux1.weight")), tape.param("fisan.aux1.bias")));
  out.aux = add_bias(matmul(hidden, tape.param("fisan.aux2.weight")), tape.param("fisan.aux2.bias"));
  return out;
}

/// H2 for one sequence's covariates (L x F).
inline Var auxiliary_representation(Tape& tape, const Tensor& covariates, const HyperParams& hp) {
  return fisan_forward(tape, tape.constant(covariates), hp).aux;
}

struct ImportanceReport {
  Tensor per_event;                              // L x F for one sequence (optional)
  std::vector<std::vector<double>> per_sequence;  // one simplex vector per sequence
  std::vector<double> corpus;                     // mean over every event
};

/// Per-event importance rows for one sequence.
inline Tensor event_importance(const EventSequence& s, const ParamStore& params, const HyperParams& hp) {
  Tensor out(s.size(), hp.num_features);
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto fi = fisan_attend(s.covariates.row_span(i), params, hp).importance;
    std::copy(fi.begin(), fi.end(), out.row_span(i).begin());
  }
  return out;
}

/// Sequence-level and corpus-level importance over one split.
inline ImportanceReport importance_report(const Dataset& d, Split split, const ParamStore& params,
                                          const HyperParams& hp) {
  const auto idx = d.indices(split);
  if (idx.empty()) throw DataError(std::string("importance: split '") + split_name(split) + "' is empty");
  ImportanceReport r;
  r.corpus.assign(hp.num_features, 0.0);
  std::size_t events = 0;
  for (auto i : idx) {
    const Tensor fi = event_importance(d.sequences[i], params, hp);
    std::vector<double> seq(hp.num_features, 0.0);
    for (std::size_t e = 0; e < fi.rows(); ++e)
      for (std::size_t f = 0; f < hp.num_features; ++f) {
        seq[f] += fi(e, f);
        r.corpus[f] += fi(e, f);
      }
    for (auto& v : seq) v /= static_cast<double>(fi.rows());
    r.per_sequence.push_back(std::move(seq));
    events += fi.rows();
  }
  for (auto& v : r.corpus) v /= static_cast<double>(events);
  return r;
}

/// Mean importance over every event of a split.
inline std::vector<double> corpus_importance(const Dataset& d, Split split, const ParamStore& params,
                                             const HyperParams& hp) {
  return importance_report(d, split, params, hp).corpus;
}

/// Feature indices by descending score (ties keep index order).
inline std::vector<std::size_t> importance_ranking(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

/// Ranked report: {"split":..., "features":[{"rank","feature","name","score","ground_truth"}...]}.
inline nlohmann::json importance_to_json(const std::vector<double>& corpus, Split split,
                                         const std::vector<std::string>& feature_names = {},
                                         const std::vector<double>& ground_truth = {}) {
  nlohmann::json features = nlohmann::json::array();
  const auto order = importance_ranking(corpus);
  for (std::size_t r = 0; r < order.size(); ++r) {
    const std::size_t f = order[r];
    nlohmann::json e = {{"rank", r + 1}, {"feature", f}, {"score", corpus[f]}};
    if (f < feature_names.size()) e["name"] = feature_names[f];
    if (f < ground_truth.size()) e["ground_truth"] = ground_truth[f];
    features.push_back(std::move(e));
  }
  return {{"split", split_name(split)}, {"features", std::move(features)}};
}

/// Reads the ranking (feature indices, most important first) back from a report.
inline std::vector<std::size_t> ranking_from_json(const nlohmann::json& j) {
  std::vector<std::size_t> ranking;
  for (const auto& e : j.at("features")) ranking.push_back(e.at("feature").get<std::size_t>());
  return ranking;
}

}  // namespace covtpp
