#pragma once

// Synthetic covariate point processes simulated by Ogata thinning.
//
// A covariate vector is drawn i.i.d. at t = 0 and again at every event; it is
// attached to that event and held until the next one. The intensity is
//
//   poisson: lambda(t) = w_t . x_n
//   hawkes:  lambda(t) = w_t . x_n + sum_{t_i < t} alpha exp(-beta (t - t_i))
//
// where x_n is the latest drawn covariate. The type of event n+1 is 1 iff
// w_c . x_n + (1/n) sum_i w_h tau_i > zeta (history term 0 when n = 0).

#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "covtpp/data.hpp"
#include "covtpp/errors.hpp"
#include "covtpp/parallel.hpp"

namespace covtpp {

enum class SimModel { poisson, hawkes };

inline const char* sim_model_name(SimModel m) { return m == SimModel::poisson ? "poisson" : "hawkes"; }

struct SimConfig {
  SimModel model = SimModel::hawkes;
  double horizon = 20.0;
  std::size_t num_features = 10;
  // Covariates are uniform(lo[f], hi[f]) per feature.
  std::vector<double> covariate_low = std::vector<double>(10, 0.0);
  std::vector<double> covariate_high = std::vector<double>(10, 1.0);
  std::vector<double> time_weights = std::vector<double>(10, 0.05);  // w_t
  double alpha = 0.6;
  double beta = 1.0;
  std::vector<double> type_weights = {3.0, 2.0, 0, 0, 0, 0, 0, 0, 0, 0};  // w_c
  double history_weight = 0.1;                                            // w_h, w_tau(tau) = w_h * tau
  double threshold = 3.3;                                                  // zeta
  std::size_t num_sequences = 1280;

  /// Sparse-importance Hawkes setting: ten covariates, two of them drive types.
  static SimConfig hawkes_default() { return SimConfig{}; }

  /// Covariate inhomogeneous Poisson default: covariates on [0.5, 1.5] keep
  /// the intensity strictly positive.
  static SimConfig poisson_default() {
    SimConfig c;
    c.model = SimModel::poisson;
    c.horizon = 25.0;
    c.covariate_low.assign(10, 0.5);
    c.covariate_high.assign(10, 1.5);
    c.time_weights.assign(10, 0.1);
    c.alpha = 0.0;
    c.threshold = 4.3;
    return c;
  }

  double min_baseline() const {
    double s = 0.0;
    for (std::size_t f = 0; f < num_features; ++f)
      s += std::min(time_weights[f] * covariate_low[f], time_weights[f] * covariate_high[f]);
    return s;
  }
  double max_baseline() const {
    double s = 0.0;
    for (std::size_t f = 0; f < num_features; ++f)
      s += std::max(time_weights[f] * covariate_low[f], time_weights[f] * covariate_high[f]);
    return s;
  }

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw DataError("invalid simulation config: " + msg);
    };
    need(num_features > 0, "num_features must be positive");
    need(covariate_low.size() == num_features && covariate_high.size() == num_features,
         "covariate range length must equal num_features");
    need(time_weights.size() == num_features, "time_weights length must equal num_features");
    need(type_weights.size() == num_features, "type_weights length must equal num_features");
    need(horizon > 0.0, "horizon must be positive");
    for (std::size_t f = 0; f < num_features; ++f) need(covariate_low[f] <= covariate_high[f], "covariate low > high");
    for (double w : time_weights) need(w >= 0.0, "time weights must be non-negative");
    if (model == SimModel::poisson) {
      need(min_baseline() > 0.0, "poisson intensity w_t.x must be positive on the covariate support");
    } else {
      need(alpha >= 0.0, "alpha must be non-negative");
      need(beta > 0.0, "beta must be positive");
      need(alpha < beta, "hawkes requires alpha < beta");
    }
  }
};

/// Ogata thinning on (0, horizon].
///
/// `bound(t)` must dominate `intensity(s)` for every s > t up to the next
/// accepted event; it is re-queried after every candidate. `on_accept(t)` is
/// called for each accepted time and may update state read by the callables.
template <class Intensity, class Bound, class Rng, class OnAccept>
std::vector<double> thinning_simulate(Intensity&& intensity, Bound&& bound, double horizon, Rng& rng,
                                      OnAccept&& on_accept) {
  if (!(horizon > 0.0)) throw std::invalid_argument("thinning horizon must be positive");
  std::vector<double> times;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double t = 0.0;
  while (true) {
    const double rate = bound(t);
    if (!(rate > 0.0)) {
      if (intensity(t) > 0.0) throw std::invalid_argument("invalid bound");
      break;
    }
    std::exponential_distribution<double> gap(rate);
    t += gap(rng);
    if (t > horizon) break;
    const double lambda = intensity(t);
    if (lambda > rate * (1.0 + 1e-12)) {
      throw std::logic_error("thinning bound violated: intensity " + std::to_string(lambda) + " > bound " +
                             std::to_string(rate));
    }
    if (unif(rng) * rate < lambda) {
      times.push_back(t);
      on_accept(t);
    }
  }
  return times;
}

template <class Intensity, class Bound, class Rng>
std::vector<double> thinning_simulate(Intensity&& intensity, Bound&& bound, double horizon, Rng& rng) {
  return thinning_simulate(std::forward<Intensity>(intensity), std::forward<Bound>(bound), horizon, rng,
                           [](double) {});
}

struct TypeDraw {
  std::size_t type = 0;
  double logit = 0.0;
};

/// Covariate-plus-history logit and its thresholded type.
inline TypeDraw assign_event_type(std::span<const double> covariate, std::span<const double> intervals,
                                  const SimConfig& cfg) {
  if (covariate.size() != cfg.type_weights.size()) throw ShapeError("assign_event_type: covariate width");
  double v = 0.0;
  for (std::size_t f = 0; f < covariate.size(); ++f) v += cfg.type_weights[f] * covariate[f];
  if (!intervals.empty()) {
    double h = 0.0;
    for (double tau : intervals) h += cfg.history_weight * tau;
    v += h / static_cast<double>(intervals.size());
  }
  return {v > cfg.threshold ? std::size_t{1} : std::size_t{0}, v};
}

template <class Rng>
std::vector<double> draw_covariate(const SimConfig& cfg, Rng& rng) {
  std::vector<double> x(cfg.num_features);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (std::size_t f = 0; f < cfg.num_features; ++f) {
    const double u = unif(rng);
    x[f] = cfg.covariate_low[f] + u * (cfg.covariate_high[f] - cfg.covariate_low[f]);
  }
  return x;
}

/// One realization on (0, horizon]. Returns a sequence with zero events
/// when nothing was accepted; callers decide whether to resample.
template <class Rng>
EventSequence simulate_sequence(const SimConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t nf = cfg.num_features;
  std::vector<double> x = draw_covariate(cfg, rng);
  double baseline = 0.0;
  auto refresh_baseline = [&] {
    baseline = 0.0;
    for (std::size_t f = 0; f < nf; ++f) baseline += cfg.time_weights[f] * x[f];
  };
  refresh_baseline();

  const bool hawkes = cfg.model == SimModel::hawkes;
  const double alpha = hawkes ? cfg.alpha : 0.0;
  double excitation = 0.0;  // sum of kernels evaluated at last_event
  double last_event = 0.0;
  auto excitation_at = [&](double t) { return excitation * std::exp(-cfg.beta * (t - last_event)); };

  // Covariate term bounded by its maximum over the sampler support; the
  // exponential kernel is non-increasing between events.
  const double cov_bound = cfg.max_baseline();

  EventSequence seq;
  std::vector<double> flat;
  std::vector<double> intervals;
  double prev_time = 0.0;

  auto intensity = [&](double t) { return baseline + (alpha > 0.0 ? excitation_at(t) : 0.0); };
  auto bound = [&](double t) { return cov_bound + (alpha > 0.0 ? excitation_at(t) : 0.0); };
  auto on_accept = [&](double t) {
    const TypeDraw draw = assign_event_type(x, intervals, cfg);
    seq.types.push_back(draw.type);
    intervals.push_back(t - prev_time);
    prev_time = t;
    if (alpha > 0.0) {
      excitation = excitation_at(t) + alpha;
      last_event = t;
    }
    x = draw_covariate(cfg, rng);
    refresh_baseline();
    flat.insert(flat.end(), x.begin(), x.end());
  };

  seq.times = thinning_simulate(intensity, bound, cfg.horizon, rng, on_accept);
  seq.covariates = Tensor(seq.times.size(), nf, std::move(flat));
  return seq;
}

/// Independent stream for sequence `index`, attempt `attempt`.
inline std::mt19937_64 sequence_stream(std::uint64_t seed, std::uint64_t index, std::uint64_t attempt = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(attempt)};
  return std::mt19937_64(seq);
}

/// |w_c| normalized to the simplex (uniform when w_c = 0).
inline std::vector<double> ground_truth_importance(const SimConfig& cfg) {
  std::vector<double> g(cfg.type_weights.size());
  double total = 0.0;
  for (std::size_t f = 0; f < g.size(); ++f) total += g[f] = std::abs(cfg.type_weights[f]);
  for (auto& v : g) v = total > 0.0 ? v / total : 1.0 / static_cast<double>(g.size());
  return g;
}

/// N sequences with an 8:1:1 split. Empty realizations are resampled once
/// on a fresh stream and dropped (with a warning) if still empty.
inline Dataset generate_dataset(const SimConfig& cfg, std::size_t n, std::uint64_t seed,
                                std::size_t workers = 1) {
  cfg.validate();
  if (n < 3) throw std::invalid_argument("generate_dataset needs at least 3 sequences");
  std::vector<EventSequence> raw(n);
  parallel_for(n, workers, [&](std::size_t i) {
    for (std::uint64_t attempt = 0; attempt < 2; ++attempt) {
      auto rng = sequence_stream(seed, i, attempt);
      raw[i] = simulate_sequence(cfg, rng);
      if (raw[i].size() > 0) break;
    }
  });
  Dataset d;
  d.num_types = 2;
  d.num_features = cfg.num_features;
  d.ground_truth_importance = ground_truth_importance(cfg);
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (raw[i].size() == 0) {
      ++dropped;
      continue;
    }
    raw[i].meta = sim_model_name(cfg.model) + std::string("#") + std::to_string(i);
    d.sequences.push_back(std::move(raw[i]));
  }
  if (dropped > 0) std::cerr << "warning: dropped " << dropped << " empty sequence(s) after resampling\n";
  if (d.sequences.size() < 3) throw DataError("simulation produced fewer than 3 non-empty sequences");
  d.splits.assign(d.sequences.size(), Split::train);
  return split_dataset(std::move(d), {0.8, 0.1, 0.1}, seed ^ 0x5eedULL);
}

}  // namespace covtpp
