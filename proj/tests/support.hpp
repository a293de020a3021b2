#pragma once

// Shared helpers for the test suites.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "covtpp/covtpp.hpp"

namespace covtpp::testing {

/// Two-sample Kolmogorov-Smirnov statistic sup |F1 - F2|.
inline double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  return d;
}

/// Asymptotic two-sample critical value at level alpha. Conservative for
/// discrete samples such as event counts.
inline double ks_critical(std::size_t n, std::size_t m, double alpha) {
  const double c = std::sqrt(-0.5 * std::log(alpha / 2.0));
  return c * std::sqrt(static_cast<double>(n + m) / (static_cast<double>(n) * static_cast<double>(m)));
}

inline HyperParams tiny_hyperparams() { return tiny_preset().model; }

/// Small standardized dataset with covariate-driven types, split 8:1:1.
inline Dataset tiny_dataset(std::size_t n = 40, std::uint64_t seed = 3) {
  const RunConfig c = tiny_preset();
  return standardize_covariates(generate_dataset(c.sim, n, seed));
}

inline EventSequence make_sequence(std::vector<double> times, std::vector<std::size_t> types,
                                   std::vector<std::vector<double>> cov) {
  EventSequence s;
  s.times = std::move(times);
  s.types = std::move(types);
  const std::size_t f = cov.empty() ? 0 : cov.front().size();
  s.covariates = Tensor(cov.size(), f);
  for (std::size_t i = 0; i < cov.size(); ++i)
    for (std::size_t j = 0; j < f; ++j) s.covariates(i, j) = cov[i][j];
  return s;
}

inline Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t(r, c);
  for (double& v : t.values()) v = n(rng);
  return t;
}

}  // namespace covtpp::testing
