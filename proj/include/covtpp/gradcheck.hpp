#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "covtpp/param_store.hpp"

namespace covtpp {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares analytic gradients against central differences.
///
/// `loss_fn(store)` must evaluate the loss and leave d(loss)/d(param) in the
/// store's grad slots (e.g. via forward_backward). Up to `samples_per_tensor`
/// coordinates are checked per parameter (all of them when the tensor is
/// smaller). Relative error is |ga - gn| / (|ga| + |gn| + 1e-8).
template <class LossFn>
GradCheckResult finite_difference_check(LossFn&& loss_fn, ParamStore& store, double eps,
                                        std::size_t samples_per_tensor, std::uint64_t seed = 0) {
  if (eps < 1e-6 || eps > 1e-3) throw std::invalid_argument("finite difference step must lie in [1e-6, 1e-3]");
  loss_fn(store);
  std::vector<std::pair<std::string, Tensor>> analytic;
  for (auto& [name, p] : store) analytic.emplace_back(name, p.grad);

  std::mt19937_64 rng(seed);
  GradCheckResult result;
  for (auto& [name, grad] : analytic) {
    Tensor& value = store.at(name).value;
    std::vector<std::size_t> coords(value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > samples_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(samples_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double saved = value[i];
      value[i] = saved + eps;
      const double up = loss_fn(store);
      value[i] = saved - eps;
      const double down = loss_fn(store);
      value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(grad[i] - numeric) / (std::abs(grad[i]) + std::abs(numeric) + 1e-8);
      ++result.checked;
      if (err > result.max_rel_error || result.worst_param.empty()) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        if (err >= result.max_rel_error) {
          result.worst_param = name;
          result.worst_index = i;
          result.analytic = grad[i];
          result.numeric = numeric;
        }
      }
    }
  }
  // Leave the store's gradients consistent with the unperturbed point.
  loss_fn(store);
  return result;
}

}  // namespace covtpp
