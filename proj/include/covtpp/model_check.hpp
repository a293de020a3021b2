#pragma once

// Finite-difference check of the full model on a random small instance.

#include <cstdint>
#include <random>
#include <vector>

#include "covtpp/config.hpp"
#include "covtpp/gradcheck.hpp"
#include "covtpp/model.hpp"

namespace covtpp {

struct ModelCheckResult {
  GradCheckResult check;
  std::size_t attempts = 0;   // instances drawn before one cleared the kink margin
  double kink_margin = 0.0;   // smallest |pre-activation| at any ReLU
};

/// Random sequences of exactly `length` events with standard normal
/// covariates and strictly increasing times.
inline std::vector<EventSequence> random_sequences(const HyperParams& hp, std::size_t count, std::size_t length,
                                                   std::mt19937_64& rng) {
  std::exponential_distribution<double> gap(1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> type(0, hp.num_types - 1);
  std::vector<EventSequence> out(count);
  for (auto& s : out) {
    double t = 0.0;
    s.covariates = Tensor(length, hp.num_features);
    for (std::size_t j = 0; j < length; ++j) {
      t += 0.05 + gap(rng);
      s.times.push_back(t);
      s.types.push_back(type(rng));
      for (std::size_t f = 0; f < hp.num_features; ++f) s.covariates(j, f) = normal(rng);
    }
  }
  return out;
}

/// Draws a random model and batch (sequences of differing lengths so padding
/// is exercised), resampling until no ReLU input lies within `kink_margin`
/// of zero, then compares the total-loss gradient against central differences.
inline ModelCheckResult check_model_gradients(HyperParams hp, const GradCheckConfig& g, std::uint64_t seed,
                                              double kink_margin = 1e-3, std::size_t max_attempts = 100) {
  hp.dropout = 0.0;
  hp.validate();
  std::mt19937_64 rng(seed);
  ModelCheckResult result;
  for (std::size_t attempt = 1; attempt <= max_attempts; ++attempt) {
    TransFeatModel model(hp, rng());
    // Zero-initialized biases, loss weights and affine would leave some
    // terms at special points (and zero-covariate padding rows exactly on
    // a ReLU kink); move them all.
    std::normal_distribution<double> normal(0.0, 0.3);
    for (auto& [name, p] : model.params()) {
      const bool is_weight_matrix = name.ends_with(".weight") && p.value.rows() > 1;
      if (is_weight_matrix || name.find("embedding") != std::string::npos) continue;
      for (double& v : p.value.values()) v += normal(rng);
    }
    auto seqs = random_sequences(hp, g.num_sequences, g.seq_length, rng);
    // Shorten all but the first so the batch has padding.
    for (std::size_t k = 1; k < seqs.size(); ++k) {
      const std::size_t keep = std::max<std::size_t>(1, g.seq_length - k);
      seqs[k].times.resize(keep);
      seqs[k].types.resize(keep);
      Tensor c(keep, hp.num_features);
      for (std::size_t j = 0; j < keep; ++j)
        for (std::size_t f = 0; f < hp.num_features; ++f) c(j, f) = seqs[k].covariates(j, f);
      seqs[k].covariates = std::move(c);
    }
    std::vector<const EventSequence*> ptrs;
    for (const auto& s : seqs) ptrs.push_back(&s);
    const Batch batch = make_batch(ptrs, hp);

    double margin = 0.0;
    auto loss_fn = [&](ParamStore& store) {
      return forward_backward(store, [&](Tape& tape) {
        Var total = model.forward(tape, batch).total;
        margin = tape.min_kink_margin();
        return total;
      });
    };
    loss_fn(model.params());
    result.attempts = attempt;
    result.kink_margin = margin;
    if (margin < kink_margin) continue;
    result.check = finite_difference_check(loss_fn, model.params(), g.eps, g.samples_per_tensor, rng());
    return result;
  }
  throw NumericalError("gradient check: every random instance landed near a ReLU kink");
}

}  // namespace covtpp
