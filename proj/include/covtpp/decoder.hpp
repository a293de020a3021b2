#pragma once

// Decoder: log-normal mixture over the next inter-event time, categorical
// head over the next type, and the uncertainty-weighted total loss.
//
// Inter-event time model:  z1 ~ GaussianMixture(w, mu, s),  tau = exp(a z1 + b)
//   p(tau) = f((log tau - b) / a) / (tau a)
//   E[tau] = sum_k w_k exp(a mu_k + b + (a s_k)^2 / 2)

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "covtpp/autodiff.hpp"
#include "covtpp/encoder.hpp"
#include "covtpp/errors.hpp"

namespace covtpp {

struct MixtureParams {
  std::vector<double> weights;  // w, on the simplex
  std::vector<double> means;    // mu
  std::vector<double> scales;   // s > 0
  double affine_scale = 1.0;    // a > 0
  double affine_shift = 0.0;    // b

  std::size_t components() const { return weights.size(); }
};

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

/// -log p(tau) with the 1/(tau a) change-of-variables factor, via log-sum-exp.
inline double lognormal_mixture_nll(double tau, const MixtureParams& mp) {
  if (!(tau > 0.0)) throw std::invalid_argument("lognormal_mixture_nll: tau must be positive");
  const double a = mp.affine_scale;
  const double log_tau = std::log(tau);
  const double z = (log_tau - mp.affine_shift) / a;
  double mx = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(mp.components());
  for (std::size_t c = 0; c < mp.components(); ++c) {
    const double d = (z - mp.means[c]) / mp.scales[c];
    terms[c] = std::log(mp.weights[c]) - kHalfLog2Pi - std::log(mp.scales[c]) - 0.5 * d * d;
    mx = std::max(mx, terms[c]);
  }
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - mx);
  return -(mx + std::log(acc)) + log_tau + std::log(a);
}

inline double lognormal_mixture_density(double tau, const MixtureParams& mp) {
  return std::exp(-lognormal_mixture_nll(tau, mp));
}

/// Closed-form mean of the mixture.
inline double expected_time(const MixtureParams& mp) {
  const double a = mp.affine_scale;
  double mean = 0.0;
  for (std::size_t k = 0; k < mp.components(); ++k) {
    const double as = a * mp.scales[k];
    mean += mp.weights[k] * std::exp(a * mp.means[k] + mp.affine_shift + 0.5 * as * as);
  }
  return mean;
}

template <class Rng>
void add_decoder_params(ParamStore& store, const HyperParams& hp, Rng& rng) {
  const std::size_t m = hp.embed_dim, c = hp.mixture_components;
  store.add("dec.mix_weight.weight", init_uniform(m, c, m, rng));
  store.add("dec.mix_weight.bias", Tensor(1, c));
  store.add("dec.mix_mean.weight", init_uniform(m, c, m, rng));
  store.add("dec.mix_mean.bias", Tensor(1, c));
  store.add("dec.mix_scale.weight", init_uniform(m, c, m, rng));
  store.add("dec.mix_scale.bias", Tensor(1, c));
  // a = exp(affine_log_scale) keeps the affine scale positive.
  store.add("dec.affine_log_scale", Tensor::scalar(0.0));
  store.add("dec.affine_shift", Tensor::scalar(0.0));
  store.add("dec.type.weight", init_uniform(2 * m, hp.num_types, 2 * m, rng));
  store.add("dec.type.bias", Tensor(1, hp.num_types));
  store.add("loss.rho_time", Tensor::scalar(0.0));
  store.add("loss.rho_type", Tensor::scalar(0.0));
}

namespace detail {
inline std::vector<double> dense_row(std::span<const double> h, const Tensor& w, const Tensor& b) {
  if (h.size() != w.rows() || b.cols() != w.cols()) throw ShapeError("dense_row: shape mismatch");
  std::vector<double> out(b.values());
  for (std::size_t i = 0; i < h.size(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) out[j] += h[i] * w(i, j);
  return out;
}
inline void softmax_inplace(std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double z = 0.0;
  for (auto& x : v) z += x = std::exp(x - mx);
  for (auto& x : v) x /= z;
}
}  // namespace detail

/// Mixture parameters from logits rows (as produced by the batched forward).
inline MixtureParams mixture_from_logits(std::span<const double> weight_logits, std::span<const double> means,
                                         std::span<const double> log_scales, double log_a, double b) {
  MixtureParams mp;
  mp.weights.assign(weight_logits.begin(), weight_logits.end());
  detail::softmax_inplace(mp.weights);
  mp.means.assign(means.begin(), means.end());
  mp.scales.resize(log_scales.size());
  std::transform(log_scales.begin(), log_scales.end(), mp.scales.begin(), [](double v) { return std::exp(v); });
  mp.affine_scale = std::exp(log_a);
  mp.affine_shift = b;
  return mp;
}

/// w = softmax(V_w h + b_w), mu = V_mu h + b_mu, s = exp(V_s h + b_s).
inline MixtureParams mixture_params(std::span<const double> h, const ParamStore& params) {
  for (double v : h)
    if (!std::isfinite(v)) throw NumericalError("mixture_params: non-finite hidden state");
  const auto logits = detail::dense_row(h, params.at("dec.mix_weight.weight").value, params.at("dec.mix_weight.bias").value);
  const auto means = detail::dense_row(h, params.at("dec.mix_mean.weight").value, params.at("dec.mix_mean.bias").value);
  const auto log_s = detail::dense_row(h, params.at("dec.mix_scale.weight").value, params.at("dec.mix_scale.bias").value);
  return mixture_from_logits(logits, means, log_s, params.at("dec.affine_log_scale").value.item(),
                             params.at("dec.affine_shift").value.item());
}

/// softmax(FC([h1, h2])) over K types.
inline std::vector<double> type_head(std::span<const double> h1, std::span<const double> h2, const ParamStore& params) {
  if (h1.size() != h2.size()) throw ShapeError("type_head: h1 and h2 widths differ");
  std::vector<double> joined(h1.begin(), h1.end());
  joined.insert(joined.end(), h2.begin(), h2.end());
  auto p = detail::dense_row(joined, params.at("dec.type.weight").value, params.at("dec.type.bias").value);
  detail::softmax_inplace(p);
  return p;
}

/// Per-row time NLL as a differentiable op. Inputs are rows x C logits,
/// means and log-scales, the 1x1 log-affine-scale and shift, and constant
/// log tau per row. Rows with mask 0 yield 0.
inline Var mixture_time_nll(Var weight_logits, Var means, Var log_scales, Var log_a, Var b,
                            const std::vector<double>& log_tau, const std::vector<unsigned char>& mask) {
  const Tensor& wl = weight_logits.value();
  const Tensor& mu = means.value();
  const Tensor& ls = log_scales.value();
  if (!wl.same_shape(mu) || !wl.same_shape(ls)) throw ShapeError("mixture_time_nll: parameter shapes differ");
  if (log_a.value().size() != 1 || b.value().size() != 1) throw ShapeError("mixture_time_nll: affine must be scalar");
  if (log_tau.size() != wl.rows() || mask.size() != wl.rows()) throw ShapeError("mixture_time_nll: target count");
  const std::size_t rows = wl.rows(), comps = wl.cols();
  const double a = std::exp(log_a.value().item());
  const double shift = b.value().item();

  Tensor out(rows, 1);
  // Cached per row/component: responsibility gamma, standardized residual d = (z - mu)/s,
  // mixture weight w. Plus z per row.
  Tensor gamma(rows, comps), resid(rows, comps), weights(rows, comps);
  std::vector<double> z(rows, 0.0);
  std::vector<double> term(comps);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    z[r] = (log_tau[r] - shift) / a;
    double wmax = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < comps; ++c) wmax = std::max(wmax, wl(r, c));
    double wz = 0.0;
    for (std::size_t c = 0; c < comps; ++c) wz += std::exp(wl(r, c) - wmax);
    const double wlse = wmax + std::log(wz);
    double tmax = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < comps; ++c) {
      const double s = std::exp(ls(r, c));
      const double d = (z[r] - mu(r, c)) / s;
      resid(r, c) = d;
      weights(r, c) = std::exp(wl(r, c) - wlse);
      term[c] = (wl(r, c) - wlse) - kHalfLog2Pi - ls(r, c) - 0.5 * d * d;
      tmax = std::max(tmax, term[c]);
    }
    double tz = 0.0;
    for (std::size_t c = 0; c < comps; ++c) tz += std::exp(term[c] - tmax);
    const double lse = tmax + std::log(tz);
    for (std::size_t c = 0; c < comps; ++c) gamma(r, c) = std::exp(term[c] - lse);
    out[r] = -lse + log_tau[r] + std::log(a);
  }

  Tape& tape = *weight_logits.tape;
  return tape.push(std::move(out), {weight_logits.id, means.id, log_scales.id, log_a.id, b.id},
                   [wi = weight_logits.id, mi = means.id, si = log_scales.id, ai = log_a.id, bi = b.id,
                    gamma = std::move(gamma), resid = std::move(resid), weights = std::move(weights),
                    z = std::move(z), mask, a](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& ls = t.value(si);
    const bool gw = t.wants_grad(wi), gm = t.wants_grad(mi), gs = t.wants_grad(si);
    double da = 0.0, db = 0.0;
    for (std::size_t r = 0; r < gamma.rows(); ++r) {
      if (!mask[r] || g[r] == 0.0) continue;
      double dz = 0.0;  // d(nll)/dz
      for (std::size_t c = 0; c < gamma.cols(); ++c) {
        const double gm_rc = gamma(r, c);
        const double s = std::exp(ls(r, c));
        const double d = resid(r, c);
        if (gw) t.grad(wi)(r, c) += g[r] * (weights(r, c) - gm_rc);
        if (gm) t.grad(mi)(r, c) += g[r] * (-gm_rc * d / s);
        if (gs) t.grad(si)(r, c) += g[r] * (gm_rc * (1.0 - d * d));
        dz += gm_rc * d / s;
      }
      // z = (log tau - b) / a with a = exp(log_a): dz/db = -1/a, dz/dlog_a = -z.
      db += g[r] * dz * (-1.0 / a);
      da += g[r] * (dz * (-z[r]) + 1.0);
    }
    if (t.wants_grad(ai)) t.grad(ai)[0] += da;
    if (t.wants_grad(bi)) t.grad(bi)[0] += db;
  }, "mixture_time_nll");
}

/// exp(-rho_1) L1 + rho_1 + exp(-rho_2) L2 + rho_2 on 1x1 vars.
inline Var total_loss(Var time_loss, Var type_loss, Var rho_time, Var rho_type) {
  Var weighted_time = add(mul(exp(scale(rho_time, -1.0)), time_loss), rho_time);
  Var weighted_type = add(mul(exp(scale(rho_type, -1.0)), type_loss), rho_type);
  return add(weighted_time, weighted_type);
}

inline double total_loss(double time_loss, double type_loss, double rho_time, double rho_type) {
  return std::exp(-rho_time) * time_loss + rho_time + std::exp(-rho_type) * type_loss + rho_type;
}

}  // namespace covtpp
