#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <limits>
#include <numbers>

#include "support.hpp"

namespace covtpp {
namespace {

using testing::random_tensor;

const MixtureParams kUnit{{1.0}, {0.0}, {1.0}, 1.0, 0.0};

MixtureParams random_mixture(std::mt19937_64& rng, std::size_t c = 3) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  MixtureParams mp;
  double total = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    mp.weights.push_back(0.05 + unif(rng));
    total += mp.weights.back();
    mp.means.push_back(normal(rng));
    mp.scales.push_back(0.2 + unif(rng));
  }
  for (double& w : mp.weights) w /= total;
  mp.affine_scale = 0.3 + 0.9 * unif(rng);
  mp.affine_shift = normal(rng);
  return mp;
}

TEST(LogNormalMixture, UnitCase) {
  EXPECT_NEAR(lognormal_mixture_nll(1.0, kUnit), 0.918939, 1e-6);
  EXPECT_NEAR(lognormal_mixture_density(1.0, kUnit), 1.0 / std::sqrt(2.0 * std::numbers::pi), 1e-12);
  EXPECT_NEAR(expected_time(kUnit), std::exp(0.5), 1e-12);
}

TEST(LogNormalMixture, RejectsNonPositiveTau) {
  EXPECT_THROW(lognormal_mixture_nll(0.0, kUnit), std::invalid_argument);
  EXPECT_THROW(lognormal_mixture_nll(-1.0, kUnit), std::invalid_argument);
}

TEST(LogNormalMixture, IntegratesToOne) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 10; ++i) {
    const MixtureParams mp = random_mixture(rng);
    auto f = [&](double u) {
      const double tau = std::exp(u);
      if (!(tau > 0.0) || !std::isfinite(tau)) return 0.0;
      return lognormal_mixture_density(tau, mp) * tau;
    };
    const double mass = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
        f, -std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(), 15, 1e-12);
    EXPECT_NEAR(mass, 1.0, 1e-8);
  }
}

TEST(LogNormalMixture, ScalingIdentity) {
  // tau -> c tau with b -> b + log c shifts the NLL by log c.
  std::mt19937_64 rng(6);
  for (int i = 0; i < 20; ++i) {
    MixtureParams mp = random_mixture(rng);
    const double tau = std::exp(std::normal_distribution<double>(0, 1)(rng));
    const double c = 0.1 + 10.0 * std::uniform_real_distribution<double>(0, 1)(rng);
    const double base = lognormal_mixture_nll(tau, mp);
    mp.affine_shift += std::log(c);
    EXPECT_NEAR(lognormal_mixture_nll(c * tau, mp), base + std::log(c), 1e-10);
  }
}

TEST(LogNormalMixture, ComponentsCombineLinearly) {
  MixtureParams a{{1.0}, {0.3}, {0.7}, 0.8, 0.2};
  MixtureParams b{{1.0}, {-1.0}, {0.4}, 0.8, 0.2};
  MixtureParams ab{{0.25, 0.75}, {0.3, -1.0}, {0.7, 0.4}, 0.8, 0.2};
  for (double tau : {0.05, 0.5, 1.0, 3.0}) {
    EXPECT_NEAR(lognormal_mixture_density(tau, ab),
                0.25 * lognormal_mixture_density(tau, a) + 0.75 * lognormal_mixture_density(tau, b), 1e-14);
  }
  EXPECT_NEAR(expected_time(ab), 0.25 * expected_time(a) + 0.75 * expected_time(b), 1e-14);
}

TEST(ExpectedTime, MonteCarlo) {
  std::mt19937_64 rng(7);
  MixtureParams mp{{0.3, 0.7}, {0.5, -0.4}, {0.6, 0.9}, 0.8, 0.1};
  std::discrete_distribution<std::size_t> pick(mp.weights.begin(), mp.weights.end());
  std::normal_distribution<double> normal(0.0, 1.0);
  double acc = 0.0;
  const int n = 400000;
  for (int s = 0; s < n; ++s) {
    const std::size_t k = pick(rng);
    acc += std::exp(mp.affine_scale * (mp.means[k] + mp.scales[k] * normal(rng)) + mp.affine_shift);
  }
  EXPECT_NEAR(acc / n / expected_time(mp), 1.0, 0.01);
}

TEST(ExpectedTime, ShiftScalesMean) {
  std::mt19937_64 rng(8);
  MixtureParams mp = random_mixture(rng);
  const double base = expected_time(mp);
  mp.affine_shift += std::log(3.0);
  EXPECT_NEAR(expected_time(mp), 3.0 * base, 1e-12 * base);
}

HyperParams decoder_hp() { return testing::tiny_hyperparams(); }

ParamStore decoder_store(const HyperParams& hp, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore p;
  add_decoder_params(p, hp, rng);
  return p;
}

TEST(MixtureParamsHead, ZeroWeightsGiveBiasValues) {
  const HyperParams hp = decoder_hp();
  ParamStore p = decoder_store(hp, 1);
  p.at("dec.mix_weight.weight").value.fill(0.0);
  p.at("dec.mix_mean.weight").value.fill(0.0);
  p.at("dec.mix_scale.weight").value.fill(0.0);
  p.at("dec.mix_mean.bias").value = Tensor(1, 2, {0.5, -0.5});
  p.at("dec.mix_scale.bias").value = Tensor(1, 2, {0.0, std::log(2.0)});
  p.at("dec.affine_log_scale").value = Tensor::scalar(std::log(0.5));
  p.at("dec.affine_shift").value = Tensor::scalar(1.5);
  std::mt19937_64 rng(1);
  const Tensor h = random_tensor(1, hp.embed_dim, rng);
  const MixtureParams mp = mixture_params(h.row_span(0), p);
  EXPECT_EQ(mp.weights, (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(mp.means, (std::vector<double>{0.5, -0.5}));
  EXPECT_DOUBLE_EQ(mp.scales[0], 1.0);
  EXPECT_DOUBLE_EQ(mp.scales[1], 2.0);
  EXPECT_DOUBLE_EQ(mp.affine_scale, 0.5);
  EXPECT_EQ(mp.affine_shift, 1.5);
}

TEST(MixtureParamsHead, NonFiniteHiddenState) {
  const HyperParams hp = decoder_hp();
  ParamStore p = decoder_store(hp, 2);
  std::vector<double> h(hp.embed_dim, 0.0);
  h[3] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(mixture_params(h, p), NumericalError);
}

TEST(TypeHead, ZeroWeightsGiveUniform) {
  const HyperParams hp = decoder_hp();
  ParamStore p = decoder_store(hp, 3);
  p.at("dec.type.weight").value.fill(0.0);
  std::mt19937_64 rng(3);
  const Tensor h1 = random_tensor(1, hp.embed_dim, rng);
  const Tensor h2 = random_tensor(1, hp.embed_dim, rng);
  const auto probs = type_head(h1.row_span(0), h2.row_span(0), p);
  EXPECT_EQ(probs, (std::vector<double>{0.5, 0.5}));
  Tape t(p);
  Var ce = softmax_cross_entropy(t.constant(Tensor(1, 2)), {1}, {1});
  EXPECT_NEAR(ce.value().item(), std::log(2.0), 1e-15);
}

TEST(TypeHead, WidthMismatch) {
  const HyperParams hp = decoder_hp();
  ParamStore p = decoder_store(hp, 4);
  EXPECT_THROW(type_head(std::vector<double>(hp.embed_dim), std::vector<double>(hp.embed_dim - 1), p), ShapeError);
}

TEST(TotalLoss, Examples) {
  EXPECT_DOUBLE_EQ(total_loss(2.0, 3.0, 0.0, 0.0), 5.0);
  EXPECT_NEAR(total_loss(2.0, 3.0, std::log(2.0), 0.0), 1.0 + std::log(2.0) + 3.0, 1e-15);
  EXPECT_NEAR(total_loss(2.0, 3.0, 1.0, -1.0), 2.0 / std::exp(1.0) + 1.0 + 3.0 * std::exp(1.0) - 1.0, 1e-14);
}

TEST(TotalLoss, RhoGradientAndStationaryPoint) {
  ParamStore p;
  p.add("rho1", Tensor::scalar(0.3));
  p.add("rho2", Tensor::scalar(-0.2));
  const double l1 = 1.7, l2 = 0.6;
  auto run = [&] {
    return forward_backward(p, [&](Tape& t) {
      return total_loss(t.constant(Tensor::scalar(l1)), t.constant(Tensor::scalar(l2)), t.param("rho1"), t.param("rho2"));
    });
  };
  const double value = run();
  EXPECT_NEAR(value, total_loss(l1, l2, 0.3, -0.2), 1e-15);
  EXPECT_NEAR(p.at("rho1").grad.item(), 1.0 - std::exp(-0.3) * l1, 1e-14);
  EXPECT_NEAR(p.at("rho2").grad.item(), 1.0 - std::exp(0.2) * l2, 1e-14);
  p.at("rho1").value = Tensor::scalar(std::log(l1));
  p.at("rho2").value = Tensor::scalar(std::log(l2));
  run();
  EXPECT_NEAR(p.at("rho1").grad.item(), 0.0, 1e-15);
  EXPECT_NEAR(p.at("rho2").grad.item(), 0.0, 1e-15);
}

struct NllInputs {
  Tensor logits, means, log_scales;
  std::vector<double> log_tau;
  std::vector<unsigned char> mask;
};

NllInputs random_inputs(std::size_t rows, std::size_t comps, std::mt19937_64& rng) {
  NllInputs in{random_tensor(rows, comps, rng), random_tensor(rows, comps, rng, 0.5), random_tensor(rows, comps, rng, 0.3), {}, {}};
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t r = 0; r < rows; ++r) {
    in.log_tau.push_back(n(rng));
    in.mask.push_back(r % 4 == 3 ? 0 : 1);
  }
  return in;
}

TEST(MixtureTimeNll, MatchesScalarFormula) {
  std::mt19937_64 rng(9);
  const NllInputs in = random_inputs(8, 3, rng);
  ParamStore p;
  Tape t(p);
  const double log_a = -0.3, b = 0.4;
  Var out = mixture_time_nll(t.constant(in.logits), t.constant(in.means), t.constant(in.log_scales),
                             t.constant(Tensor::scalar(log_a)), t.constant(Tensor::scalar(b)), in.log_tau, in.mask);
  for (std::size_t r = 0; r < 8; ++r) {
    if (!in.mask[r]) {
      EXPECT_EQ(out.value()[r], 0.0);
      continue;
    }
    const MixtureParams mp = mixture_from_logits(in.logits.row_span(r), in.means.row_span(r), in.log_scales.row_span(r), log_a, b);
    EXPECT_NEAR(out.value()[r], lognormal_mixture_nll(std::exp(in.log_tau[r]), mp), 1e-12);
  }
}

TEST(MixtureTimeNll, GradientCheck) {
  std::mt19937_64 rng(10);
  const NllInputs in = random_inputs(8, 4, rng);
  ParamStore p;
  p.add("logits", in.logits);
  p.add("means", in.means);
  p.add("log_scales", in.log_scales);
  p.add("log_a", Tensor::scalar(-0.2));
  p.add("b", Tensor::scalar(0.3));
  const Tensor w = random_tensor(8, 1, rng);
  auto loss = [&](ParamStore& st) {
    return forward_backward(st, [&](Tape& t) {
      Var nll = mixture_time_nll(t.param("logits"), t.param("means"), t.param("log_scales"), t.param("log_a"),
                                 t.param("b"), in.log_tau, in.mask);
      return sum(mul(nll, t.constant(w)));
    });
  };
  const auto r = finite_difference_check(loss, p, 1e-5, 64, 3);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param << " " << r.analytic << " vs " << r.numeric;
  // Masked rows receive no gradient.
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(p.at("logits").grad(3, c), 0.0);
    EXPECT_EQ(p.at("means").grad(7, c), 0.0);
  }
}

TEST(MixtureTimeNll, ShapeChecks) {
  ParamStore p;
  Tape t(p);
  Var a = t.constant(Tensor(2, 3));
  Var bad = t.constant(Tensor(2, 2));
  Var s = t.constant(Tensor::scalar(0.0));
  EXPECT_THROW(mixture_time_nll(a, bad, a, s, s, {0, 0}, {1, 1}), ShapeError);
  EXPECT_THROW(mixture_time_nll(a, a, a, s, s, {0}, {1, 1}), ShapeError);
  EXPECT_THROW(mixture_time_nll(a, a, a, a, s, {0, 0}, {1, 1}), ShapeError);
}

}  // namespace
}  // namespace covtpp
