#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"

namespace covtpp {
namespace {

using testing::random_tensor;

HyperParams small_hp(bool residual = true) {
  HyperParams hp = testing::tiny_hyperparams();
  hp.residual_layer_norm = residual;
  return hp;
}

EventSequence random_sequence(const HyperParams& hp, std::size_t length, std::mt19937_64& rng) {
  return random_sequences(hp, 1, length, rng).front();
}

Tensor encode(const ParamStore& params, const HyperParams& hp, const Tensor& x_value) {
  ParamStore p = params;
  Tape t(p);
  Var x = t.constant(x_value);
  const std::vector<std::size_t> lengths{x_value.rows()};
  return self_attention(t, x, causal_block_mask(lengths, x_value.rows()), x_value.rows(), hp).hidden.value();
}

TEST(TemporalEncode, AtZero) { EXPECT_EQ(temporal_encode(0.0, 4), (std::vector<double>{1, 0, 1, 0})); }

TEST(TemporalEncode, AtPi) {
  const auto z = temporal_encode(std::numbers::pi, 2);
  EXPECT_NEAR(z[0], -1.0, 1e-8);
  EXPECT_NEAR(z[1], 3.14159e-4, 1e-8);
}

TEST(TemporalEncode, Bounded) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1e5);
  for (int i = 0; i < 200; ++i)
    for (double v : temporal_encode(u(rng), 16)) {
      EXPECT_LE(v, 1.0);
      EXPECT_GE(v, -1.0);
    }
}

TEST(TemporalEncode, RejectsTinyDimension) { EXPECT_THROW(temporal_encode(1.0, 1), std::invalid_argument); }

TEST(EmbedSequence, ZeroEmbeddingsGiveTemporalEncoding) {
  const HyperParams hp = small_hp();
  std::mt19937_64 rng(2);
  ParamStore p;
  add_encoder_params(p, hp, rng);
  p.at("enc.type_embedding").value.fill(0.0);
  p.at("enc.covariate_embedding").value.fill(0.0);
  const EventSequence s = random_sequence(hp, 4, rng);
  Tape t(p);
  EXPECT_EQ(embed_sequence(t, s, hp).value(), temporal_encoding_matrix(s.times, hp.embed_dim));
}

TEST(EmbedSequence, Additivity) {
  const HyperParams hp = small_hp();
  std::mt19937_64 rng(3);
  ParamStore p;
  add_encoder_params(p, hp, rng);
  const EventSequence s = testing::make_sequence({0.0}, {1}, {{0.5, -1.0, 2.0}});
  Tape t(p);
  const Tensor x = embed_sequence(t, s, hp).value();
  const Tensor& u = p.at("enc.type_embedding").value;
  const Tensor& w = p.at("enc.covariate_embedding").value;
  for (std::size_t j = 0; j < hp.embed_dim; ++j) {
    const double z = (j % 2 == 0) ? 1.0 : 0.0;
    const double wx = 0.5 * w(0, j) - 1.0 * w(1, j) + 2.0 * w(2, j);
    EXPECT_NEAR(x(0, j), z + u(1, j) + wx, 1e-14);
  }
}

TEST(EmbedSequence, CovariateLocality) {
  const HyperParams hp = small_hp();
  std::mt19937_64 rng(4);
  ParamStore p;
  add_encoder_params(p, hp, rng);
  EventSequence s = random_sequence(hp, 5, rng);
  Tape t1(p);
  const Tensor a = embed_sequence(t1, s, hp).value();
  s.covariates(2, 1) += 0.7;
  Tape t2(p);
  const Tensor b = embed_sequence(t2, s, hp).value();
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < hp.embed_dim; ++c) {
      if (r == 2) continue;
      EXPECT_EQ(a(r, c), b(r, c));
    }
  EXPECT_NE(a(2, 0), b(2, 0));
}

TEST(EmbedSequence, TypeOutOfRange) {
  const HyperParams hp = small_hp();
  std::mt19937_64 rng(5);
  ParamStore p;
  add_encoder_params(p, hp, rng);
  const EventSequence s = testing::make_sequence({1.0}, {2}, {{0, 0, 0}});
  Tape t(p);
  EXPECT_THROW(embed_sequence(t, s, hp), DataError);
}

TEST(SelfAttention, SingleEventWeightIsOne) {
  const HyperParams hp = small_hp();
  std::mt19937_64 rng(6);
  ParamStore p;
  add_encoder_params(p, hp, rng);
  Tape t(p);
  Var x = t.constant(random_tensor(1, hp.embed_dim, rng));
  const auto out = self_attention(t, x, causal_block_mask({1}, 1), 1, hp);
  for (const auto& w : out.weights) EXPECT_EQ(w.value()[0], 1.0);
}

TEST(SelfAttention, WeightRowsSumToOneAndAreCausal) {
  const HyperParams hp = small_hp();
  std::mt19937_64 rng(7);
  ParamStore p;
  add_encoder_params(p, hp, rng);
  Tape t(p);
  Var x = t.constant(random_tensor(6, hp.embed_dim, rng));
  const auto out = self_attention(t, x, causal_block_mask({6}, 6), 6, hp);
  ASSERT_EQ(out.weights.size(), hp.heads);
  for (const auto& w : out.weights)
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        s += w.value()(r, c);
        if (c > r) EXPECT_EQ(w.value()(r, c), 0.0);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

class Causality : public ::testing::TestWithParam<bool> {};

TEST_P(Causality, LaterEventsDoNotAffectEarlierRows) {
  const HyperParams hp = small_hp(GetParam());
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(10 + seed);
    ParamStore p;
    add_encoder_params(p, hp, rng);
    const Tensor x = random_tensor(6, hp.embed_dim, rng);
    const Tensor base = encode(p, hp, x);
    for (std::size_t j = 1; j < 6; ++j) {
      Tensor y = x;
      for (std::size_t c = 0; c < hp.embed_dim; ++c) y(j, c) += 0.5;
      const Tensor h = encode(p, hp, y);
      for (std::size_t i = 0; i < j; ++i)
        for (std::size_t c = 0; c < hp.embed_dim; ++c) EXPECT_EQ(h(i, c), base(i, c)) << i << "," << j;
      bool row_changed = false;
      for (std::size_t c = 0; c < hp.embed_dim; ++c) row_changed |= h(j, c) != base(j, c);
      EXPECT_TRUE(row_changed);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(BothModes, Causality, ::testing::Values(true, false));

TEST(SelfAttention, OrderAware) {
  const HyperParams hp = small_hp();
  std::mt19937_64 rng(20);
  ParamStore p;
  add_encoder_params(p, hp, rng);
  EventSequence s = random_sequence(hp, 4, rng);
  auto run = [&](const EventSequence& seq) {
    Tape t(p);
    Var x = embed_sequence(t, seq, hp);
    return self_attention(t, x, causal_block_mask({4}, 4), 4, hp).hidden.value();
  };
  const Tensor a = run(s);
  // Swap the marks (type and covariate) of events 1 and 2, keeping the times.
  EventSequence swapped = s;
  std::swap(swapped.types[1], swapped.types[2]);
  for (std::size_t f = 0; f < hp.num_features; ++f) std::swap(swapped.covariates(1, f), swapped.covariates(2, f));
  const Tensor b = run(swapped);
  double diff = 0.0;
  for (std::size_t c = 0; c < hp.embed_dim; ++c) diff += std::abs(a(3, c) - b(3, c));
  EXPECT_GT(diff, 1e-9);
}

TEST(SelfAttention, PaddingDoesNotChangeRealRows) {
  const HyperParams hp = small_hp();
  std::mt19937_64 rng(21);
  ParamStore p;
  add_encoder_params(p, hp, rng);
  const Tensor x = random_tensor(3, hp.embed_dim, rng);
  Tensor padded(5, hp.embed_dim);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < hp.embed_dim; ++c) padded(r, c) = x(r, c);
  ParamStore q = p;
  Tape t(q);
  const Tensor h = self_attention(t, t.constant(padded), causal_block_mask({3}, 5), 5, hp).hidden.value();
  const Tensor ref = encode(p, hp, x);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < hp.embed_dim; ++c) EXPECT_NEAR(h(r, c), ref(r, c), 1e-12);
}

class EncoderGradient : public ::testing::TestWithParam<bool> {};

TEST_P(EncoderGradient, EmbedAttentionFfn) {
  HyperParams hp = small_hp(GetParam());
  hp.layers = 2;
  std::mt19937_64 rng(30);
  ParamStore p;
  add_encoder_params(p, hp, rng);
  for (auto& [name, prm] : p)
    if (name.find("bias") != std::string::npos)
      for (double& v : prm.value.values()) v = 0.1 * std::normal_distribution<double>(0, 1)(rng);
  const EventSequence s = random_sequence(hp, 5, rng);
  const Tensor weights = random_tensor(5, hp.embed_dim, rng);
  double margin = 1.0;
  auto loss = [&](ParamStore& st) {
    return forward_backward(st, [&](Tape& t) {
      Var x = embed_sequence(t, s, hp);
      Var h = self_attention(t, x, causal_block_mask({5}, 5), 5, hp).hidden;
      margin = std::min(margin, t.min_kink_margin());
      return sum(mul(h, t.constant(weights)));
    });
  };
  const auto r = finite_difference_check(loss, p, 1e-4, 40, 1);
  ASSERT_GT(margin, 1e-4);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param << " " << r.analytic << " vs " << r.numeric;
}

INSTANTIATE_TEST_SUITE_P(BothModes, EncoderGradient, ::testing::Values(true, false));

TEST(HyperParams, Validation) {
  HyperParams hp;
  EXPECT_NO_THROW(hp.validate());
  hp.embed_dim = 7;
  EXPECT_THROW(hp.validate(), UsageError);
  hp = HyperParams{};
  hp.heads = 0;
  EXPECT_THROW(hp.validate(), UsageError);
}

TEST(HyperParams, Defaults) {
  const HyperParams hp;
  EXPECT_EQ(hp.embed_dim, 64u);
  EXPECT_EQ(hp.key_dim, 64u);
  EXPECT_EQ(hp.value_dim, 32u);
  EXPECT_EQ(hp.heads, 2u);
  EXPECT_EQ(hp.fisan_heads, 2u);
  EXPECT_EQ(hp.mixture_components, 16u);
}

}  // namespace
}  // namespace covtpp
