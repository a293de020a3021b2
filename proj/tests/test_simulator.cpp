#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

namespace covtpp {
namespace {

std::size_t count_events(double rate, double bound, double horizon, std::mt19937_64& rng) {
  return thinning_simulate([rate](double) { return rate; }, [bound](double) { return bound; }, horizon, rng).size();
}

TEST(AssignEventType, HistoryTermVanishesWithoutHistory) {
  SimConfig c;
  c.num_features = 2;
  c.type_weights = {1.0, 0.0};
  c.threshold = 0.5;
  const TypeDraw d = assign_event_type(std::vector<double>{0.8, 0.3}, {}, c);
  EXPECT_DOUBLE_EQ(d.logit, 0.8);
  EXPECT_EQ(d.type, 1u);
}

TEST(AssignEventType, EqualToThresholdIsTypeZero) {
  SimConfig c;
  c.num_features = 1;
  c.type_weights = {1.0};
  c.threshold = 0.5;
  EXPECT_EQ(assign_event_type(std::vector<double>{0.5}, {}, c).type, 0u);
}

TEST(AssignEventType, HistoryAverage) {
  SimConfig c;
  c.num_features = 2;
  c.type_weights = {0.0, 0.0};
  c.history_weight = 1.0;
  c.threshold = 1.5;
  const TypeDraw d = assign_event_type(std::vector<double>{0.3, 0.9}, std::vector<double>{1.0, 3.0}, c);
  EXPECT_DOUBLE_EQ(d.logit, 2.0);
  EXPECT_EQ(d.type, 1u);
}

TEST(Thinning, ZeroIntensityGivesNoEvents) {
  std::mt19937_64 rng(1);
  EXPECT_TRUE(thinning_simulate([](double) { return 0.0; }, [](double) { return 1.0; }, 10.0, rng).empty());
  EXPECT_TRUE(thinning_simulate([](double) { return 0.0; }, [](double) { return 0.0; }, 10.0, rng).empty());
}

TEST(Thinning, NonPositiveBoundWithPositiveIntensity) {
  std::mt19937_64 rng(1);
  try {
    thinning_simulate([](double) { return 1.0; }, [](double) { return 0.0; }, 10.0, rng);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "invalid bound");
  }
}

TEST(Thinning, BoundViolationDetected) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(thinning_simulate([](double) { return 3.0; }, [](double) { return 1.0; }, 10.0, rng), std::logic_error);
}

TEST(Thinning, TimesIncreasingWithinHorizon) {
  std::mt19937_64 rng(2);
  const auto t = thinning_simulate([](double s) { return 1.0 + std::sin(s); }, [](double) { return 2.0; }, 50.0, rng);
  ASSERT_FALSE(t.empty());
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_GT(t[i], 0.0);
    EXPECT_LE(t[i], 50.0);
    if (i > 0) {
      EXPECT_GT(t[i], t[i - 1]);
    }
  }
}

TEST(Thinning, ConstantIntensityMeanCount) {
  const int runs = 10000;
  double total = 0.0;
  for (int r = 0; r < runs; ++r) {
    auto rng = sequence_stream(11, r);
    total += static_cast<double>(count_events(2.0, 2.0, 5.0, rng));
  }
  EXPECT_NEAR(total / runs, 10.0, 3.0 * std::sqrt(10.0 / runs));
}

TEST(Thinning, BoundInvariance) {
  std::vector<double> tight, loose;
  for (int r = 0; r < 5000; ++r) {
    auto a = sequence_stream(12, r);
    auto b = sequence_stream(13, r);
    tight.push_back(static_cast<double>(count_events(2.0, 2.0, 5.0, a)));
    loose.push_back(static_cast<double>(count_events(2.0, 10.0, 5.0, b)));
  }
  EXPECT_LE(testing::ks_statistic(tight, loose), testing::ks_critical(5000, 5000, 0.01));
}

SimConfig homogeneous(SimModel model) {
  SimConfig c;
  c.model = model;
  c.num_features = 2;
  c.covariate_low = {3.0, 0.0};
  c.covariate_high = {3.0, 1.0};
  c.time_weights = {1.0, 0.0};
  c.type_weights = {0.0, 1.0};
  c.threshold = 0.5;
  c.horizon = 10.0;
  c.alpha = 0.0;
  return c;
}

TEST(SimulateSequence, HomogeneousPoissonMeanCount) {
  const SimConfig c = homogeneous(SimModel::poisson);
  double total = 0.0;
  const int runs = 4000;
  for (int r = 0; r < runs; ++r) {
    auto rng = sequence_stream(14, r);
    total += static_cast<double>(simulate_sequence(c, rng).size());
  }
  EXPECT_NEAR(total / runs, 30.0, 3.0 * std::sqrt(30.0 / runs));
}

TEST(SimulateSequence, StationaryHawkesMeanCount) {
  SimConfig c = homogeneous(SimModel::hawkes);
  c.covariate_low[0] = c.covariate_high[0] = 1.0;
  c.alpha = 0.5;
  c.beta = 1.0;
  c.horizon = 100.0;
  double total = 0.0;
  const int runs = 2000;
  for (int r = 0; r < runs; ++r) {
    auto rng = sequence_stream(15, r);
    total += static_cast<double>(simulate_sequence(c, rng).size());
  }
  EXPECT_NEAR(total / runs / 200.0, 1.0, 0.05);
}

TEST(SimulateSequence, AlphaZeroHawkesEqualsPoisson) {
  const SimConfig p = homogeneous(SimModel::poisson);
  const SimConfig h = homogeneous(SimModel::hawkes);
  std::vector<double> cp, ch;
  for (int r = 0; r < 5000; ++r) {
    auto a = sequence_stream(16, r);
    auto b = sequence_stream(16, r);
    const EventSequence sp = simulate_sequence(p, a);
    const EventSequence sh = simulate_sequence(h, b);
    EXPECT_EQ(sp, sh);
    cp.push_back(static_cast<double>(sp.size()));
    ch.push_back(static_cast<double>(sh.size()));
  }
  EXPECT_LE(testing::ks_statistic(cp, ch), testing::ks_critical(5000, 5000, 0.01));
}

TEST(SimulateSequence, CovariateAttachedAndTypeUsesPreviousCovariate) {
  // Type depends on x drawn at the previous event: with w_c on feature 1
  // and no history weight, type j+1 == (x_j[1] > 0.5).
  SimConfig c = homogeneous(SimModel::poisson);
  c.history_weight = 0.0;
  auto rng = sequence_stream(17, 0);
  const EventSequence s = simulate_sequence(c, rng);
  ASSERT_GT(s.size(), 5u);
  ASSERT_EQ(s.covariates.rows(), s.size());
  for (std::size_t j = 0; j + 1 < s.size(); ++j) {
    EXPECT_EQ(s.types[j + 1], s.covariates(j, 1) > 0.5 ? 1u : 0u) << j;
    EXPECT_EQ(s.covariates(j, 0), 3.0);
  }
}

TEST(SimulateSequence, ThresholdMonotone) {
  double prev = 1.0;
  for (double zeta : {2.0, 2.5, 3.0, 3.5, 4.0, 5.0}) {
    SimConfig c = SimConfig::hawkes_default();
    c.threshold = zeta;
    std::size_t ones = 0, total = 0;
    for (int r = 0; r < 200; ++r) {
      auto rng = sequence_stream(18, r);
      const EventSequence s = simulate_sequence(c, rng);
      for (auto y : s.types) ones += y;
      total += s.size();
    }
    const double frac = static_cast<double>(ones) / static_cast<double>(total);
    EXPECT_LE(frac, prev) << zeta;
    prev = frac;
  }
}

TEST(SimulateSequence, TimesWithinHorizon) {
  const SimConfig c = SimConfig::hawkes_default();
  for (int r = 0; r < 100; ++r) {
    auto rng = sequence_stream(19, r);
    const EventSequence s = simulate_sequence(c, rng);
    for (std::size_t i = 0; i < s.size(); ++i) {
      EXPECT_GT(s.times[i], 0.0);
      EXPECT_LE(s.times[i], c.horizon);
      if (i > 0) {
        EXPECT_GT(s.times[i], s.times[i - 1]);
      }
    }
  }
}

TEST(SimConfig, ValidationRules) {
  SimConfig h = SimConfig::hawkes_default();
  h.alpha = 1.0;
  h.beta = 1.0;
  EXPECT_THROW(h.validate(), DataError);
  SimConfig p = SimConfig::poisson_default();
  p.covariate_low.assign(10, 0.0);
  EXPECT_THROW(p.validate(), DataError);
  SimConfig bad = SimConfig::hawkes_default();
  bad.type_weights.pop_back();
  EXPECT_THROW(bad.validate(), DataError);
  EXPECT_NO_THROW(SimConfig::hawkes_default().validate());
  EXPECT_NO_THROW(SimConfig::poisson_default().validate());
}

TEST(GenerateDataset, DefaultSplitRatios) {
  const Dataset d = generate_dataset(SimConfig::hawkes_default(), 1280, 1);
  EXPECT_EQ(d.size(), 1280u);
  EXPECT_EQ(d.count(Split::train), 1024u);
  EXPECT_EQ(d.count(Split::val), 128u);
  EXPECT_EQ(d.count(Split::test), 128u);
  EXPECT_EQ(d.num_types, 2u);
  EXPECT_EQ(d.num_features, 10u);
}

TEST(GenerateDataset, GroundTruthNormalized) {
  SimConfig c = SimConfig::poisson_default();
  c.num_features = 4;
  c.covariate_low.assign(4, 0.5);
  c.covariate_high.assign(4, 1.5);
  c.time_weights.assign(4, 0.3);
  c.type_weights = {2, 0, 0, 0};
  EXPECT_EQ(ground_truth_importance(c), (std::vector<double>{1, 0, 0, 0}));
  const auto g = ground_truth_importance(SimConfig::hawkes_default());
  EXPECT_NEAR(std::accumulate(g.begin(), g.end(), 0.0), 1.0, 1e-15);
}

TEST(GenerateDataset, SameSeedSameBytes) {
  std::ostringstream a, b, c;
  write_dataset(a, generate_dataset(SimConfig::hawkes_default(), 50, 7));
  write_dataset(b, generate_dataset(SimConfig::hawkes_default(), 50, 7));
  write_dataset(c, generate_dataset(SimConfig::hawkes_default(), 50, 8));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_NE(a.str(), c.str());
}

TEST(GenerateDataset, ParallelMatchesSequential) {
  EXPECT_EQ(generate_dataset(SimConfig::hawkes_default(), 64, 3, 1),
            generate_dataset(SimConfig::hawkes_default(), 64, 3, 4));
}

TEST(GenerateDataset, EmptySequencesDropped) {
  SimConfig c = SimConfig::poisson_default();
  c.horizon = 0.01;  // almost every realization is empty
  try {
    const Dataset d = generate_dataset(c, 400, 1);
    for (const auto& s : d.sequences) EXPECT_GT(s.size(), 0u);
    EXPECT_LT(d.size(), 400u);
  } catch (const DataError&) {
    SUCCEED() << "fewer than three non-empty sequences";
  }
}

}  // namespace
}  // namespace covtpp
