#include <gtest/gtest.h>

#include <cmath>

#include "arclab/actdist.hpp"

using namespace arclab;

namespace {

SoftParams at(double a) {
  SoftParams p;
  p.temperature = a;
  return p;
}

// Direct evaluation of both KL sums over every state.
double oracle_distance(const SoftGoalPolicy& pol, StateId s1, StateId s2) {
  double total = 0.0;
  for (StateId s = 0; s < pol.num_states(); ++s) {
    const Vec p = pol.action_distribution(s, s1);
    const Vec q = pol.action_distribution(s, s2);
    for (std::size_t a = 0; a < p.size(); ++a)
      total += p[a] * std::log(p[a] / q[a]) + q[a] * std::log(q[a] / p[a]);
  }
  return total / static_cast<double>(pol.num_states());
}

}  // namespace

TEST(SymmetricKl, KnownValue) {
  EXPECT_NEAR(symmetric_kl(Vec{0.5, 0.5}, Vec{0.9, 0.1}), 0.8789, 1e-3);
  EXPECT_EQ(symmetric_kl(Vec{0.2, 0.8}, Vec{0.2, 0.8}), 0.0);
}

TEST(SymmetricKl, SymmetricForRandomPairs) {
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    Vec p(4), q(4);
    for (auto& x : p) x = rng.uniform(0.01, 1.0);
    for (auto& x : q) x = rng.uniform(0.01, 1.0);
    p = softmax(p);
    q = softmax(q);
    EXPECT_NEAR(symmetric_kl(p, q), symmetric_kl(q, p), 1e-14);
    EXPECT_NEAR(symmetric_kl(p, q), kl_divergence(p, q) + kl_divergence(q, p), 1e-12);
  }
}

TEST(SymmetricKl, ZeroEntriesAreRejected) {
  EXPECT_THROW(symmetric_kl(Vec{1.0, 0.0}, Vec{0.5, 0.5}), NumericError);
  EXPECT_THROW(kl_divergence(Vec{0.5, 0.5}, Vec{1.0, 0.0}), NumericError);
  EXPECT_THROW(symmetric_kl(Vec{0.5, 0.5}, Vec{1.0}), Error);
}

TEST(ActionableDistance, MatchesDirectSummation) {
  const GridMdp m = build_wall_world(7, 7, 3);
  const auto pol = SoftGoalPolicy::solve(m, at(1.0));
  std::vector<StateId> all(m.num_states());
  std::iota(all.begin(), all.end(), StateId{0});
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    const StateId a = rng.below(m.num_states()), b = rng.below(m.num_states());
    const double d = actionable_distance(pol, a, b, all);
    EXPECT_NEAR(d, oracle_distance(pol, a, b), 1e-10);
    EXPECT_DOUBLE_EQ(d, actionable_distance(pol, b, a, all));
  }
  EXPECT_EQ(actionable_distance(pol, 4, 4, all), 0.0);
  EXPECT_THROW(actionable_distance(pol, 1, 2, std::vector<StateId>{}), Error);
}

TEST(ActionableDistance, WallPairsFartherThanOpenPairs) {
  const GridMdp m = build_wall_world(7, 7, 3);
  const auto pol = SoftGoalPolicy::solve(m, SoftParams{});
  auto sid = [&](int x, int y) { return *m.state_at({x, y}); };
  const double across = oracle_distance(pol, sid(2, 0), sid(4, 0));
  const double open = oracle_distance(pol, sid(0, 0), sid(1, 0));
  EXPECT_NEAR(across, 3.696270221706016, 1e-6);
  EXPECT_NEAR(open, 0.5565478908483482, 1e-6);
  EXPECT_GT(across, 3.0 * open);
}

TEST(DistanceMatrix, TwoStateWorld) {
  const TableMdp m{2, 2, {0, 1, 0, 1}};
  const auto pol = SoftGoalPolicy::solve(m, SoftParams{});
  const auto dm = compute_distance_matrix(pol);
  ASSERT_EQ(dm.size(), 2u);
  EXPECT_EQ(dm.d(0, 0), 0.0);
  EXPECT_EQ(dm.d(1, 1), 0.0);
  EXPECT_GT(dm.d(0, 1), 0.0);
  EXPECT_EQ(dm.d(0, 1), dm.d(1, 0));
}

TEST(DistanceMatrix, SymmetricNonnegativeZeroDiagonal) {
  const GridMdp m = build_four_rooms(9, 9);
  const auto dm = compute_distance_matrix(SoftGoalPolicy::solve(m, SoftParams{}));
  for (std::size_t i = 0; i < dm.size(); ++i) {
    EXPECT_EQ(dm.d(i, i), 0.0);
    for (std::size_t j = 0; j < dm.size(); ++j) {
      EXPECT_EQ(dm.d(i, j), dm.d(j, i));
      EXPECT_GE(dm.d(i, j), 0.0);
      EXPECT_TRUE(std::isfinite(dm.d(i, j)));
    }
  }
  const double v = dm.triangle_violation_rate();
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, 1.0);
}

TEST(DistanceMatrix, DatasetModeWithFullCoverageEqualsExact) {
  const GridMdp m = build_wall_world(7, 7, 3);
  const auto pol = SoftGoalPolicy::solve(m, SoftParams{});
  DistanceOptions opt;
  opt.mode = ExpectationMode::dataset_states;
  for (StateId s = 0; s < m.num_states(); ++s) opt.dataset_states.insert(opt.dataset_states.end(), {s, s});
  const auto exact = compute_distance_matrix(pol);
  const auto data = compute_distance_matrix(pol, opt);
  for (std::size_t i = 0; i < exact.size(); ++i)
    for (std::size_t j = 0; j < exact.size(); ++j) EXPECT_NEAR(exact.d(i, j), data.d(i, j), 1e-9);
  EXPECT_NE(exact.meta.cache_key(), data.meta.cache_key());
}

TEST(DistanceMatrix, WithinRoomCloserThanAcrossRooms) {
  const GridMdp m = build_four_rooms(9, 9);
  const auto dm = compute_distance_matrix(SoftGoalPolicy::solve(m, SoftParams{}));
  double within = 0, across = 0;
  int nw = 0, na = 0;
  for (StateId a = 0; a < m.num_states(); ++a)
    for (StateId b = a + 1; b < m.num_states(); ++b) {
      if (m.room_of(a) == m.room_of(b)) {
        within += dm.at(a, b);
        ++nw;
      } else {
        across += dm.at(a, b);
        ++na;
      }
    }
  within /= nw;
  across /= na;
  EXPECT_NEAR(within, 1.196444483698636, 1e-6);
  EXPECT_NEAR(across, 3.283731484267773, 1e-6);
  EXPECT_LT(within, across);
}

TEST(DistanceMatrix, MeanShrinksWithTemperature) {
  const GridMdp m = build_wall_world(7, 7, 3);
  double prev = INFINITY;
  for (double a : {0.1, 0.25, 0.5, 0.6, 0.7}) {
    const double mean = compute_distance_matrix(SoftGoalPolicy::solve(m, at(a))).mean_offdiagonal();
    EXPECT_LT(mean, prev) << "alpha " << a;
    prev = mean;
  }
}

TEST(DistanceMatrix, BudgetGuard) {
  const GridMdp m = build_four_rooms(9, 9);
  const auto pol = SoftGoalPolicy::solve(m, SoftParams{});
  DistanceOptions opt;
  opt.op_budget = 1000;
  EXPECT_THROW(compute_distance_matrix(pol, opt), Error);
  opt.mode = ExpectationMode::dataset_states;
  EXPECT_THROW(compute_distance_matrix(pol, opt), Error);
}

TEST(DistanceMatrix, ForwardDirectionsSumToSymmetric) {
  const GridMdp m = build_wall_world(7, 7, 3);
  const auto pol = SoftGoalPolicy::solve(m, SoftParams{});
  std::vector<StateId> all(m.num_states());
  std::iota(all.begin(), all.end(), StateId{0});
  const double fwd = actionable_distance(pol, 0, 20, all, KlMode::forward);
  const double bwd = actionable_distance(pol, 20, 0, all, KlMode::forward);
  EXPECT_NEAR(fwd + bwd, actionable_distance(pol, 0, 20, all), 1e-9);
}

TEST(DistanceMatrix, CsvRoundTrip) {
  const GridMdp m = build_wall_world(5, 5, 2);
  const auto dm = compute_distance_matrix(SoftGoalPolicy::solve(m, SoftParams{}));
  const auto back = ActionableDistanceMatrix::from_csv(dm.to_csv());
  EXPECT_EQ(back.states, dm.states);
  EXPECT_TRUE(back.d == dm.d);
}
