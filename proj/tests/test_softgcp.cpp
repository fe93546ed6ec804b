#include <gtest/gtest.h>

#include <cmath>

#include "arclab/softgcp.hpp"

using namespace arclab;

namespace {

// s0 - s1 - s2 with actions {left, right}; moving off the end stays put.
TableMdp chain3() { return TableMdp{3, 2, {0, 1, 0, 2, 1, 2}}; }

SoftParams with_temperature(double a) {
  SoftParams p;
  p.temperature = a;
  p.tol = 1e-10;
  return p;
}

}  // namespace

TEST(SoftValueIteration, GoalIsAbsorbingAtZero) {
  const GoalTables t = soft_value_iteration(chain3(), 2, with_temperature(0.5));
  EXPECT_EQ(t.v[2], 0.0);
}

TEST(SoftValueIteration, LowTemperatureApproachesShortestPath) {
  const GoalTables t = soft_value_iteration(chain3(), 2, with_temperature(0.01));
  EXPECT_GE(t.v[1], -1.05);
  EXPECT_LE(t.v[1], -0.95);
  EXPECT_GE(t.v[0], -2.0);
  EXPECT_LE(t.v[0], -1.85);
}

TEST(SoftValueIteration, UnitTemperatureChainRegression) {
  // Damped fixed-point iteration at 40 digits.
  const GoalTables t = soft_value_iteration(chain3(), 2, with_temperature(1.0));
  EXPECT_NEAR(t.v[0], -1.1889892207490947, 1e-8);
  EXPECT_NEAR(t.v[1], -0.71996058573123071, 1e-8);
}

TEST(SoftValueIteration, ResidualBelowToleranceOnGrids) {
  const SoftParams p;
  for (const GridMdp& m : {build_wall_world(7, 7, 3), build_four_rooms(9, 9), build_directed_grid(5, 5)}) {
    for (StateId g : {StateId{0}, m.num_states() / 2, m.num_states() - 1}) {
      const GoalTables t = soft_value_iteration(m, g, p);
      EXPECT_LT(bellman_residual(m, t, p), p.tol) << m.name() << " goal " << g;
    }
  }
}

TEST(SoftValueIteration, NonConvergenceCarriesResidual) {
  SoftParams p = with_temperature(1.0);
  p.max_iters = 3;
  try {
    soft_value_iteration(chain3(), 2, p);
    FAIL() << "expected ConvergenceError";
  } catch (const ConvergenceError& e) {
    EXPECT_GT(e.residual(), 0.0);
  }
}

TEST(SoftValueIteration, RejectsInvalidParameters) {
  SoftParams p;
  p.temperature = 0.0;
  EXPECT_THROW(soft_value_iteration(chain3(), 2, p), ConfigError);
  p = SoftParams{};
  p.discount = 1.0;
  EXPECT_THROW(soft_value_iteration(chain3(), 2, p), ConfigError);
  EXPECT_THROW(soft_value_iteration(chain3(), 3, SoftParams{}), Error);
}

TEST(SoftValueIteration, WarmStartReachesSameFixedPoint) {
  const GridMdp m = build_wall_world(7, 7, 3);
  const SoftParams p = with_temperature(0.5);
  const GoalTables cold = soft_value_iteration(m, 5, p);
  const Vec init(m.num_states(), -3.0);
  const GoalTables warm = soft_value_iteration(m, 5, p, init);
  for (StateId s = 0; s < m.num_states(); ++s) EXPECT_NEAR(cold.v[s], warm.v[s], 1e-8);
}

TEST(SoftValueIteration, OpenGridSymmetry) {
  const GridMdp m = build_open_grid(5, 5);
  const SoftParams p = with_temperature(0.5);
  auto sid = [&](int x, int y) { return *m.state_at({x, y}); };
  const StateId g = sid(1, 0);
  const GoalTables t = soft_value_iteration(m, g, p);
  // Mirror x -> 4 - x and transpose.
  const GoalTables mirror = soft_value_iteration(m, sid(3, 0), p);
  const GoalTables transpose = soft_value_iteration(m, sid(0, 1), p);
  for (int x = 0; x < 5; ++x)
    for (int y = 0; y < 5; ++y) {
      EXPECT_NEAR(t.v[sid(x, y)], mirror.v[sid(4 - x, y)], 1e-9);
      EXPECT_NEAR(t.v[sid(x, y)], transpose.v[sid(y, x)], 1e-9);
    }
}

TEST(ActionDistribution, UniformAtGoal) {
  const auto pol = SoftGoalPolicy::solve(chain3(), with_temperature(0.3));
  const Vec p = pol.action_distribution(1, 1);
  EXPECT_NEAR(p[0], 0.5, 1e-12);
  EXPECT_NEAR(p[1], 0.5, 1e-12);
}

TEST(ActionDistribution, LowTemperatureIsNearlyGreedy) {
  const auto pol = SoftGoalPolicy::solve(chain3(), with_temperature(0.01));
  EXPECT_GT(pol.action_distribution(0, 2)[1], 0.99);
}

// With step reward -1 and a goal pinned at 0, alpha * log|A| = 1 balances the
// entropy bonus against the step cost: every action distribution is uniform.
TEST(ActionDistribution, UniformAtCriticalTemperature) {
  const GridMdp m = build_wall_world(7, 7, 3);
  const auto pol = SoftGoalPolicy::solve(m, with_temperature(1.0 / std::log(4.0)));
  for (StateId s = 0; s < m.num_states(); s += 5)
    for (double x : pol.action_distribution(s, 0)) EXPECT_NEAR(x, 0.25, 0.01);
}

TEST(ActionDistribution, GoalRepelsAboveCriticalTemperature) {
  const GridMdp m = build_wall_world(7, 7, 3);
  const StateId g = *m.state_at({6, 6});
  const StateId s = *m.state_at({5, 6});
  const auto right = static_cast<ActionId>(PlainAction::right);
  SoftGoalPolicy hot(with_temperature(4.0), m.num_states(), 4, 0);
  hot.set_tables(soft_value_iteration(m, g, with_temperature(4.0)));
  SoftGoalPolicy cool(with_temperature(0.5), m.num_states(), 4, 0);
  cool.set_tables(soft_value_iteration(m, g, with_temperature(0.5)));
  EXPECT_LT(hot.action_distribution(s, g)[right], 0.25);
  EXPECT_GT(cool.action_distribution(s, g)[right], 0.25);
}

TEST(ActionDistribution, SumsToOneAndMatchesSoftmaxOfQ) {
  const GridMdp m = build_four_rooms(9, 9);
  const auto pol = SoftGoalPolicy::solve(m, SoftParams{});
  const GoalTables& t = pol.tables(7);
  for (StateId s = 0; s < m.num_states(); ++s) {
    const Vec p = pol.action_distribution(s, 7);
    double sum = 0.0;
    for (ActionId a = 0; a < p.size(); ++a) {
      sum += p[a];
      if (s != 7) {
        EXPECT_NEAR(p[a], std::exp((t.q_at(s, a) - t.v[s]) / 0.25), 1e-9);
      }
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(ActionDistribution, MissingGoalTableThrows) {
  SoftGoalPolicy pol(SoftParams{}, 3, 2, 0);
  EXPECT_THROW(pol.action_distribution(0, 2), Error);
}

TEST(ActionDistribution, EntropyNonDecreasingInTemperature) {
  const GridMdp m = build_wall_world(7, 7, 3);
  const StateId g = *m.state_at({6, 6});
  for (StateId s : {StateId{0}, StateId{10}, StateId{20}}) {
    double prev = -1.0;
    for (double a : {0.05, 0.1, 0.25, 0.5, 0.6, 0.7, 0.72}) {
      const GoalTables t = soft_value_iteration(m, g, with_temperature(a));
      SoftGoalPolicy pol(with_temperature(a), m.num_states(), m.num_actions(), 0);
      pol.set_tables(t);
      const double h = policy_entropy(pol.action_distribution(s, g));
      EXPECT_GE(h, prev - 1e-12);
      prev = h;
    }
  }
}

TEST(Rollout, HorizonZeroAndStartAtGoal) {
  const auto pol = SoftGoalPolicy::solve(chain3(), SoftParams{});
  const Trajectory a = rollout(pol, chain3(), 0, 2, 0, std::uint64_t{1});
  EXPECT_EQ(a.states, std::vector<StateId>{0});
  EXPECT_TRUE(a.actions.empty());
  EXPECT_FALSE(a.reached);
  const Trajectory b = rollout(pol, chain3(), 2, 2, 10, std::uint64_t{1});
  EXPECT_TRUE(b.reached);
  EXPECT_TRUE(b.actions.empty());
}

TEST(Rollout, TransitionsAreConsistent) {
  const GridMdp m = build_four_rooms(9, 9);
  const auto pol = SoftGoalPolicy::solve(m, SoftParams{});
  const Trajectory tr = rollout(pol, m, 0, m.num_states() - 1, 200, std::uint64_t{3});
  ASSERT_EQ(tr.states.size(), tr.actions.size() + 1);
  for (std::size_t t = 0; t < tr.actions.size(); ++t)
    EXPECT_EQ(m.transition(tr.states[t], tr.actions[t]), tr.states[t + 1]);
  EXPECT_TRUE(tr.reached);
  EXPECT_EQ(tr.states.back(), m.num_states() - 1);
}

TEST(SuccessRate, DeterministicLimitAlwaysSucceeds) {
  const GridMdp m = build_wall_world(7, 7, 3);
  const auto pol = SoftGoalPolicy::solve(m, with_temperature(0.01));
  EXPECT_DOUBLE_EQ(success_rate(pol, m, 100, 30, 5), 1.0);
}

TEST(SuccessRate, HorizonZeroOnlyCountsTrivialPairs) {
  const TableMdp m{2, 1, {1, 0}};
  const auto pol = SoftGoalPolicy::solve(m, SoftParams{});
  Rng rng(4);
  for (int i = 0; i < 20; ++i) EXPECT_FALSE(rollout(pol, m, 0, 1, 0, rng).reached);
  EXPECT_THROW(success_rate(pol, m, 0, 10, 1), Error);
}

TEST(SuccessRate, ShippedWorldsAtLowTemperature) {
  const SoftParams p = with_temperature(0.1);
  const GridMdp wall = build_wall_world(7, 7, 3);
  const GridMdp rooms = build_four_rooms(9, 9);
  EXPECT_GE(success_rate(SoftGoalPolicy::solve(wall, p), wall, 100, 50, 11), 0.95);
  EXPECT_GE(success_rate(SoftGoalPolicy::solve(rooms, p), rooms, 100, 60, 11), 0.9);
}

TEST(SoftGoalPolicy, JsonRoundTrip) {
  const GridMdp m = build_wall_world(5, 5, 2);
  const auto pol = SoftGoalPolicy::solve(m, SoftParams{});
  const auto back = SoftGoalPolicy::from_json(pol.to_json());
  EXPECT_EQ(back.cache_key(), pol.cache_key());
  for (StateId s = 0; s < m.num_states(); ++s)
    EXPECT_EQ(back.action_distribution(s, 3), pol.action_distribution(s, 3));
}

TEST(SoftGoalPolicy, CacheKeyTracksParameters) {
  const GridMdp m = build_wall_world(5, 5, 2);
  SoftGoalPolicy a(SoftParams{}, m.num_states(), 4, m.hash());
  SoftGoalPolicy b(with_temperature(1.0), m.num_states(), 4, m.hash());
  EXPECT_NE(a.cache_key(), b.cache_key());
}
