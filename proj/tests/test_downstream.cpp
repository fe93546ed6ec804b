#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "arclab/downstream.hpp"

using namespace arclab;

namespace {

SoftParams cool() {
  SoftParams p;
  p.temperature = 0.1;
  return p;
}

// Memoized best return with `left` steps remaining.
double oracle_best(const GridMdp& mdp, const ReachAvoidTask& task, StateId s, int left,
                   std::map<std::pair<StateId, int>, double>& memo) {
  if (left == 0 || s == task.goal) return 0.0;
  const auto key = std::pair{s, left};
  if (auto it = memo.find(key); it != memo.end()) return it->second;
  double best = -INFINITY;
  for (ActionId a = 0; a < mdp.num_actions(); ++a) {
    const StateId n = mdp.transition(s, a);
    best = std::max(best, task.reward(n) + oracle_best(mdp, task, n, left - 1, memo));
  }
  return memo[key] = best;
}

// Clusters of the raw state features.
ClusterCommander kmeans_commander(const GridMdp& m, std::size_t k) {
  std::vector<StateId> all(m.num_states());
  for (StateId s = 0; s < m.num_states(); ++s) all[s] = s;
  const Matrix x = Encoder::identity(m.feature_dim()).embed(m, all);
  return ClusterCommander::from_kmeans(kmeans_fit(x, k, 1), all);
}

}  // namespace

TEST(Shaping, ZeroScaleIsSparse) {
  const GridMdp m = build_wall_world(7, 7, 3);
  const Encoder id = Encoder::identity(m.feature_dim());
  const ShapedRewardSpec spec{&id, 0.0, 1.0};
  for (StateId s = 0; s < m.num_states(); ++s)
    for (StateId g = 0; g < m.num_states(); ++g)
      EXPECT_EQ(shaped_reward(spec, m, s, g), s == g ? 1.0 : 0.0);
}

TEST(Shaping, PenalizesLatentDistance) {
  const GridMdp m = build_open_grid(5, 5);
  const Encoder id = Encoder::identity(m.feature_dim());
  const ShapedRewardSpec spec{&id, 2.0, 1.0};
  const StateId g = *m.state_at({4, 4});
  EXPECT_EQ(shaped_reward(spec, m, g, g), 1.0);
  const StateId s = *m.state_at({0, 4});
  EXPECT_NEAR(shaped_reward(spec, m, s, g), -2.0 * distance(m.features(s), m.features(g)), 1e-12);
  EXPECT_THROW(shaped_reward(ShapedRewardSpec{nullptr, 1.0, 1.0}, m, s, g), Error);
}

TEST(Shaping, CentralStatesAndFarGoals) {
  const GridMdp m = build_open_grid(9, 9);
  EXPECT_EQ(central_states(m, 0).size(), 1u);
  EXPECT_EQ(central_states(m, 1).size(), 9u);
  EXPECT_EQ(central_states(m, -1).size(), m.num_states());
  Rng rng(3);
  for (StateId g : far_goals(m, 6, 4, rng)) {
    const Cell c = m.cell_of(g);
    EXPECT_GE(std::max(std::abs(c.x - 4), std::abs(c.y - 4)), 4);
  }
  EXPECT_THROW(far_goals(m, 100, 4, rng), Error);
}

TEST(TabularQ, UpdateMovesTowardTarget) {
  QLearnerConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.discount = 0.9;
  TabularQLearner q(3, 1, 2, cfg);
  q.update(0, 0, 1, 1.0, 1, true);
  EXPECT_DOUBLE_EQ(q.q(0, 0, 1), 0.5);
  q.update(2, 0, 0, 0.0, 0, false);
  EXPECT_DOUBLE_EQ(q.q(2, 0, 0), 0.5 * 0.9 * 0.5);
  EXPECT_EQ(q.greedy(0, 0), 1u);
  cfg.epsilon = 1.5;
  EXPECT_THROW(TabularQLearner(3, 1, 2, cfg), ConfigError);
}

TEST(TabularQ, ShapedLearningCurveIsDeterministic) {
  const GridMdp m = build_wall_world(9, 9, 4);
  const Encoder id = Encoder::identity(m.feature_dim());
  ShapingTaskConfig task;
  task.episodes = 100;
  task.min_goal_distance = 3;
  QLearnerConfig q;
  q.initial_q = -20.0;
  const auto a = train_shaped(m, ShapedRewardSpec{&id, 0.5, 1.0}, q, task, 4);
  const auto b = train_shaped(m, ShapedRewardSpec{&id, 0.5, 1.0}, q, task, 4);
  EXPECT_EQ(a.to_csv(), b.to_csv());
  ASSERT_EQ(a.points.size(), 2u);
  EXPECT_EQ(a.final().iteration, 100);
  EXPECT_THROW(LearningCurve{}.final(), Error);
}

TEST(ReachAvoid, TaskLayout) {
  const GridMdp m = build_open_grid(9, 9);
  const ReachAvoidTask t = make_reach_avoid(m);
  EXPECT_EQ(m.cell_of(t.start), (Cell{1, 1}));
  EXPECT_EQ(m.cell_of(t.goal), (Cell{7, 7}));
  EXPECT_TRUE(t.danger[*m.state_at({4, 4})]);
  EXPECT_FALSE(t.danger[t.start]);
  EXPECT_EQ(t.goal_distance[t.goal], 0.0);
  EXPECT_THROW(make_reach_avoid(build_directed_grid(5, 5)), Error);
}

TEST(ReachAvoid, OptimalReturnMatchesOracle) {
  const GridMdp m = build_open_grid(9, 9);
  const ReachAvoidTask t = make_reach_avoid(m);
  std::map<std::pair<StateId, int>, double> memo;
  const double oracle = oracle_best(m, t, t.start, t.horizon, memo);
  EXPECT_NEAR(reach_avoid_optimal_return(m, t), oracle, 1e-9);
  EXPECT_NEAR(reach_avoid_optimal_return(m, t), -24.767621383218248, 1e-9);
  EXPECT_LT(reach_avoid_random_return(m, t), oracle);
}

TEST(ReachAvoid, DiagonalPathThroughDangerPaysPenalty) {
  const GridMdp m = build_open_grid(9, 9);
  const ReachAvoidTask t = make_reach_avoid(m);
  const auto right = static_cast<ActionId>(PlainAction::right);
  const auto down = static_cast<ActionId>(PlainAction::down);
  std::vector<StateId> path;
  const double straight = reach_avoid_return(
      m, t, [&](StateId s) { return m.cell_of(s).x <= m.cell_of(s).y ? right : down; }, &path);
  EXPECT_EQ(path.back(), t.goal);
  int in_danger = 0;
  double distance_only = 0.0;
  for (std::size_t i = 1; i < path.size(); ++i) {
    in_danger += t.danger[path[i]] ? 1 : 0;
    distance_only -= t.goal_distance[path[i]];
  }
  EXPECT_GT(in_danger, 0);
  EXPECT_NEAR(straight, distance_only - in_danger * t.penalty, 1e-12);
  EXPECT_LT(straight, reach_avoid_optimal_return(m, t));
}

TEST(ReachAvoid, NormalizedReturn) {
  EXPECT_DOUBLE_EQ(normalized_return(-10, -30, -10), 1.0);
  EXPECT_DOUBLE_EQ(normalized_return(-30, -30, -10), 0.0);
  EXPECT_THROW(normalized_return(0, -1, -1), Error);
}

TEST(LinearQ, IdentityEncoderSeesRawFeatures) {
  const GridMdp m = build_open_grid(5, 5);
  const LatentTable table(Encoder::identity(m.feature_dim()), m);
  ASSERT_EQ(table.size(), m.num_states());
  for (StateId s = 0; s < m.num_states(); ++s) EXPECT_EQ(table[s], m.features(s));
}

TEST(LinearQ, UpdateIsSemiGradientStep) {
  LinearQ q(2, 3);
  const Vec phi{0.5, -1.0};
  q.update(phi, 1, 2.0, 0.1);
  EXPECT_DOUBLE_EQ(q.q(phi, 1), 0.2 * (0.25 + 1.0 + 1.0));
  EXPECT_EQ(q.q(phi, 0), 0.0);
  EXPECT_EQ(q.greedy(phi), 1u);
  EXPECT_DOUBLE_EQ(q.max_q(phi), q.q(phi, 1));
}

TEST(LinearQ, TrainingIsDeterministic) {
  const GridMdp m = build_open_grid(7, 7);
  const ReachAvoidTask t = make_reach_avoid(m);
  const Encoder id = Encoder::identity(m.feature_dim());
  FeatureLearnerConfig cfg;
  cfg.episodes = 50;
  const auto a = train_feature_policy(m, t, id, cfg, 2);
  const auto b = train_feature_policy(m, t, id, cfg, 2);
  EXPECT_EQ(a.to_csv(), b.to_csv());
  EXPECT_EQ(a.points.size(), 2u);
}

TEST(Meta, ReturnIsSumOfLowLevelRewards) {
  const GridMdp m = build_four_rooms(9, 9);
  const auto gcp = SoftGoalPolicy::solve(m, cool());
  const ClusterCommander cmd = kmeans_commander(m, 4);
  const HrlTask task = make_room_sequence(m, 4, 0, 5);
  MetaPolicy meta(MetaKind::cluster_categorical, task.input_dim(m), 4, {16}, 7);
  Rng rng(9);
  for (int e = 0; e < 20; ++e) {
    const MetaEpisode ep = run_meta_episode(meta, gcp, m, cmd, task, rng);
    double sum = 0.0;
    for (double r : ep.low_level_rewards) sum += r;
    EXPECT_DOUBLE_EQ(ep.total_return, sum);
    EXPECT_EQ(ep.total_return, static_cast<double>(ep.checkpoints_reached));
    EXPECT_EQ(ep.log_probs.size(), ep.steps.size());
    EXPECT_LE(ep.steps.size(), static_cast<std::size_t>(task.meta_steps));
  }
}

TEST(Meta, ZeroHorizonDoesNothing) {
  const GridMdp m = build_four_rooms(9, 9);
  const auto gcp = SoftGoalPolicy::solve(m, cool());
  const ClusterCommander cmd{{{0, 1, 2}}};
  HrlTask task = make_room_sequence(m, 2, 0, 5);
  task.meta_horizon = 0;
  MetaPolicy meta(MetaKind::cluster_categorical, task.input_dim(m), 1, {4}, 7);
  Rng rng(1);
  const MetaEpisode ep = run_meta_episode(meta, gcp, m, cmd, task, rng);
  EXPECT_EQ(ep.total_return, 0.0);
  EXPECT_TRUE(ep.steps.empty());
  EXPECT_TRUE(ep.low_level_rewards.empty());
}

TEST(Meta, SingleClusterCommandsUniformGoals) {
  const GridMdp m = build_four_rooms(9, 9);
  const auto gcp = SoftGoalPolicy::solve(m, cool());
  const ClusterCommander cmd = kmeans_commander(m, 1);
  ASSERT_EQ(cmd.members[0].size(), m.num_states());
  HrlTask task = make_room_sequence(m, 200, 0, 5);
  task.meta_steps = 200;
  task.meta_horizon = 1;
  MetaPolicy meta(MetaKind::cluster_categorical, task.input_dim(m), 1, {4}, 7);
  Rng rng(2);
  std::vector<int> counts(m.num_states(), 0);
  int n = 0;
  for (int e = 0; e < 60; ++e)
    for (const auto& st : run_meta_episode(meta, gcp, m, cmd, task, rng).steps) {
      ++counts[st.goal];
      ++n;
    }
  // Pearson chi-square against uniform; 67 dof, 99.9th percentile ~ 112.
  const double expect = static_cast<double>(n) / m.num_states();
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
  EXPECT_GT(n, 5000);
  EXPECT_LT(chi2, 112.0);
  for (StateId s = 0; s < m.num_states(); ++s) {
    EXPECT_NEAR(meta.log_prob(task.observe(m, s, 0), MetaAction{}), 0.0, 1e-12);
  }
}

TEST(Meta, ConstantZeroRewardLeavesReturnAtZero) {
  const GridMdp m = build_four_rooms(9, 9);
  const auto gcp = SoftGoalPolicy::solve(m, cool());
  const StateId start = 0;
  const ClusterCommander cmd{{{start}, {start}}};
  const HrlTask task = make_room_sequence(m, 3, start, 1);
  MetaPolicy meta(MetaKind::cluster_categorical, task.input_dim(m), 2, {8}, 3);
  MetaTrainConfig cfg;
  cfg.iterations = 20;
  cfg.batch_episodes = 4;
  const LearningCurve curve = train_meta(meta, gcp, m, cmd, task, cfg, 11);
  ASSERT_EQ(curve.points.size(), 20u);
  for (const auto& p : curve.points) {
    EXPECT_EQ(p.mean_return, 0.0);
    EXPECT_EQ(p.success_rate, 0.0);
  }
  EXPECT_TRUE(meta.net().all_finite());
}

TEST(Meta, RandomRoomSequenceBaselineRegression) {
  const GridMdp m = build_four_rooms(9, 9);
  const auto gcp = SoftGoalPolicy::solve(m, cool());
  const ClusterCommander cmd = kmeans_commander(m, 4);
  const HrlTask task = make_room_sequence(m, 4, 0, 5);
  MetaPolicy meta(MetaKind::cluster_categorical, task.input_dim(m), 4, {16}, 7);
  const double r = random_meta_baseline(meta, gcp, m, cmd, task, 200, 3);
  EXPECT_EQ(r, random_meta_baseline(meta, gcp, m, cmd, task, 200, 3));
  EXPECT_NEAR(r, 3.735, 1e-12);
}

TEST(Meta, CommanderMismatchThrows) {
  const GridMdp m = build_four_rooms(9, 9);
  const auto gcp = SoftGoalPolicy::solve(m, cool());
  const HrlTask task = make_room_sequence(m, 2, 0, 5);
  MetaPolicy latent(MetaKind::latent_gaussian, task.input_dim(m), 2, {4}, 1);
  MetaPolicy cat(MetaKind::cluster_categorical, task.input_dim(m), 2, {4}, 1);
  Rng rng(0);
  EXPECT_THROW(run_meta_episode(latent, gcp, m, ClusterCommander{{{0}, {1}}}, task, rng), Error);
  EXPECT_THROW(run_meta_episode(cat, gcp, m, LatentCommander{}, task, rng), Error);
  EXPECT_THROW(run_meta_episode(cat, gcp, m, ClusterCommander{{{0}, {}}}, task, rng), Error);
}

TEST(Meta, RoomSequenceAvoidsRepeats) {
  const GridMdp m = build_four_rooms(9, 9);
  const HrlTask t = make_room_sequence(m, 50, 0, 8);
  std::size_t prev = static_cast<std::size_t>(m.room_of(0));
  for (std::size_t r : t.checkpoints) {
    EXPECT_NE(r, prev);
    EXPECT_LT(r, 4u);
    prev = r;
  }
  EXPECT_THROW(make_room_sequence(build_open_grid(4, 4), 3, 0, 1), Error);
}

TEST(Meta, GaussianLogProbGradientMatchesFiniteDifference) {
  MetaPolicy pol(MetaKind::latent_gaussian, 3, 2, {5}, 4);
  for (double& w : pol.net().params()) w += 0.05;
  const Vec x{0.3, -0.2, 0.9};
  const MetaAction act{0, {0.4, -1.1}};
  pol.net().zero_grad();
  pol.accumulate_log_prob_grad(x, act, 1.0);
  const Vec g(pol.net().grads().begin(), pol.net().grads().end());
  const double h = 1e-6;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double keep = pol.net().params()[i];
    pol.net().params()[i] = keep + h;
    const double up = pol.log_prob(x, act);
    pol.net().params()[i] = keep - h;
    const double down = pol.log_prob(x, act);
    pol.net().params()[i] = keep;
    EXPECT_NEAR(g[i], (up - down) / (2 * h), 1e-6);
  }
}

TEST(Bandit, ReinforcePicksBetterArm) {
  const Vec arms{0.2, 0.8};
  int right = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    right += reinforce_bandit(arms, 200, 16, 0.05, seed) == 1 ? 1 : 0;
  EXPECT_GE(right, 19);
}
