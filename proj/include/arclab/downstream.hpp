#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "arclab/clustering.hpp"
#include "arclab/core.hpp"
#include "arclab/gridworld.hpp"
#include "arclab/nncore.hpp"
#include "arclab/representations.hpp"
#include "arclab/softgcp.hpp"

namespace arclab {

struct CurvePoint {
  int iteration = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
};

struct LearningCurve {
  std::vector<CurvePoint> points;
  std::uint64_t seed = 0;

  const CurvePoint& final() const {
    if (points.empty()) throw Error("empty learning curve");
    return points.back();
  }

  /// iteration,mean_return,success_rate,seed
  std::string to_csv(bool header = true) const {
    std::string out = header ? "iteration,mean_return,success_rate,seed\n" : "";
    for (const auto& p : points)
      out += std::to_string(p.iteration) + "," + format_double(p.mean_return) + "," +
             format_double(p.success_rate) + "," + std::to_string(seed) + "\n";
    return out;
  }
};

/// Latent vector of every state, computed once.
class LatentTable {
public:
  LatentTable(const Encoder& enc, const GridMdp& mdp) {
    z_.reserve(mdp.num_states());
    for (StateId s = 0; s < mdp.num_states(); ++s) z_.push_back(enc.encode_state(mdp, s));
  }
  const Vec& operator[](StateId s) const { return z_.at(s); }
  std::size_t size() const noexcept { return z_.size(); }

private:
  std::vector<Vec> z_;
};

// ---------------------------------------------------------------------------
// Reward shaping

struct ShapedRewardSpec {
  const Encoder* encoder = nullptr;
  double scale = 1.0;         // alpha weight on the latent distance
  double sparse_bonus = 1.0;  // reward for being at the goal
};

/// r_sparse(s,g) - scale * ||phi(s) - phi(g)||, with r_sparse = bonus iff s == g.
inline double shaped_reward(const ShapedRewardSpec& spec, const GridMdp& mdp, StateId s,
                            StateId g) {
  const double sparse = s == g ? spec.sparse_bonus : 0.0;
  if (spec.scale == 0.0) return sparse;
  if (!spec.encoder) throw Error("shaped_reward: no encoder");
  return sparse - spec.scale * distance(spec.encoder->encode_state(mdp, s),
                                        spec.encoder->encode_state(mdp, g));
}

struct QLearnerConfig {
  double learning_rate = 0.5;
  double discount = 0.99;
  double epsilon = 0.1;
  int horizon = 100;
  double initial_q = 0.0;
};

/// Goal-conditioned tabular Q over (state, goal slot, action), zero-initialized.
class TabularQLearner {
public:
  TabularQLearner(std::size_t states, std::size_t goals, std::size_t actions, QLearnerConfig cfg)
      : cfg_(cfg), ns_(states), na_(actions), q_(states * goals * actions, cfg.initial_q) {
    if (!(cfg.epsilon >= 0.0 && cfg.epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0,1]");
  }

  double q(StateId s, std::size_t g, ActionId a) const { return q_[index(s, g, a)]; }

  /// Greedy action; ties go to the lowest index.
  ActionId greedy(StateId s, std::size_t g) const {
    ActionId best = 0;
    for (ActionId a = 1; a < na_; ++a)
      if (q(s, g, a) > q(s, g, best)) best = a;
    return best;
  }

  /// Epsilon-greedy with uniform tie-breaking among maximal actions.
  ActionId explore(StateId s, std::size_t g, Rng& rng) const {
    if (rng.uniform() < cfg_.epsilon) return rng.below(na_);
    double m = -std::numeric_limits<double>::infinity();
    for (ActionId a = 0; a < na_; ++a) m = std::max(m, q(s, g, a));
    std::vector<ActionId> ties;
    for (ActionId a = 0; a < na_; ++a)
      if (q(s, g, a) == m) ties.push_back(a);
    return ties[rng.below(ties.size())];
  }

  void update(StateId s, std::size_t g, ActionId a, double r, StateId next, bool terminal) {
    double target = r;
    if (!terminal) {
      double m = q(next, g, 0);
      for (ActionId b = 1; b < na_; ++b) m = std::max(m, q(next, g, b));
      target += cfg_.discount * m;
    }
    double& cell = q_[index(s, g, a)];
    cell += cfg_.learning_rate * (target - cell);
    if (!std::isfinite(cell)) throw NumericError("Q-learning diverged");
  }

  const QLearnerConfig& config() const noexcept { return cfg_; }

private:
  std::size_t index(StateId s, std::size_t g, ActionId a) const { return (g * ns_ + s) * na_ + a; }
  QLearnerConfig cfg_;
  std::size_t ns_, na_;
  Vec q_;
};

struct ShapingTaskConfig {
  int n_goals = 4;
  int episodes = 400;       // training budget
  int eval_every = 50;      // episodes per evaluation block
  int eval_starts = 25;     // greedy evaluation rollouts per goal
  int min_goal_distance = 5;  // goals at least this far (Chebyshev) from the centre
  int start_radius = 3;       // starts within this Chebyshev radius of the centre; < 0: anywhere
};

/// States within Chebyshev distance `radius` of the grid centre (all states if radius < 0).
inline std::vector<StateId> central_states(const GridMdp& mdp, int radius) {
  std::vector<StateId> out;
  const int cx = mdp.width() / 2, cy = mdp.height() / 2;
  for (StateId s = 0; s < mdp.num_states(); ++s) {
    const Cell c = mdp.cell_of(s);
    if (radius < 0 || std::max(std::abs(c.x - cx), std::abs(c.y - cy)) <= radius) out.push_back(s);
  }
  return out;
}

/// Goals drawn outside the central region of the grid.
inline std::vector<StateId> far_goals(const GridMdp& mdp, int n, int min_dist, Rng& rng) {
  std::vector<StateId> pool;
  const int cx = mdp.width() / 2, cy = mdp.height() / 2;
  for (StateId s = 0; s < mdp.num_states(); ++s) {
    const Cell c = mdp.cell_of(s);
    if (std::max(std::abs(c.x - cx), std::abs(c.y - cy)) >= min_dist) pool.push_back(s);
  }
  if (pool.size() < static_cast<std::size_t>(n)) throw Error("far_goals: not enough far cells");
  shuffle(pool, rng);
  pool.resize(static_cast<std::size_t>(n));
  return pool;
}

/// Q-learning on a goal-reaching task over `mdp` with shaped reward; the
/// reported success is greedy and sparse (goal reached within the horizon).
inline LearningCurve train_shaped(const GridMdp& mdp, const ShapedRewardSpec& spec,
                                  const QLearnerConfig& qcfg, const ShapingTaskConfig& task,
                                  std::uint64_t seed) {
  Rng rng(derive_seed(seed, "shaping"));
  const auto goals = far_goals(mdp, task.n_goals, task.min_goal_distance, rng);
  std::optional<LatentTable> latents;
  if (spec.scale != 0.0) {
    if (!spec.encoder) throw Error("train_shaped: shaping needs an encoder");
    latents.emplace(*spec.encoder, mdp);
  }
  auto reward = [&](StateId s, StateId g) {
    const double sparse = s == g ? spec.sparse_bonus : 0.0;
    return latents ? sparse - spec.scale * distance((*latents)[s], (*latents)[g]) : sparse;
  };

  const auto starts = central_states(mdp, task.start_radius);
  if (starts.empty()) throw Error("train_shaped: empty start region");
  Rng eval_rng(derive_seed(seed, "shaping/eval"));
  std::vector<std::pair<StateId, std::size_t>> eval_tasks;
  for (std::size_t gi = 0; gi < goals.size(); ++gi)
    for (int k = 0; k < task.eval_starts; ++k) {
      eval_tasks.emplace_back(starts[eval_rng.below(starts.size())], gi);
    }

  TabularQLearner learner(mdp.num_states(), goals.size(), mdp.num_actions(), qcfg);
  LearningCurve curve;
  curve.seed = seed;
  double block_return = 0.0;
  for (int ep = 1; ep <= task.episodes; ++ep) {
    const std::size_t gi = rng.below(goals.size());
    const StateId g = goals[gi];
    StateId s = starts[rng.below(starts.size())];
    double ret = 0.0;
    for (int t = 0; t < qcfg.horizon && s != g; ++t) {
      const ActionId a = learner.explore(s, gi, rng);
      const StateId n = mdp.transition(s, a);
      const double r = reward(n, g);
      learner.update(s, gi, a, r, n, n == g);
      ret += r;
      s = n;
    }
    block_return += ret;
    if (ep % task.eval_every == 0 || ep == task.episodes) {
      int hits = 0;
      for (auto [s0, gidx] : eval_tasks) {
        StateId x = s0;
        for (int t = 0; t < qcfg.horizon && x != goals[gidx]; ++t)
          x = mdp.transition(x, learner.greedy(x, gidx));
        hits += x == goals[gidx] ? 1 : 0;
      }
      const int block = ep % task.eval_every == 0 ? task.eval_every : ep % task.eval_every;
      curve.points.push_back({ep, block_return / block,
                              static_cast<double>(hits) / static_cast<double>(eval_tasks.size())});
      block_return = 0.0;
    }
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Reach-while-avoid with a linear Q over frozen features

/// The grid spans [-2,2]^2 world units; start near (-1.5,-1.5), goal near
/// (1.5,1.5), and a danger disk of radius 1 around the origin.
struct ReachAvoidTask {
  StateId start = 0;
  StateId goal = 0;
  std::vector<char> danger;  // per state
  Vec goal_distance;         // per state, world units
  double penalty = 4.0;
  int horizon = 40;

  double reward(StateId s) const { return -goal_distance[s] - (danger[s] ? penalty : 0.0); }
};

inline ReachAvoidTask make_reach_avoid(const GridMdp& mdp, double danger_radius = 1.0,
                                       double penalty = 4.0, int horizon = 40) {
  if (mdp.directed()) throw Error("reach-avoid: plain grids only");
  auto world = [&](Cell c) {
    return std::pair{-2.0 + 4.0 * c.x / std::max(1, mdp.width() - 1),
                     -2.0 + 4.0 * c.y / std::max(1, mdp.height() - 1)};
  };
  auto nearest = [&](double wx, double wy) {
    StateId best = 0;
    double bd = 1e300;
    for (StateId s = 0; s < mdp.num_states(); ++s) {
      auto [x, y] = world(mdp.cell_of(s));
      const double d = (x - wx) * (x - wx) + (y - wy) * (y - wy);
      if (d < bd) {
        bd = d;
        best = s;
      }
    }
    return best;
  };
  ReachAvoidTask t;
  t.penalty = penalty;
  t.horizon = horizon;
  t.start = nearest(-1.5, -1.5);
  t.goal = nearest(1.5, 1.5);
  auto [gx, gy] = world(mdp.cell_of(t.goal));
  for (StateId s = 0; s < mdp.num_states(); ++s) {
    auto [x, y] = world(mdp.cell_of(s));
    t.danger.push_back(std::hypot(x, y) < danger_radius ? 1 : 0);
    t.goal_distance.push_back(std::hypot(x - gx, y - gy));
  }
  return t;
}

/// Return of a deterministic policy from the task start; reaching the goal ends the episode.
template <class Policy>
double reach_avoid_return(const GridMdp& mdp, const ReachAvoidTask& task, Policy&& policy,
                          std::vector<StateId>* path = nullptr) {
  StateId s = task.start;
  double ret = 0.0;
  if (path) path->assign(1, s);
  for (int t = 0; t < task.horizon && s != task.goal; ++t) {
    s = mdp.transition(s, policy(s));
    ret += task.reward(s);
    if (path) path->push_back(s);
  }
  return ret;
}

/// Optimal finite-horizon return from the start by exact dynamic programming.
inline double reach_avoid_optimal_return(const GridMdp& mdp, const ReachAvoidTask& task) {
  Vec v(mdp.num_states(), 0.0), nv(mdp.num_states());
  for (int t = 0; t < task.horizon; ++t) {
    for (StateId s = 0; s < mdp.num_states(); ++s) {
      if (s == task.goal) {
        nv[s] = 0.0;
        continue;
      }
      double best = -1e300;
      for (ActionId a = 0; a < mdp.num_actions(); ++a) {
        const StateId n = mdp.transition(s, a);
        best = std::max(best, task.reward(n) + v[n]);
      }
      nv[s] = best;
    }
    v.swap(nv);
  }
  return v[task.start];
}

/// Expected return of the uniform-random policy from the start, by exact DP.
inline double reach_avoid_random_return(const GridMdp& mdp, const ReachAvoidTask& task) {
  Vec v(mdp.num_states(), 0.0), nv(mdp.num_states());
  const double w = 1.0 / static_cast<double>(mdp.num_actions());
  for (int t = 0; t < task.horizon; ++t) {
    for (StateId s = 0; s < mdp.num_states(); ++s) {
      nv[s] = 0.0;
      if (s == task.goal) continue;
      for (ActionId a = 0; a < mdp.num_actions(); ++a) {
        const StateId n = mdp.transition(s, a);
        nv[s] += w * (task.reward(n) + v[n]);
      }
    }
    v.swap(nv);
  }
  return v[task.start];
}

/// (R - R_random) / (R_opt - R_random): 1 is optimal, 0 is no better than chance.
inline double normalized_return(double r, double r_random, double r_opt) {
  if (!(r_opt > r_random)) throw Error("normalized_return: optimal must exceed random");
  return (r - r_random) / (r_opt - r_random);
}

struct FeatureLearnerConfig {
  double learning_rate = 0.05;
  double discount = 0.99;
  double epsilon = 0.1;
  double final_epsilon = 0.1;  // linear schedule from epsilon to final_epsilon
  double lr_decay = 0.0;       // step size learning_rate / (1 + lr_decay * episode)
  int episodes = 300;
  int eval_every = 25;
};

/// Linear Q(s,a) = w_a . [phi(s), 1]; phi is frozen and only the weights learn.
class LinearQ {
public:
  LinearQ(std::size_t feature_dim, std::size_t actions)
      : dim_(feature_dim + 1), na_(actions), w_(dim_ * actions, 0.0) {}

  double q(std::span<const double> phi, ActionId a) const {
    double v = w_[a * dim_ + dim_ - 1];
    for (std::size_t i = 0; i + 1 < dim_; ++i) v += w_[a * dim_ + i] * phi[i];
    return v;
  }
  ActionId greedy(std::span<const double> phi) const {
    ActionId best = 0;
    for (ActionId a = 1; a < na_; ++a)
      if (q(phi, a) > q(phi, best)) best = a;
    return best;
  }
  double max_q(std::span<const double> phi) const {
    double m = q(phi, 0);
    for (ActionId a = 1; a < na_; ++a) m = std::max(m, q(phi, a));
    return m;
  }
  void update(std::span<const double> phi, ActionId a, double td_error, double lr) {
    for (std::size_t i = 0; i + 1 < dim_; ++i) w_[a * dim_ + i] += lr * td_error * phi[i];
    w_[a * dim_ + dim_ - 1] += lr * td_error;
  }
  std::span<const double> weights() const noexcept { return w_; }

private:
  std::size_t dim_, na_;
  Vec w_;
};

/// Semi-gradient Q-learning over frozen encoder features. The curve reports
/// the greedy return from the task start; success_rate is 1 when the greedy
/// path reaches the goal.
inline LearningCurve train_feature_policy(const GridMdp& mdp, const ReachAvoidTask& task,
                                          const Encoder& encoder, const FeatureLearnerConfig& cfg,
                                          std::uint64_t seed) {
  const LatentTable phi(encoder, mdp);
  LinearQ q(encoder.latent_dim(), mdp.num_actions());
  Rng rng(derive_seed(seed, "features"));
  LearningCurve curve;
  curve.seed = seed;
  auto evaluate = [&](int ep) {
    std::vector<StateId> path;
    const double ret =
        reach_avoid_return(mdp, task, [&](StateId s) { return q.greedy(phi[s]); }, &path);
    curve.points.push_back({ep, ret, path.back() == task.goal ? 1.0 : 0.0});
  };
  for (int ep = 1; ep <= cfg.episodes; ++ep) {
    const double frac = cfg.episodes > 1 ? static_cast<double>(ep - 1) / (cfg.episodes - 1) : 0.0;
    const double eps = cfg.epsilon + (cfg.final_epsilon - cfg.epsilon) * frac;
    const double lr = cfg.learning_rate / (1.0 + cfg.lr_decay * (ep - 1));
    StateId s = task.start;
    for (int t = 0; t < task.horizon && s != task.goal; ++t) {
      const ActionId a = rng.uniform() < eps ? rng.below(mdp.num_actions()) : q.greedy(phi[s]);
      const StateId n = mdp.transition(s, a);
      const double r = task.reward(n);
      const double target = n == task.goal ? r : r + cfg.discount * q.max_q(phi[n]);
      const double td = target - q.q(phi[s], a);
      q.update(phi[s], a, td, lr);
      if (!std::isfinite(td)) throw NumericError("linear Q-learning diverged");
      s = n;
    }
    if (ep % cfg.eval_every == 0 || ep == cfg.episodes) evaluate(ep);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Hierarchical control

enum class MetaKind { latent_gaussian, cluster_categorical };

struct MetaAction {
  std::size_t cluster = 0;  // categorical
  Vec u;                    // gaussian, in normalized latent units
};

/// High-level policy over (state features ++ checkpoint one-hot). Categorical
/// kind emits cluster logits; Gaussian kind emits (mean, log sigma) of a
/// normalized latent u, mapped to latent space by z = offset + scale * u.
class MetaPolicy {
public:
  MetaPolicy(MetaKind kind, std::size_t input_dim, std::size_t action_dim,
             std::vector<std::size_t> hidden, std::uint64_t seed, int meta_horizon = 10)
      : kind_(kind), action_dim_(action_dim), meta_horizon_(meta_horizon) {
    std::vector<std::size_t> sizes{input_dim};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(kind == MetaKind::latent_gaussian ? 2 * action_dim : action_dim);
    net_ = Mlp({sizes, Activation::tanh}, seed);
    // Start from a uniform categorical / unit-variance Gaussian centred at 0.
    const std::size_t last = net_.num_layers() - 1;
    for (double& w : net_.weights(last)) w *= 0.01;
    offset_.assign(action_dim, 0.0);
    scale_.assign(action_dim, 1.0);
  }

  MetaKind kind() const noexcept { return kind_; }
  std::size_t action_dim() const noexcept { return action_dim_; }
  int meta_horizon() const noexcept { return meta_horizon_; }
  Mlp& net() noexcept { return net_; }
  const Mlp& net() const noexcept { return net_; }

  void set_latent_frame(Vec offset, Vec scale) {
    offset_ = std::move(offset);
    scale_ = std::move(scale);
  }
  Vec to_latent(std::span<const double> u) const {
    Vec z(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) z[i] = offset_[i] + scale_[i] * u[i];
    return z;
  }

  MetaAction sample(std::span<const double> input, Rng& rng) const {
    const Vec h = net_.forward(input);
    MetaAction act;
    if (kind_ == MetaKind::cluster_categorical) {
      act.cluster = rng.categorical(softmax(h));
    } else {
      act.u.resize(action_dim_);
      for (std::size_t i = 0; i < action_dim_; ++i)
        act.u[i] = h[i] + std::exp(h[action_dim_ + i]) * rng.normal();
    }
    return act;
  }

  double log_prob(std::span<const double> input, const MetaAction& act) const {
    const Vec h = net_.forward(input);
    if (kind_ == MetaKind::cluster_categorical) return h[act.cluster] - log_sum_exp(h);
    double lp = 0.0;
    for (std::size_t i = 0; i < action_dim_; ++i) {
      const double ls = h[action_dim_ + i];
      const double e = (act.u[i] - h[i]) / std::exp(ls);
      lp += -0.5 * e * e - ls - 0.5 * std::log(2.0 * M_PI);
    }
    return lp;
  }

  /// grads += weight * d log pi(act | input) / d params
  void accumulate_log_prob_grad(std::span<const double> input, const MetaAction& act,
                                double weight) {
    Mlp::Trace t;
    const Vec h = net_.forward(input, t);
    Vec g(h.size(), 0.0);
    if (kind_ == MetaKind::cluster_categorical) {
      const Vec p = softmax(h);
      for (std::size_t i = 0; i < h.size(); ++i)
        g[i] = weight * ((i == act.cluster ? 1.0 : 0.0) - p[i]);
    } else {
      for (std::size_t i = 0; i < action_dim_; ++i) {
        const double sigma = std::exp(h[action_dim_ + i]);
        const double e = (act.u[i] - h[i]) / sigma;
        g[i] = weight * e / sigma;
        g[action_dim_ + i] = weight * (e * e - 1.0);
      }
    }
    net_.backward(t, g);
  }

private:
  MetaKind kind_;
  std::size_t action_dim_;
  int meta_horizon_;
  Mlp net_;
  Vec offset_, scale_;
};

enum class CheckpointKind { rooms, waypoints };

struct HrlTask {
  CheckpointKind kind = CheckpointKind::rooms;
  std::vector<std::size_t> checkpoints;  // room ids or waypoint StateIds
  StateId start = 0;
  int meta_steps = 16;      // meta-step budget per episode
  int meta_horizon = 10;    // low-level steps per meta-step
  int waypoint_radius = 1;  // Chebyshev radius counting as reaching a waypoint

  std::size_t input_dim(const GridMdp& mdp) const { return mdp.feature_dim() + checkpoints.size(); }

  Vec observe(const GridMdp& mdp, StateId s, std::size_t checkpoint) const {
    return concat(mdp.features(s), one_hot(checkpoint, checkpoints.size()));
  }

  bool reached(const GridMdp& mdp, StateId s, std::size_t checkpoint) const {
    if (kind == CheckpointKind::rooms) return static_cast<std::size_t>(mdp.room_of(s)) == checkpoints[checkpoint];
    const Cell a = mdp.cell_of(s), b = mdp.cell_of(checkpoints[checkpoint]);
    return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)) <= waypoint_radius;
  }
};

/// Room sequence in which consecutive checkpoints differ and the first differs
/// from the start room.
inline HrlTask make_room_sequence(const GridMdp& mdp, std::size_t length, StateId start,
                                  std::uint64_t seed) {
  if (!mdp.has_rooms() || mdp.num_rooms() < 2) throw Error("room sequence needs >= 2 rooms");
  Rng rng(seed);
  HrlTask t;
  t.kind = CheckpointKind::rooms;
  t.start = start;
  std::size_t prev = static_cast<std::size_t>(mdp.room_of(start));
  const auto rooms = static_cast<std::size_t>(mdp.num_rooms());
  for (std::size_t i = 0; i < length; ++i) {
    std::size_t r = rng.below(rooms - 1);
    if (r >= prev) ++r;
    t.checkpoints.push_back(r);
    prev = r;
  }
  return t;
}

/// Waypoints drawn uniformly (consecutive ones distinct and outside each
/// other's reach radius).
inline HrlTask make_waypoints(const GridMdp& mdp, std::size_t length, StateId start,
                              std::uint64_t seed, int radius = 1) {
  Rng rng(seed);
  HrlTask t;
  t.kind = CheckpointKind::waypoints;
  t.start = start;
  t.waypoint_radius = radius;
  StateId prev = start;
  for (std::size_t i = 0; i < length; ++i) {
    StateId w;
    Cell a, b;
    do {
      w = rng.below(mdp.num_states());
      a = mdp.cell_of(w);
      b = mdp.cell_of(prev);
    } while (std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)) <= radius);
    t.checkpoints.push_back(w);
    prev = w;
  }
  return t;
}

/// How meta actions become low-level goals.
struct ClusterCommander {
  std::vector<std::vector<StateId>> members;  // cluster -> member states

  static ClusterCommander from_kmeans(const KMeansModel& km, std::span<const StateId> states) {
    ClusterCommander c;
    c.members.resize(km.k);
    for (std::size_t i = 0; i < states.size(); ++i) c.members[km.assignment[i]].push_back(states[i]);
    return c;
  }
};

struct LatentCommander {
  const Decoder* decoder = nullptr;
};

using Commander = std::variant<ClusterCommander, LatentCommander>;

struct MetaStep {
  Vec input;
  MetaAction action;
  StateId goal = 0;
  double reward = 0.0;
};

struct MetaEpisode {
  double total_return = 0.0;
  std::vector<MetaStep> steps;
  Vec log_probs;
  Vec low_level_rewards;
  int clamped = 0;
  std::size_t checkpoints_reached = 0;
};

/// One episode of meta control: each meta-step picks a goal and runs the
/// goal-conditioned policy toward it for meta_horizon steps (stopping early
/// at the goal). With `random_actions` the meta-policy is replaced by a
/// uniform cluster choice, or u ~ U[-1,1]^d for the latent kind.
inline MetaEpisode run_meta_episode(const MetaPolicy& meta, const SoftGoalPolicy& gcp,
                                    const GridMdp& mdp, const Commander& commander,
                                    const HrlTask& task, Rng& rng, bool random_actions = false) {
  MetaEpisode ep;
  if (task.meta_horizon <= 0) return ep;
  if (meta.kind() == MetaKind::cluster_categorical &&
      !std::holds_alternative<ClusterCommander>(commander))
    throw Error("cluster meta-policy needs a cluster commander");
  if (meta.kind() == MetaKind::latent_gaussian) {
    if (!std::holds_alternative<LatentCommander>(commander) ||
        !std::get<LatentCommander>(commander).decoder)
      throw Error("latent meta-policy needs a decoder");
  }
  StateId s = task.start;
  std::size_t cp = 0;
  for (int m = 0; m < task.meta_steps && cp < task.checkpoints.size(); ++m) {
    MetaStep step;
    step.input = task.observe(mdp, s, cp);
    if (random_actions) {
      if (meta.kind() == MetaKind::cluster_categorical) {
        step.action.cluster = rng.below(meta.action_dim());
      } else {
        step.action.u.resize(meta.action_dim());
        for (double& u : step.action.u) u = rng.uniform(-1.0, 1.0);
      }
    } else {
      step.action = meta.sample(step.input, rng);
    }
    ep.log_probs.push_back(meta.log_prob(step.input, step.action));

    if (meta.kind() == MetaKind::cluster_categorical) {
      const auto& members = std::get<ClusterCommander>(commander).members.at(step.action.cluster);
      if (members.empty()) throw Error("empty cluster commanded");
      step.goal = members[rng.below(members.size())];
    } else {
      const Decoder& dec = *std::get<LatentCommander>(commander).decoder;
      bool clamped = false;
      step.goal = snap_to_state(mdp, dec.decode(meta.to_latent(step.action.u)), &clamped);
      ep.clamped += clamped ? 1 : 0;
    }

    for (int t = 0; t < task.meta_horizon && s != step.goal; ++t) {
      s = mdp.transition(s, rng.categorical(gcp.action_distribution(s, step.goal)));
      double r = 0.0;
      if (cp < task.checkpoints.size() && task.reached(mdp, s, cp)) {
        r = 1.0;
        ++cp;
      }
      ep.low_level_rewards.push_back(r);
      step.reward += r;
    }
    ep.total_return += step.reward;
    ep.steps.push_back(std::move(step));
  }
  ep.checkpoints_reached = cp;
  return ep;
}

struct MetaTrainConfig {
  int iterations = 200;
  int batch_episodes = 10;
  double learning_rate = 1e-2;
  double baseline_decay = 0.9;
};

/// REINFORCE with reward-to-go and a per-meta-step moving-average baseline.
/// Returns the curve of mean return per iteration.
inline LearningCurve train_meta(MetaPolicy& meta, const SoftGoalPolicy& gcp, const GridMdp& mdp,
                                const Commander& commander, const HrlTask& task,
                                const MetaTrainConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "meta"));
  Adam opt(meta.net().param_count(), AdamConfig{cfg.learning_rate});
  Vec baseline(static_cast<std::size_t>(std::max(task.meta_steps, 0)), 0.0);
  bool baseline_ready = false;
  LearningCurve curve;
  curve.seed = seed;
  for (int it = 1; it <= cfg.iterations; ++it) {
    std::vector<MetaEpisode> batch;
    for (int b = 0; b < cfg.batch_episodes; ++b)
      batch.push_back(run_meta_episode(meta, gcp, mdp, commander, task, rng));
    Vec mean_rtg(baseline.size(), 0.0);
    meta.net().zero_grad();
    double mean_return = 0.0, success = 0.0;
    for (const auto& ep : batch) {
      mean_return += ep.total_return / cfg.batch_episodes;
      success += (ep.checkpoints_reached == task.checkpoints.size() ? 1.0 : 0.0) / cfg.batch_episodes;
      double rtg = 0.0;
      for (std::size_t t = ep.steps.size(); t-- > 0;) {
        rtg += ep.steps[t].reward;
        mean_rtg[t] += rtg / cfg.batch_episodes;
        const double adv = rtg - (baseline_ready ? baseline[t] : 0.0);
        // Ascent on the return: Adam descends, so feed the negated gradient.
        meta.accumulate_log_prob_grad(ep.steps[t].input, ep.steps[t].action,
                                      -adv / cfg.batch_episodes);
      }
    }
    opt.step(meta.net());
    if (!meta.net().all_finite()) throw NumericError("meta-policy parameters became non-finite");
    for (std::size_t t = 0; t < baseline.size(); ++t)
      baseline[t] = baseline_ready ? cfg.baseline_decay * baseline[t] +
                                         (1.0 - cfg.baseline_decay) * mean_rtg[t]
                                   : mean_rtg[t];
    baseline_ready = true;
    curve.points.push_back({it, mean_return, success});
  }
  return curve;
}

/// Monte-Carlo mean return of the uniform-random meta-policy.
inline double random_meta_baseline(const MetaPolicy& meta, const SoftGoalPolicy& gcp,
                                   const GridMdp& mdp, const Commander& commander,
                                   const HrlTask& task, int episodes, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "meta/random"));
  double total = 0.0;
  for (int e = 0; e < episodes; ++e)
    total += run_meta_episode(meta, gcp, mdp, commander, task, rng, true).total_return;
  return total / episodes;
}

/// REINFORCE on a stateless multi-armed bandit with Bernoulli arms, using the
/// categorical meta-policy machinery. Returns the greedy arm after training.
inline std::size_t reinforce_bandit(std::span<const double> arm_probs, int iterations,
                                    int batch, double lr, std::uint64_t seed) {
  MetaPolicy pol(MetaKind::cluster_categorical, 1, arm_probs.size(), {8}, seed);
  Rng rng(derive_seed(seed, "bandit"));
  Adam opt(pol.net().param_count(), AdamConfig{lr});
  const Vec input{1.0};
  double baseline = 0.0;
  for (int it = 0; it < iterations; ++it) {
    pol.net().zero_grad();
    double mean = 0.0;
    std::vector<std::pair<MetaAction, double>> samples;
    for (int b = 0; b < batch; ++b) {
      MetaAction a = pol.sample(input, rng);
      const double r = rng.uniform() < arm_probs[a.cluster] ? 1.0 : 0.0;
      samples.emplace_back(a, r);
      mean += r / batch;
    }
    for (auto& [a, r] : samples) pol.accumulate_log_prob_grad(input, a, -(r - baseline) / batch);
    opt.step(pol.net());
    baseline = it == 0 ? mean : 0.9 * baseline + 0.1 * mean;
  }
  const Vec logits = pol.net().forward(input);
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

}  // namespace arclab
