#pragma once

#include <concepts>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arclab/core.hpp"
#include "arclab/gridworld.hpp"

namespace arclab {

/// A finite deterministic MDP with integer states and actions.
template <class M>
concept DeterministicMdp = requires(const M& m, StateId s, ActionId a) {
  { m.num_states() } -> std::convertible_to<std::size_t>;
  { m.num_actions() } -> std::convertible_to<std::size_t>;
  { m.transition(s, a) } -> std::convertible_to<StateId>;
};

/// Explicit transition table; handy for small hand-built MDPs.
struct TableMdp {
  std::size_t states = 0;
  std::size_t actions = 0;
  std::vector<StateId> next;  // next[s * actions + a]

  std::size_t num_states() const noexcept { return states; }
  std::size_t num_actions() const noexcept { return actions; }
  StateId transition(StateId s, ActionId a) const { return next.at(s * actions + a); }
};

struct SoftParams {
  double temperature = 0.25;
  double discount = 0.95;
  double tol = 1e-9;
  int max_iters = 100000;
  double step_reward = -1.0;
  double goal_reward = 0.0;
};

inline void validate(const SoftParams& p) {
  if (!(p.temperature > 0.0)) throw ConfigError("soft policy: temperature must be > 0");
  if (!(p.discount > 0.0 && p.discount < 1.0))
    throw ConfigError("soft policy: discount must lie in (0,1)");
  if (!(p.tol > 0.0)) throw ConfigError("soft policy: tol must be > 0");
  if (p.max_iters < 1) throw ConfigError("soft policy: max_iters must be >= 1");
}

/// Soft Q and V for one goal. q is |S|x|A| row-major.
struct GoalTables {
  StateId goal = 0;
  std::size_t num_actions = 0;
  Vec q;
  Vec v;
  double residual = 0.0;
  int iterations = 0;

  double q_at(StateId s, ActionId a) const { return q[s * num_actions + a]; }
};

/// Soft Bellman backup for one state, writing Q(s,.) and returning V(s).
template <DeterministicMdp M>
double soft_backup(const M& mdp, StateId s, const SoftParams& p,
                   std::span<const double> v, std::span<double> q_row) {
  const std::size_t na = mdp.num_actions();
  for (ActionId a = 0; a < na; ++a) {
    const StateId n = static_cast<StateId>(mdp.transition(s, a));
    q_row[a] = p.step_reward + p.discount * v[n];
  }
  double m = q_row[0];
  for (ActionId a = 1; a < na; ++a) m = std::max(m, q_row[a]);
  double acc = 0.0;
  for (ActionId a = 0; a < na; ++a) acc += std::exp((q_row[a] - m) / p.temperature);
  return m + p.temperature * std::log(acc);
}

/// Jacobi soft value iteration toward an absorbing goal. The goal's value is
/// pinned to goal_reward and its Q row set so that log-sum-exp reproduces it,
/// which makes the action distribution at the goal uniform.
template <DeterministicMdp M>
GoalTables soft_value_iteration(const M& mdp, StateId goal, const SoftParams& p,
                                std::span<const double> v_init = {}) {
  validate(p);
  const std::size_t ns = mdp.num_states();
  const std::size_t na = mdp.num_actions();
  if (goal >= ns) throw Error("soft_value_iteration: goal out of range");
  if (na == 0) throw Error("soft_value_iteration: no actions");

  GoalTables t;
  t.goal = goal;
  t.num_actions = na;
  t.q.assign(ns * na, 0.0);
  t.v.assign(ns, 0.0);
  if (!v_init.empty()) {
    if (v_init.size() != ns) throw Error("soft_value_iteration: v_init size mismatch");
    t.v.assign(v_init.begin(), v_init.end());
  }
  t.v[goal] = p.goal_reward;

  Vec next_v(ns);
  double residual = 0.0;
  for (int it = 1; it <= p.max_iters; ++it) {
    residual = 0.0;
    for (StateId s = 0; s < ns; ++s) {
      if (s == goal) {
        next_v[s] = p.goal_reward;
        continue;
      }
      next_v[s] = soft_backup(mdp, s, p, t.v, std::span(t.q).subspan(s * na, na));
      residual = std::max(residual, std::abs(next_v[s] - t.v[s]));
    }
    t.v.swap(next_v);
    if (residual < p.tol) {
      t.iterations = it;
      break;
    }
    if (it == p.max_iters)
      throw ConvergenceError("soft value iteration did not converge in " +
                                 std::to_string(p.max_iters) +
                                 " iterations (residual " + format_double(residual) + ")",
                             residual);
  }
  // Final Q consistent with the returned V.
  for (StateId s = 0; s < ns; ++s) {
    if (s == goal) continue;
    soft_backup(mdp, s, p, t.v, std::span(t.q).subspan(s * na, na));
  }
  const double goal_q = p.goal_reward - p.temperature * std::log(static_cast<double>(na));
  for (ActionId a = 0; a < na; ++a) t.q[goal * na + a] = goal_q;
  t.residual = residual;
  return t;
}

/// max over states of |V(s) - soft_backup(V)(s)|, excluding the pinned goal.
template <DeterministicMdp M>
double bellman_residual(const M& mdp, const GoalTables& t, const SoftParams& p) {
  Vec row(mdp.num_actions());
  double r = 0.0;
  for (StateId s = 0; s < mdp.num_states(); ++s) {
    if (s == t.goal) {
      r = std::max(r, std::abs(t.v[s] - p.goal_reward));
      continue;
    }
    r = std::max(r, std::abs(t.v[s] - soft_backup(mdp, s, p, t.v, row)));
  }
  return r;
}

// ---------------------------------------------------------------------------

struct Trajectory {
  std::vector<StateId> states;
  std::vector<ActionId> actions;
  StateId goal = 0;
  bool reached = false;
};

/// Tabular maximum-entropy goal-conditioned policy over every goal of an MDP.
class SoftGoalPolicy {
public:
  SoftGoalPolicy() = default;
  SoftGoalPolicy(SoftParams params, std::size_t num_states, std::size_t num_actions,
                 std::uint64_t env_hash)
      : params_(params),
        num_states_(num_states),
        num_actions_(num_actions),
        env_hash_(env_hash),
        tables_(num_states) {}

  template <DeterministicMdp M>
  static SoftGoalPolicy solve(const M& mdp, const SoftParams& params, std::uint64_t env_hash = 0) {
    SoftGoalPolicy pol(params, mdp.num_states(), mdp.num_actions(), env_hash);
    for (StateId g = 0; g < mdp.num_states(); ++g)
      pol.tables_[g] = soft_value_iteration(mdp, g, params);
    return pol;
  }

  static SoftGoalPolicy solve(const GridMdp& mdp, const SoftParams& params) {
    return solve<GridMdp>(mdp, params, mdp.hash());
  }

  const SoftParams& params() const noexcept { return params_; }
  double temperature() const noexcept { return params_.temperature; }
  std::size_t num_states() const noexcept { return num_states_; }
  std::size_t num_actions() const noexcept { return num_actions_; }
  std::uint64_t env_hash() const noexcept { return env_hash_; }

  bool has_goal(StateId g) const { return g < tables_.size() && tables_[g].has_value(); }

  const GoalTables& tables(StateId g) const {
    if (!has_goal(g)) throw Error("no soft tables for goal " + std::to_string(g));
    return *tables_[g];
  }

  void set_tables(GoalTables t) {
    if (t.goal >= tables_.size()) throw Error("set_tables: goal out of range");
    tables_[t.goal] = std::move(t);
  }

  double value(StateId s, StateId g) const { return tables(g).v.at(s); }

  /// log pi(a|s,g) for every action.
  Vec log_action_distribution(StateId s, StateId g) const {
    const GoalTables& t = tables(g);
    if (s >= num_states_) throw Error("action_distribution: state out of range");
    Vec lp(num_actions_);
    for (ActionId a = 0; a < num_actions_; ++a) lp[a] = t.q_at(s, a) / params_.temperature;
    const double z = log_sum_exp(lp);
    for (double& x : lp) x -= z;
    return lp;
  }

  /// pi(.|s,g) = softmax(Q(s,.)/alpha); uniform at s == g.
  Vec action_distribution(StateId s, StateId g) const {
    if (s == g) {
      tables(g);
      return Vec(num_actions_, 1.0 / static_cast<double>(num_actions_));
    }
    Vec p = log_action_distribution(s, g);
    for (double& x : p) x = std::exp(x);
    return p;
  }

  /// Cache key for persisted tables: (environment, temperature, discount).
  std::string cache_key() const {
    return hex64(env_hash_) + "-a" + format_double(params_.temperature) + "-g" +
           format_double(params_.discount);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = "arclab.soft_policy";
    j["version"] = 1;
    j["env_hash"] = hex64(env_hash_);
    j["temperature"] = params_.temperature;
    j["discount"] = params_.discount;
    j["tol"] = params_.tol;
    j["step_reward"] = params_.step_reward;
    j["goal_reward"] = params_.goal_reward;
    j["num_states"] = num_states_;
    j["num_actions"] = num_actions_;
    auto& goals = j["goals"] = nlohmann::json::array();
    for (const auto& t : tables_) {
      if (!t) continue;
      goals.push_back({{"goal", t->goal},
                       {"iterations", t->iterations},
                       {"residual", t->residual},
                       {"v", t->v},
                       {"q", t->q}});
    }
    return j;
  }

  static SoftGoalPolicy from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "arclab.soft_policy" || j.value("version", 0) != 1)
      throw Error("unrecognized soft policy artifact");
    SoftParams p;
    p.temperature = j.at("temperature").get<double>();
    p.discount = j.at("discount").get<double>();
    p.tol = j.at("tol").get<double>();
    p.step_reward = j.at("step_reward").get<double>();
    p.goal_reward = j.at("goal_reward").get<double>();
    const std::uint64_t hash = std::stoull(j.at("env_hash").get<std::string>(), nullptr, 16);
    SoftGoalPolicy pol(p, j.at("num_states").get<std::size_t>(),
                       j.at("num_actions").get<std::size_t>(), hash);
    for (const auto& g : j.at("goals")) {
      GoalTables t;
      t.goal = g.at("goal").get<StateId>();
      t.num_actions = pol.num_actions_;
      t.iterations = g.at("iterations").get<int>();
      t.residual = g.at("residual").get<double>();
      t.v = g.at("v").get<Vec>();
      t.q = g.at("q").get<Vec>();
      pol.set_tables(std::move(t));
    }
    return pol;
  }

private:
  SoftParams params_;
  std::size_t num_states_ = 0;
  std::size_t num_actions_ = 0;
  std::uint64_t env_hash_ = 0;
  std::vector<std::optional<GoalTables>> tables_;
};

template <DeterministicMdp M>
Trajectory rollout(const SoftGoalPolicy& policy, const M& mdp, StateId s0, StateId goal,
                   int horizon, Rng& rng) {
  Trajectory tr;
  tr.goal = goal;
  tr.states.push_back(s0);
  StateId s = s0;
  if (s == goal) {
    tr.reached = true;
    return tr;
  }
  for (int t = 0; t < horizon; ++t) {
    const Vec p = policy.action_distribution(s, goal);
    const ActionId a = rng.categorical(p);
    s = mdp.transition(s, a);
    tr.actions.push_back(a);
    tr.states.push_back(s);
    if (s == goal) {
      tr.reached = true;
      break;
    }
  }
  return tr;
}

template <DeterministicMdp M>
Trajectory rollout(const SoftGoalPolicy& policy, const M& mdp, StateId s0, StateId goal,
                   int horizon, std::uint64_t seed) {
  Rng rng(seed);
  return rollout(policy, mdp, s0, goal, horizon, rng);
}

/// Fraction of rollouts reaching their goal, over uniformly drawn (start, goal) pairs.
template <DeterministicMdp M>
double success_rate(const SoftGoalPolicy& policy, const M& mdp, int trials, int horizon,
                    std::uint64_t seed) {
  if (trials < 1) throw Error("success_rate: trials must be >= 1");
  Rng rng(seed);
  int hits = 0;
  for (int i = 0; i < trials; ++i) {
    const StateId s0 = rng.below(mdp.num_states());
    const StateId g = rng.below(mdp.num_states());
    hits += rollout(policy, mdp, s0, g, horizon, rng).reached ? 1 : 0;
  }
  return static_cast<double>(hits) / trials;
}

inline double policy_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0) h -= x * std::log(x);
  return h;
}

}  // namespace arclab
