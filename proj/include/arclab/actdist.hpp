#pragma once

#include <set>
#include <string>
#include <vector>

#include "arclab/core.hpp"
#include "arclab/gridworld.hpp"
#include "arclab/softgcp.hpp"

namespace arclab {

enum class KlMode { symmetric, forward };
enum class ExpectationMode { exact_all_states, dataset_states };

inline std::string to_string(KlMode m) { return m == KlMode::symmetric ? "symmetric" : "forward"; }
inline std::string to_string(ExpectationMode m) {
  return m == ExpectationMode::exact_all_states ? "exact_all_states" : "dataset_states";
}
inline KlMode kl_mode_from_string(const std::string& s) {
  if (s == "symmetric") return KlMode::symmetric;
  if (s == "forward") return KlMode::forward;
  throw ConfigError("unknown kl_mode '" + s + "'");
}

inline void require_positive_simplex(std::span<const double> p, const char* who) {
  for (double x : p)
    if (!(x > 0.0))
      throw NumericError(std::string(who) +
                         ": zero or negative probability; soft policies are strictly positive");
}

inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error("kl_divergence: size mismatch");
  require_positive_simplex(p, "kl_divergence");
  require_positive_simplex(q, "kl_divergence");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * std::log(p[i] / q[i]);
  return std::max(s, 0.0);
}

/// KL(p||q) + KL(q||p) in nats.
inline double symmetric_kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error("symmetric_kl: size mismatch");
  require_positive_simplex(p, "symmetric_kl");
  require_positive_simplex(q, "symmetric_kl");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - q[i]) * std::log(p[i] / q[i]);
  return std::max(s, 0.0);
}

/// Mean over `eval_states` of the divergence between pi(.|s,s1) and pi(.|s,s2).
inline double actionable_distance(const SoftGoalPolicy& policy, StateId s1, StateId s2,
                                  std::span<const StateId> eval_states,
                                  KlMode mode = KlMode::symmetric) {
  if (eval_states.empty()) throw Error("actionable_distance: empty evaluation state set");
  if (s1 == s2) {
    policy.tables(s1);
    return 0.0;
  }
  double total = 0.0;
  for (StateId s : eval_states) {
    const Vec p = policy.action_distribution(s, s1);
    const Vec q = policy.action_distribution(s, s2);
    total += mode == KlMode::symmetric ? symmetric_kl(p, q) : kl_divergence(p, q);
  }
  return total / static_cast<double>(eval_states.size());
}

struct DistanceMeta {
  double temperature = 0.0;
  double discount = 0.0;
  std::uint64_t env_hash = 0;
  ExpectationMode mode = ExpectationMode::exact_all_states;
  KlMode kl_mode = KlMode::symmetric;

  std::string cache_key() const {
    return hex64(env_hash) + "-a" + format_double(temperature) + "-g" + format_double(discount) +
           "-" + to_string(mode) + "-" + to_string(kl_mode);
  }
};

/// Symmetric, zero-diagonal, nonnegative matrix of actionable distances.
struct ActionableDistanceMatrix {
  std::vector<StateId> states;
  Matrix d;
  DistanceMeta meta;

  std::size_t size() const noexcept { return states.size(); }

  /// Distance by StateId (requires both states present).
  double at(StateId a, StateId b) const { return d(position(a), position(b)); }

  std::size_t position(StateId s) const {
    auto it = std::lower_bound(states.begin(), states.end(), s);
    if (it == states.end() || *it != s)
      throw Error("distance matrix has no entry for state " + std::to_string(s));
    return static_cast<std::size_t>(it - states.begin());
  }

  double mean_offdiagonal() const {
    const std::size_t n = size();
    if (n < 2) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += d(i, j);
    return s / static_cast<double>(n * (n - 1));
  }

  /// Fraction of ordered triples (i,j,k), distinct, with d(i,k) > d(i,j) + d(j,k).
  double triangle_violation_rate(double slack = 1e-12) const {
    const std::size_t n = size();
    std::size_t bad = 0;
    std::size_t total = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = i + 1; k < n; ++k)
        for (std::size_t j = 0; j < n; ++j) {
          if (j == i || j == k) continue;
          ++total;
          if (d(i, k) > d(i, j) + d(j, k) + slack) ++bad;
        }
    return total ? static_cast<double>(bad) / static_cast<double>(total) : 0.0;
  }

  /// Header row of state indices, then one row per state.
  std::string to_csv() const {
    std::string out = "state";
    for (StateId s : states) out += "," + std::to_string(s);
    out += "\n";
    for (std::size_t i = 0; i < size(); ++i) {
      out += std::to_string(states[i]);
      for (std::size_t j = 0; j < size(); ++j) out += "," + format_double(d(i, j));
      out += "\n";
    }
    return out;
  }

  static ActionableDistanceMatrix from_csv(std::string_view text, DistanceMeta meta = {}) {
    ActionableDistanceMatrix m;
    m.meta = meta;
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line)) throw Error("distance CSV: missing header");
    std::istringstream header(line);
    std::string cell;
    std::getline(header, cell, ',');
    while (std::getline(header, cell, ',')) m.states.push_back(std::stoull(cell));
    m.d = Matrix(m.states.size(), m.states.size());
    for (std::size_t i = 0; i < m.states.size(); ++i) {
      if (!std::getline(in, line)) throw Error("distance CSV: truncated");
      std::istringstream row(line);
      std::getline(row, cell, ',');
      for (std::size_t j = 0; j < m.states.size(); ++j) {
        if (!std::getline(row, cell, ',')) throw Error("distance CSV: short row");
        m.d(i, j) = std::stod(cell);
      }
    }
    return m;
  }
};

struct DistanceOptions {
  ExpectationMode mode = ExpectationMode::exact_all_states;
  KlMode kl_mode = KlMode::symmetric;
  /// Ceiling on |S|^3 * |A| work for the exact mode.
  double op_budget = 1e7;
  /// Expectation states for dataset mode (deduplicated internally).
  std::vector<StateId> dataset_states;
  /// Matrix rows/columns; empty means every state.
  std::vector<StateId> matrix_states;
};

/// Fills the full matrix. Each unordered pair is computed once and mirrored.
inline ActionableDistanceMatrix compute_distance_matrix(const SoftGoalPolicy& policy,
                                                        const DistanceOptions& opt = {}) {
  const std::size_t ns = policy.num_states();
  const std::size_t na = policy.num_actions();

  std::vector<StateId> eval;
  if (opt.mode == ExpectationMode::exact_all_states) {
    const double work = static_cast<double>(ns) * ns * ns * na;
    if (work > opt.op_budget)
      throw Error("exact actionable distance needs " + format_double(work) +
                  " operations, over the budget of " + format_double(opt.op_budget) +
                  "; use dataset mode or raise the budget");
    eval.resize(ns);
    std::iota(eval.begin(), eval.end(), StateId{0});
  } else {
    std::set<StateId> uniq(opt.dataset_states.begin(), opt.dataset_states.end());
    if (uniq.empty()) throw Error("dataset mode requires dataset states");
    eval.assign(uniq.begin(), uniq.end());
  }

  ActionableDistanceMatrix m;
  if (opt.matrix_states.empty()) {
    m.states.resize(ns);
    std::iota(m.states.begin(), m.states.end(), StateId{0});
  } else {
    std::set<StateId> uniq(opt.matrix_states.begin(), opt.matrix_states.end());
    m.states.assign(uniq.begin(), uniq.end());
  }
  m.meta = {policy.params().temperature, policy.params().discount, policy.env_hash(), opt.mode,
            opt.kl_mode};
  const std::size_t n = m.states.size();
  m.d = Matrix(n, n, 0.0);

  // Per-goal probability and log-probability tables over the evaluation states.
  std::vector<Vec> prob(n), logp(n);
  for (std::size_t i = 0; i < n; ++i) {
    prob[i].resize(eval.size() * na);
    logp[i].resize(eval.size() * na);
    for (std::size_t e = 0; e < eval.size(); ++e) {
      const Vec p = policy.action_distribution(eval[e], m.states[i]);
      require_positive_simplex(p, "compute_distance_matrix");
      for (ActionId a = 0; a < na; ++a) {
        prob[i][e * na + a] = p[a];
        logp[i][e * na + a] = std::log(p[a]);
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(eval.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double total = 0.0;
      const Vec& pi = prob[i];
      const Vec& pj = prob[j];
      const Vec& li = logp[i];
      const Vec& lj = logp[j];
      if (opt.kl_mode == KlMode::symmetric) {
        for (std::size_t k = 0; k < pi.size(); ++k) total += (pi[k] - pj[k]) * (li[k] - lj[k]);
      } else {
        for (std::size_t k = 0; k < pi.size(); ++k) total += pi[k] * (li[k] - lj[k]);
      }
      const double v = std::max(total * inv, 0.0);
      m.d(i, j) = v;
      m.d(j, i) = v;
    }
  return m;
}

}  // namespace arclab
