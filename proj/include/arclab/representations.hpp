#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arclab/actdist.hpp"
#include "arclab/core.hpp"
#include "arclab/gridworld.hpp"
#include "arclab/nncore.hpp"
#include "arclab/softgcp.hpp"

namespace arclab {

// ---------------------------------------------------------------------------
// Dataset

struct Transition {
  StateId state = 0;
  ActionId action = 0;
  StateId next = 0;
};

struct DatasetSource {
  double temperature = 0.0;
  double discount = 0.0;
  std::uint64_t env_hash = 0;
  int n_traj = 0;
  int horizon = 0;
  std::uint64_t seed = 0;
};

enum class Split { train, validation, all };

/// Rollouts of the goal-conditioned policy. Every fifth trajectory (20%) is
/// held out for validation.
struct TrajectoryDataset {
  std::vector<Trajectory> trajectories;
  DatasetSource source;

  static bool is_validation(std::size_t traj_index) { return traj_index % 5 == 4; }

  bool in_split(std::size_t i, Split split) const {
    return split == Split::all || (split == Split::validation) == is_validation(i);
  }

  std::vector<Transition> transitions(Split split = Split::all) const {
    std::vector<Transition> out;
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
      if (!in_split(i, split)) continue;
      const auto& tr = trajectories[i];
      for (std::size_t t = 0; t < tr.actions.size(); ++t)
        out.push_back({tr.states[t], tr.actions[t], tr.states[t + 1]});
    }
    return out;
  }

  /// Every visited state with multiplicity.
  std::vector<StateId> visits(Split split = Split::all) const {
    std::vector<StateId> out;
    for (std::size_t i = 0; i < trajectories.size(); ++i)
      if (in_split(i, split))
        out.insert(out.end(), trajectories[i].states.begin(), trajectories[i].states.end());
    return out;
  }

  /// Distinct visited states, sorted.
  std::vector<StateId> states(Split split = Split::all) const {
    const auto v = visits(split);
    std::set<StateId> uniq(v.begin(), v.end());
    return {uniq.begin(), uniq.end()};
  }

  std::uint64_t hash() const {
    std::string key;
    for (const auto& tr : trajectories) {
      key += std::to_string(tr.goal) + ":";
      for (auto s : tr.states) key += std::to_string(s) + ",";
      key += "|";
      for (auto a : tr.actions) key += std::to_string(a) + ",";
      key += tr.reached ? "R;" : "N;";
    }
    return fnv1a(key);
  }

  /// One row per transition: trajectory, step, state, action, next, goal, split.
  std::string to_csv() const {
    std::string out = "trajectory,step,state,action,next_state,goal,split\n";
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
      const auto& tr = trajectories[i];
      for (std::size_t t = 0; t < tr.actions.size(); ++t)
        out += std::to_string(i) + "," + std::to_string(t) + "," + std::to_string(tr.states[t]) +
               "," + std::to_string(tr.actions[t]) + "," + std::to_string(tr.states[t + 1]) + "," +
               std::to_string(tr.goal) + "," + (is_validation(i) ? "validation" : "train") + "\n";
    }
    return out;
  }
};

/// Uniform random (start, goal) pairs rolled out with the soft policy.
template <DeterministicMdp M>
TrajectoryDataset collect_dataset(const SoftGoalPolicy& policy, const M& mdp, int n_traj,
                                  int horizon, std::uint64_t seed) {
  if (n_traj < 1) throw Error("collect_dataset: n_traj must be >= 1");
  TrajectoryDataset ds;
  ds.source = {policy.params().temperature, policy.params().discount, policy.env_hash(), n_traj,
               horizon, seed};
  Rng rng(seed);
  for (int i = 0; i < n_traj; ++i) {
    const StateId s0 = rng.below(mdp.num_states());
    const StateId g = rng.below(mdp.num_states());
    ds.trajectories.push_back(rollout(policy, mdp, s0, g, horizon, rng));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Encoders

enum class RepresentationKind { arc, vae, slowness, predictive, inverse, identity };

inline std::string to_string(RepresentationKind k) {
  switch (k) {
    case RepresentationKind::arc: return "arc";
    case RepresentationKind::vae: return "vae";
    case RepresentationKind::slowness: return "slowness";
    case RepresentationKind::predictive: return "predictive";
    case RepresentationKind::inverse: return "inverse";
    case RepresentationKind::identity: return "identity";
  }
  return "?";
}

inline RepresentationKind representation_kind_from_string(const std::string& s) {
  for (auto k : {RepresentationKind::arc, RepresentationKind::vae, RepresentationKind::slowness,
                 RepresentationKind::predictive, RepresentationKind::inverse,
                 RepresentationKind::identity})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown representation kind '" + s + "'");
}

/// Maps state features to a latent vector. Variational kinds carry a network
/// emitting (mu, log sigma); encode() returns mu.
class Encoder {
public:
  static Encoder identity(std::size_t feature_dim) {
    Encoder e;
    e.kind_ = RepresentationKind::identity;
    e.feature_dim_ = feature_dim;
    e.latent_dim_ = feature_dim;
    return e;
  }

  Encoder(RepresentationKind kind, Mlp net, std::size_t latent_dim)
      : kind_(kind), feature_dim_(net.input_size()), latent_dim_(latent_dim), net_(std::move(net)) {
    const std::size_t expected = is_variational() ? 2 * latent_dim : latent_dim;
    if (net_->output_size() != expected) throw Error("Encoder: network output size mismatch");
  }

  RepresentationKind kind() const noexcept { return kind_; }
  std::size_t feature_dim() const noexcept { return feature_dim_; }
  std::size_t latent_dim() const noexcept { return latent_dim_; }
  bool is_variational() const noexcept {
    return kind_ == RepresentationKind::vae || kind_ == RepresentationKind::slowness;
  }
  const std::optional<Mlp>& net() const noexcept { return net_; }
  std::optional<Mlp>& net() noexcept { return net_; }

  Vec encode(std::span<const double> x) const {
    if (x.size() != feature_dim_) throw Error("Encoder: feature size mismatch");
    if (!net_) return {x.begin(), x.end()};
    Vec out = net_->forward(x);
    out.resize(latent_dim_);
    return out;
  }

  Vec encode_state(const GridMdp& mdp, StateId s) const { return encode(mdp.features(s)); }

  /// Row i is the latent of states[i].
  Matrix embed(const GridMdp& mdp, std::span<const StateId> states) const {
    Matrix z(states.size(), latent_dim_);
    for (std::size_t i = 0; i < states.size(); ++i) {
      const Vec v = encode_state(mdp, states[i]);
      std::copy(v.begin(), v.end(), z.row(i).begin());
    }
    return z;
  }

  /// Writes `<prefix>.json` (kind, dims, network manifest) and, for learned
  /// encoders, `<prefix>.bin` with the parameters.
  void save(const std::string& prefix) const {
    nlohmann::json j{{"format", "arclab.encoder"},
                     {"version", 1},
                     {"kind", to_string(kind_)},
                     {"feature_dim", feature_dim_},
                     {"latent_dim", latent_dim_}};
    if (net_) {
      j["network"] = net_->manifest();
      write_text_file(prefix + ".bin", net_->param_blob());
    }
    write_text_file(prefix + ".json", j.dump(2) + "\n");
  }

  static Encoder load(const std::string& prefix) {
    const auto j = nlohmann::json::parse(read_text_file(prefix + ".json"));
    if (j.value("format", "") != "arclab.encoder" || j.value("version", 0) != 1)
      throw Error("unrecognized encoder file: " + prefix + ".json");
    const auto kind = representation_kind_from_string(j.at("kind").get<std::string>());
    if (kind == RepresentationKind::identity) return identity(j.at("feature_dim").get<std::size_t>());
    return Encoder(kind, Mlp::from_manifest(j.at("network"), read_text_file(prefix + ".bin")),
                   j.at("latent_dim").get<std::size_t>());
  }

private:
  Encoder() = default;
  RepresentationKind kind_ = RepresentationKind::identity;
  std::size_t feature_dim_ = 0;
  std::size_t latent_dim_ = 0;
  std::optional<Mlp> net_;
};

// ---------------------------------------------------------------------------
// Losses. Each returns the scalar loss for one sample and accumulates its
// gradient into the networks' gradient buffers.

/// sqrt(|v|^2 + eps): differentiable at v = 0.
inline double smoothed_norm(std::span<const double> v, double eps) {
  double s = eps;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// (||phi(x1) - phi(x2)||+ - d)^2
inline double loss_arc(Mlp& phi, std::span<const double> x1, std::span<const double> x2,
                       double d_act, double eps_norm = 1e-8) {
  if (d_act < 0.0) throw Error("loss_arc: negative target distance");
  Mlp::Trace t1, t2;
  const Vec z1 = phi.forward(x1, t1);
  const Vec z2 = phi.forward(x2, t2);
  Vec diff(z1.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = z1[i] - z2[i];
  const double n = smoothed_norm(diff, eps_norm);
  const double r = n - d_act;
  Vec g(diff.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.0 * r * diff[i] / n;
  phi.backward(t1, g);
  for (double& x : g) x = -x;
  phi.backward(t2, g);
  return r * r;
}

/// KL(N(mu, sigma^2) || N(0, I)) with sigma = exp(log_sigma).
inline double gaussian_kl(std::span<const double> mu, std::span<const double> log_sigma) {
  double kl = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i)
    kl += 0.5 * (mu[i] * mu[i] + std::exp(2.0 * log_sigma[i]) - 1.0 - 2.0 * log_sigma[i]);
  return kl;
}

namespace detail {

// Encodes x with a variational encoder, samples z = mu + sigma * noise, decodes,
// and backpropagates |dec(z) - x|^2 + beta * KL. Extra gradient on mu may be
// supplied via mu_grad_extra (used by the slowness term).
inline double vae_core(Mlp& enc, Mlp& dec, std::span<const double> x, double beta,
                       std::span<const double> noise, Mlp::Trace& enc_trace, Vec& mu_out,
                       std::span<const double> mu_grad_extra = {}) {
  const std::size_t d = enc.output_size() / 2;
  if (noise.size() != d) throw Error("vae loss: noise size must equal latent dim");
  const Vec h = enc.forward(x, enc_trace);
  std::span<const double> mu(h.data(), d);
  std::span<const double> ls(h.data() + d, d);
  Vec z(d);
  for (std::size_t i = 0; i < d; ++i) z[i] = mu[i] + std::exp(ls[i]) * noise[i];
  Mlp::Trace dec_trace;
  const Vec xr = dec.forward(z, dec_trace);
  double rec = 0.0;
  Vec g_xr(xr.size());
  for (std::size_t i = 0; i < xr.size(); ++i) {
    const double e = xr[i] - x[i];
    rec += e * e;
    g_xr[i] = 2.0 * e;
  }
  const double kl = gaussian_kl(mu, ls);
  const Vec g_z = dec.backward(dec_trace, g_xr);
  Vec g_h(2 * d);
  for (std::size_t i = 0; i < d; ++i) {
    const double sigma = std::exp(ls[i]);
    g_h[i] = g_z[i] + beta * mu[i];
    if (!mu_grad_extra.empty()) g_h[i] += mu_grad_extra[i];
    g_h[d + i] = g_z[i] * sigma * noise[i] + beta * (sigma * sigma - 1.0);
  }
  enc.backward(enc_trace, g_h);
  mu_out.assign(mu.begin(), mu.end());
  return rec + beta * kl;
}

}  // namespace detail

/// Reconstruction error of the reparameterized decode plus beta * KL to N(0, I).
inline double loss_vae(Mlp& enc, Mlp& dec, std::span<const double> x, double beta,
                       std::span<const double> noise) {
  Mlp::Trace t;
  Vec mu;
  return detail::vae_core(enc, dec, x, beta, noise, t, mu);
}

/// VAE loss on x_t plus slow_weight * ||mu(x_next) - mu(x_t)||+.
inline double loss_slowness(Mlp& enc, Mlp& dec, std::span<const double> x_t,
                            std::span<const double> x_next, double slow_weight, double beta,
                            std::span<const double> noise, double eps_norm = 1e-8) {
  const std::size_t d = enc.output_size() / 2;
  Mlp::Trace tn;
  const Vec hn = enc.forward(x_next, tn);
  // mu(x_t) is needed before the VAE backward pass, so evaluate it first.
  const Vec ht = enc.forward(x_t);
  Vec diff(d);
  for (std::size_t i = 0; i < d; ++i) diff[i] = hn[i] - ht[i];
  const double n = smoothed_norm(diff, eps_norm);
  Vec g_mu_t(d), g_hn(2 * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    g_hn[i] = slow_weight * diff[i] / n;
    g_mu_t[i] = -g_hn[i];
  }
  Mlp::Trace tt;
  Vec mu;
  double loss = detail::vae_core(enc, dec, x_t, beta, noise, tt, mu, g_mu_t);
  if (slow_weight != 0.0) {
    enc.backward(tn, g_hn);
    loss += slow_weight * n;
  }
  return loss;
}

/// ||x_next - dec(model(phi(x_t) ++ onehot(a)))||^2
inline double loss_predictive(Mlp& phi, Mlp& model, Mlp& dec, std::span<const double> x_t,
                              ActionId a, std::size_t num_actions,
                              std::span<const double> x_next) {
  Mlp::Trace tp, tm, td;
  const Vec z = phi.forward(x_t, tp);
  const Vec zin = concat(z, one_hot(a, num_actions));
  const Vec zn = model.forward(zin, tm);
  const Vec xr = dec.forward(zn, td);
  double loss = 0.0;
  Vec g(xr.size());
  for (std::size_t i = 0; i < xr.size(); ++i) {
    const double e = xr[i] - x_next[i];
    loss += e * e;
    g[i] = 2.0 * e;
  }
  const Vec g_zn = dec.backward(td, g);
  const Vec g_zin = model.backward(tm, g_zn);
  phi.backward(tp, std::span<const double>(g_zin.data(), z.size()));
  return loss;
}

/// CE(inv(phi(x_t) ++ phi(x_next)), a) + beta * ||phi(x_next) - model(phi(x_t) ++ onehot(a))||^2
inline double loss_inverse(Mlp& phi, Mlp& model, Mlp& inv, std::span<const double> x_t,
                           ActionId a, std::size_t num_actions, std::span<const double> x_next,
                           double beta) {
  Mlp::Trace tp0, tp1, tm, ti;
  const Vec z0 = phi.forward(x_t, tp0);
  const Vec z1 = phi.forward(x_next, tp1);
  const std::size_t d = z0.size();

  const Vec logits = inv.forward(concat(z0, z1), ti);
  const Vec p = softmax(logits);
  const double ce = -std::log(std::max(p[a], 1e-300));
  Vec g_logits = p;
  g_logits[a] -= 1.0;
  const Vec g_pair = inv.backward(ti, g_logits);

  const Vec zhat = model.forward(concat(z0, one_hot(a, num_actions)), tm);
  double fwd = 0.0;
  Vec g_zhat(d), g_z1(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double e = z1[i] - zhat[i];
    fwd += e * e;
    g_z1[i] = beta * 2.0 * e;
    g_zhat[i] = -beta * 2.0 * e;
  }
  const Vec g_zin = model.backward(tm, g_zhat);

  Vec g0(d), g1(d);
  for (std::size_t i = 0; i < d; ++i) {
    g0[i] = g_pair[i] + g_zin[i];
    g1[i] = g_pair[d + i] + g_z1[i];
  }
  phi.backward(tp0, g0);
  phi.backward(tp1, g1);
  return ce + beta * fwd;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t latent_dim = 2;
  std::vector<std::size_t> hidden = {64, 64};
  Activation activation = Activation::tanh;
  int epochs = 50;
  std::size_t batch = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double beta = 1.0;             // KL weight (vae, slowness); forward-model weight (inverse)
  double slowness_weight = 1.0;  // alpha in the slowness objective
  double pairs_per_state = 50.0; // arc: pairs per epoch = pairs_per_state * |states|
  double eps_norm = 1e-8;

  nlohmann::json to_json() const {
    return {{"latent_dim", latent_dim},       {"hidden", hidden},
            {"activation", to_string(activation)}, {"epochs", epochs},
            {"batch", batch},                 {"learning_rate", learning_rate},
            {"seed", seed},                   {"beta", beta},
            {"slowness_weight", slowness_weight}, {"pairs_per_state", pairs_per_state},
            {"eps_norm", eps_norm}};
  }
};

struct TrainReport {
  RepresentationKind kind = RepresentationKind::identity;
  Vec train_loss;
  Vec validation_loss;
  std::uint64_t dataset_hash = 0;
  nlohmann::json config;
  double wall_seconds = 0.0;

  /// epoch,train_loss,validation_loss
  std::string curve_csv() const {
    std::string out = "epoch,train_loss,validation_loss\n";
    for (std::size_t e = 0; e < train_loss.size(); ++e)
      out += std::to_string(e + 1) + "," + format_double(train_loss[e]) + "," +
             format_double(validation_loss[e]) + "\n";
    return out;
  }
};

struct TrainedRepresentation {
  Encoder encoder = Encoder::identity(0);
  std::optional<Mlp> decoder;        // vae, slowness, predictive
  std::optional<Mlp> latent_model;   // predictive, inverse
  std::optional<Mlp> inverse_model;  // inverse
  TrainReport report;
};

namespace detail {

inline std::vector<std::size_t> layers(std::size_t in, const std::vector<std::size_t>& hidden,
                                       std::size_t out) {
  std::vector<std::size_t> l{in};
  l.insert(l.end(), hidden.begin(), hidden.end());
  l.push_back(out);
  return l;
}

inline void check_finite(double loss, RepresentationKind kind, int epoch) {
  if (!std::isfinite(loss))
    throw NumericError("training " + to_string(kind) + ": non-finite loss at epoch " +
                       std::to_string(epoch));
}

// Mean ARC loss over all unordered pairs of `states`, from one embedding pass.
inline double arc_full_loss(const Mlp& phi, const GridMdp& mdp,
                            const ActionableDistanceMatrix& dm,
                            const std::vector<StateId>& states, double eps) {
  if (states.size() < 2) return 0.0;
  std::vector<Vec> z;
  for (StateId s : states) z.push_back(phi.forward(mdp.features(s)));
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < states.size(); ++i)
    for (std::size_t j = i + 1; j < states.size(); ++j) {
      const double n = std::sqrt(squared_distance(z[i], z[j]) + eps);
      const double r = n - dm.at(states[i], states[j]);
      total += r * r;
      ++count;
    }
  return total / static_cast<double>(count);
}

}  // namespace detail

/// Trains one representation on `dataset`. kind = arc reads targets from
/// `distances` (never recomputed here); the other learned kinds use the
/// dataset's transitions.
inline TrainedRepresentation train_representation(RepresentationKind kind,
                                                  const TrajectoryDataset& dataset,
                                                  const GridMdp& mdp,
                                                  const ActionableDistanceMatrix* distances,
                                                  const TrainConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  TrainedRepresentation out;
  out.report.kind = kind;
  out.report.dataset_hash = dataset.hash();
  out.report.config = cfg.to_json();
  out.report.config["kind"] = to_string(kind);

  const std::size_t fdim = mdp.feature_dim();
  const std::size_t na = mdp.num_actions();
  if (kind == RepresentationKind::identity) {
    out.encoder = Encoder::identity(fdim);
    return out;
  }
  if (cfg.latent_dim == 0) throw ConfigError("latent_dim must be positive");
  if (cfg.batch == 0) throw ConfigError("batch must be positive");

  Rng rng(derive_seed(cfg.seed, "train/" + to_string(kind)));
  const AdamConfig adam{cfg.learning_rate};
  const std::size_t d = cfg.latent_dim;
  const bool variational = kind == RepresentationKind::vae || kind == RepresentationKind::slowness;
  Mlp enc({detail::layers(fdim, cfg.hidden, variational ? 2 * d : d), cfg.activation}, rng);

  auto finish = [&](Mlp enc_net) {
    out.encoder = Encoder(kind, std::move(enc_net), d);
    out.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
  };

  if (kind == RepresentationKind::arc) {
    if (!distances) throw ConfigError("arc training requires an actionable distance matrix");
    const auto train_states = dataset.states(Split::train);
    auto val_states = dataset.states(Split::validation);
    if (train_states.size() < 2) throw Error("arc training needs at least two dataset states");
    if (val_states.size() < 2) val_states = train_states;
    for (StateId s : train_states) distances->position(s);
    for (StateId s : val_states) distances->position(s);

    std::vector<Vec> feats(mdp.num_states());
    for (StateId s = 0; s < mdp.num_states(); ++s) feats[s] = mdp.features(s);
    const std::size_t n = train_states.size();
    const auto pairs_per_epoch = static_cast<std::size_t>(
        std::max(1.0, std::round(cfg.pairs_per_state * static_cast<double>(n))));
    Adam opt(enc.param_count(), adam);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      for (std::size_t done = 0; done < pairs_per_epoch;) {
        const std::size_t b = std::min(cfg.batch, pairs_per_epoch - done);
        enc.zero_grad();
        for (std::size_t k = 0; k < b; ++k) {
          // uniform unordered pair of distinct states
          std::size_t i = rng.below(n);
          std::size_t j = rng.below(n - 1);
          if (j >= i) ++j;
          const StateId si = train_states[i], sj = train_states[j];
          loss_arc(enc, feats[si], feats[sj], distances->at(si, sj), cfg.eps_norm);
        }
        for (double& g : enc.grads()) g /= static_cast<double>(b);
        opt.step(enc);
        done += b;
      }
      const double tl = detail::arc_full_loss(enc, mdp, *distances, train_states, cfg.eps_norm);
      detail::check_finite(tl, kind, epoch);
      out.report.train_loss.push_back(tl);
      out.report.validation_loss.push_back(
          detail::arc_full_loss(enc, mdp, *distances, val_states, cfg.eps_norm));
    }
    return finish(std::move(enc));
  }

  // Transition-based objectives.
  auto train_tr = dataset.transitions(Split::train);
  auto val_tr = dataset.transitions(Split::validation);
  if (train_tr.empty()) throw Error("training " + to_string(kind) + " needs transitions");
  if (val_tr.empty()) val_tr = train_tr;

  Mlp dec, model, inv;
  std::vector<Mlp*> nets{&enc};
  if (variational || kind == RepresentationKind::predictive) {
    dec = Mlp({detail::layers(d, cfg.hidden, fdim), cfg.activation}, rng);
    nets.push_back(&dec);
  }
  if (kind == RepresentationKind::predictive || kind == RepresentationKind::inverse) {
    model = Mlp({detail::layers(d + na, cfg.hidden, d), cfg.activation}, rng);
    nets.push_back(&model);
  }
  if (kind == RepresentationKind::inverse) {
    inv = Mlp({detail::layers(2 * d, cfg.hidden, na), cfg.activation}, rng);
    nets.push_back(&inv);
  }
  ParamGroup group(nets);
  GroupOptimizer opt(nets, adam);

  Vec noise(d);
  auto sample_loss = [&](const Transition& tr, Rng& r) {
    const Vec x0 = mdp.features(tr.state);
    const Vec x1 = mdp.features(tr.next);
    switch (kind) {
      case RepresentationKind::vae:
        for (double& e : noise) e = r.normal();
        return loss_vae(enc, dec, x0, cfg.beta, noise);
      case RepresentationKind::slowness:
        for (double& e : noise) e = r.normal();
        return loss_slowness(enc, dec, x0, x1, cfg.slowness_weight, cfg.beta, noise, cfg.eps_norm);
      case RepresentationKind::predictive:
        return loss_predictive(enc, model, dec, x0, tr.action, na, x1);
      case RepresentationKind::inverse:
        return loss_inverse(enc, model, inv, x0, tr.action, na, x1, cfg.beta);
      default: throw Error("unreachable representation kind");
    }
  };

  Rng val_rng(derive_seed(cfg.seed, "validation/" + to_string(kind)));
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(train_tr, rng);
    double total = 0.0;
    for (std::size_t startb = 0; startb < train_tr.size(); startb += cfg.batch) {
      const std::size_t endb = std::min(train_tr.size(), startb + cfg.batch);
      group.zero_grad();
      for (std::size_t k = startb; k < endb; ++k) total += sample_loss(train_tr[k], rng);
      group.scale_grads(1.0 / static_cast<double>(endb - startb));
      opt.step();
    }
    const double tl = total / static_cast<double>(train_tr.size());
    detail::check_finite(tl, kind, epoch);
    out.report.train_loss.push_back(tl);
    // Validation: same estimator, gradients discarded, fixed noise stream.
    Rng vr = val_rng;
    double vl = 0.0;
    for (const auto& tr : val_tr) vl += sample_loss(tr, vr);
    group.zero_grad();
    out.report.validation_loss.push_back(vl / static_cast<double>(val_tr.size()));
  }
  if (variational || kind == RepresentationKind::predictive) out.decoder = std::move(dec);
  if (kind == RepresentationKind::predictive || kind == RepresentationKind::inverse)
    out.latent_model = std::move(model);
  if (kind == RepresentationKind::inverse) out.inverse_model = std::move(inv);
  return finish(std::move(enc));
}

// ---------------------------------------------------------------------------
// Reconstruction decoder psi: latent -> features, trained with phi frozen.

struct DecoderConfig {
  std::vector<std::size_t> hidden = {64, 64};
  Activation activation = Activation::tanh;
  int epochs = 300;
  std::size_t batch = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct Decoder {
  Mlp net;
  Vec loss_curve;

  Vec decode(std::span<const double> z) const { return net.forward(z); }
};

/// Mean of ||psi(phi(s)) - x(s)||^2 over `states`.
inline double reconstruction_error(const Decoder& dec, const Encoder& enc, const GridMdp& mdp,
                                   std::span<const StateId> states) {
  double total = 0.0;
  for (StateId s : states) {
    const Vec x = mdp.features(s);
    total += squared_distance(dec.decode(enc.encode(x)), x);
  }
  return total / static_cast<double>(states.size());
}

inline Decoder train_decoder(const Encoder& encoder, const TrajectoryDataset& dataset,
                             const GridMdp& mdp, const DecoderConfig& cfg) {
  const auto states = dataset.states(Split::all);
  if (states.empty()) throw Error("train_decoder: empty dataset");
  Rng rng(derive_seed(cfg.seed, "train/decoder"));
  // The encoder is const and only evaluated: no gradient reaches it.
  std::vector<Vec> z, x;
  for (StateId s : states) {
    x.push_back(mdp.features(s));
    z.push_back(encoder.encode(x.back()));
  }
  Decoder dec{Mlp({detail::layers(encoder.latent_dim(), cfg.hidden, mdp.feature_dim()),
                   cfg.activation},
                  rng),
              {}};
  Adam opt(dec.net.param_count(), AdamConfig{cfg.learning_rate});
  std::vector<std::size_t> order(states.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order, rng);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch);
      dec.net.zero_grad();
      for (std::size_t k = b0; k < b1; ++k) {
        Mlp::Trace t;
        const Vec& xi = x[order[k]];
        const Vec y = dec.net.forward(z[order[k]], t);
        Vec g(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) g[i] = 2.0 * (y[i] - xi[i]);
        dec.net.backward(t, g);
      }
      for (double& g : dec.net.grads()) g /= static_cast<double>(b1 - b0);
      opt.step(dec.net);
    }
    const double err = reconstruction_error(dec, encoder, mdp, states);
    if (!std::isfinite(err)) throw NumericError("decoder training: non-finite loss");
    dec.loss_curve.push_back(err);
  }
  return dec;
}

/// Nearest state to a feature vector, after clamping coordinates into [0,1].
/// `clamped` is set when clamping changed the vector.
inline StateId snap_to_state(const GridMdp& mdp, std::span<const double> features,
                             bool* clamped = nullptr) {
  Vec f(features.begin(), features.end());
  bool changed = false;
  for (double& v : f) {
    const double c = std::clamp(v, 0.0, 1.0);
    if (c != v) changed = true;
    v = c;
  }
  if (clamped) *clamped = changed;
  StateId best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (StateId s = 0; s < mdp.num_states(); ++s) {
    const double dd = squared_distance(mdp.features(s), f);
    if (dd < best_d) {
      best_d = dd;
      best = s;
    }
  }
  return best;
}

}  // namespace arclab
