#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arclab/actdist.hpp"
#include "arclab/analysis.hpp"
#include "arclab/clustering.hpp"
#include "arclab/core.hpp"
#include "arclab/downstream.hpp"
#include "arclab/gridworld.hpp"
#include "arclab/representations.hpp"
#include "arclab/softgcp.hpp"

namespace arclab {

inline constexpr std::string_view kToolVersion = "arc-lab 0.1.0";

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

namespace detail {

/// Reads known keys from a JSON object and rejects anything else.
class Fields {
public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError(path_ + ": unknown key '" + key + "'");
  }

private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

struct EnvConfig {
  std::string kind = "wall";  // open | wall | four_rooms | directed
  int width = 9;
  int height = 9;
  int gap_row = 0;

  json to_json() const {
    return {{"kind", kind}, {"width", width}, {"height", height}, {"gap_row", gap_row}};
  }
  static EnvConfig from_json(const json& j, const std::string& path = "env") {
    EnvConfig c;
    detail::Fields f(j, path);
    f.get("kind", c.kind);
    f.get("width", c.width);
    f.get("height", c.height);
    f.get("gap_row", c.gap_row);
    f.finish();
    return c;
  }
};

inline GridMdp build_environment(const EnvConfig& c) {
  if (c.kind == "open") return build_open_grid(c.width, c.height);
  if (c.kind == "wall") return build_wall_world(c.width, c.height, c.gap_row);
  if (c.kind == "four_rooms") return build_four_rooms(c.width, c.height);
  if (c.kind == "directed") return build_directed_grid(c.width, c.height);
  throw ConfigError("env.kind: unknown environment '" + c.kind + "'");
}

struct DistanceConfig {
  std::string expectation = "exact_all_states";
  std::string kl_mode = "symmetric";
  double op_budget = 1e7;

  json to_json() const {
    return {{"expectation", expectation}, {"kl_mode", kl_mode}, {"op_budget", op_budget}};
  }
};

struct DatasetConfig {
  int trajectories = 500;
  int horizon = 100;

  json to_json() const { return {{"trajectories", trajectories}, {"horizon", horizon}}; }
};

struct ClusterConfig {
  std::size_t k = 4;
  std::string representation = "arc";

  json to_json() const { return {{"k", k}, {"representation", representation}}; }
};

struct AnalysisConfig {
  std::string color_by = "x";
  int spread_radius = -1;  // < 0: half the smaller grid side

  json to_json() const { return {{"color_by", color_by}, {"spread_radius", spread_radius}}; }
};

struct ShapingConfig {
  bool enabled = false;
  int large = 15;
  int small = 7;
  std::string representation = "arc";
  double alpha_scale = 0.1;
  double hand_alpha_scale = 0.45;
  int seeds = 5;
  ShapingTaskConfig task{16, 1200, 100, 25, 5, 3};
  QLearnerConfig learner{1.0, 0.99, 0.1, 100, -20.0};

  json to_json() const {
    return {{"enabled", enabled},
            {"large", large},
            {"small", small},
            {"representation", representation},
            {"alpha_scale", alpha_scale},
            {"hand_alpha_scale", hand_alpha_scale},
            {"seeds", seeds},
            {"n_goals", task.n_goals},
            {"episodes", task.episodes},
            {"eval_every", task.eval_every},
            {"eval_starts", task.eval_starts},
            {"min_goal_distance", task.min_goal_distance},
            {"start_radius", task.start_radius},
            {"learning_rate", learner.learning_rate},
            {"discount", learner.discount},
            {"epsilon", learner.epsilon},
            {"horizon", learner.horizon},
            {"initial_q", learner.initial_q}};
  }
};

struct FeaturesConfig {
  bool enabled = false;
  int width = 9;
  std::string representation = "arc";
  double danger_radius = 1.0;
  double penalty = 4.0;
  int horizon = 40;
  int seeds = 5;
  FeatureLearnerConfig learner{0.05, 0.99, 0.1, 0.1, 0.0, 400, 10};

  json to_json() const {
    return {{"enabled", enabled},
            {"width", width},
            {"representation", representation},
            {"danger_radius", danger_radius},
            {"penalty", penalty},
            {"horizon", horizon},
            {"seeds", seeds},
            {"learning_rate", learner.learning_rate},
            {"discount", learner.discount},
            {"epsilon", learner.epsilon},
            {"final_epsilon", learner.final_epsilon},
            {"lr_decay", learner.lr_decay},
            {"episodes", learner.episodes},
            {"eval_every", learner.eval_every}};
  }
};

struct HrlConfig {
  bool enabled = false;
  std::string kind = "cluster";  // cluster | latent
  std::string representation = "arc";
  std::size_t checkpoints = 8;
  int meta_steps = 8;
  int meta_horizon = 10;
  std::size_t k = 4;
  std::vector<int> start = {1, 1};
  int waypoint_radius = 1;
  std::vector<std::size_t> hidden = {50, 50};
  int seeds = 5;
  int random_episodes = 500;
  int eval_episodes = 300;
  MetaTrainConfig train{200, 10, 0.03, 0.9};

  json to_json() const {
    return {{"enabled", enabled},
            {"kind", kind},
            {"representation", representation},
            {"checkpoints", checkpoints},
            {"meta_steps", meta_steps},
            {"meta_horizon", meta_horizon},
            {"k", k},
            {"start", start},
            {"waypoint_radius", waypoint_radius},
            {"hidden", hidden},
            {"seeds", seeds},
            {"random_episodes", random_episodes},
            {"eval_episodes", eval_episodes},
            {"iterations", train.iterations},
            {"batch_episodes", train.batch_episodes},
            {"learning_rate", train.learning_rate},
            {"baseline_decay", train.baseline_decay}};
  }
};

/// Hyperparameter grids.
struct SweepConfig {
  std::vector<std::size_t> latent_dims = {2, 3, 4};
  std::vector<double> betas = {1.0 / 16, 1.0 / 4, 1.0, 4.0, 16.0};
  std::vector<double> alpha_scales = {1.0, 4.0, 16.0, 64.0, 256.0};
  std::vector<std::size_t> ks = {4, 5, 6, 7, 8};
  std::vector<std::string> grids = {"k"};  // any of: k, latent_dim, beta, alpha_scale

  json to_json() const {
    return {{"latent_dims", latent_dims}, {"betas", betas}, {"alpha_scales", alpha_scales},
            {"ks", ks}, {"grids", grids}};
  }
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  EnvConfig env;
  SoftParams gcp;
  DistanceConfig distance;
  DatasetConfig dataset;
  std::vector<RepresentationKind> representations = {
      RepresentationKind::arc,        RepresentationKind::vae,     RepresentationKind::slowness,
      RepresentationKind::predictive, RepresentationKind::inverse, RepresentationKind::identity};
  TrainConfig train;
  DecoderConfig decoder;
  ClusterConfig cluster;
  AnalysisConfig analysis;
  ShapingConfig shaping;
  FeaturesConfig features;
  HrlConfig hrl;
  SweepConfig sweep;

  json to_json() const {
    json reps = json::array();
    for (auto k : representations) reps.push_back(to_string(k));
    json tr = train.to_json();
    tr.erase("seed");
    return {{"name", name},
            {"seed", seed},
            {"env", env.to_json()},
            {"gcp",
             {{"temperature", gcp.temperature},
              {"discount", gcp.discount},
              {"tolerance", gcp.tol},
              {"max_iterations", gcp.max_iters}}},
            {"distance", distance.to_json()},
            {"dataset", dataset.to_json()},
            {"representations", reps},
            {"train", tr},
            {"decoder",
             {{"hidden", decoder.hidden},
              {"activation", to_string(decoder.activation)},
              {"epochs", decoder.epochs},
              {"batch", decoder.batch},
              {"learning_rate", decoder.learning_rate}}},
            {"cluster", cluster.to_json()},
            {"analysis", analysis.to_json()},
            {"shaping", shaping.to_json()},
            {"features", features.to_json()},
            {"hrl", hrl.to_json()},
            {"sweep", sweep.to_json()}};
  }

  std::uint64_t hash() const { return fnv1a(to_json().dump()); }

  static ExperimentConfig from_json(const json& j) {
    ExperimentConfig c;
    detail::Fields f(j, "config");
    f.get("name", c.name);
    f.get("seed", c.seed);
    if (auto* e = f.sub("env")) c.env = EnvConfig::from_json(*e);
    if (auto* g = f.sub("gcp")) {
      detail::Fields s(*g, "gcp");
      s.get("temperature", c.gcp.temperature);
      s.get("discount", c.gcp.discount);
      s.get("tolerance", c.gcp.tol);
      s.get("max_iterations", c.gcp.max_iters);
      s.finish();
    }
    if (auto* d = f.sub("distance")) {
      detail::Fields s(*d, "distance");
      s.get("expectation", c.distance.expectation);
      s.get("kl_mode", c.distance.kl_mode);
      s.get("op_budget", c.distance.op_budget);
      s.finish();
    }
    if (auto* d = f.sub("dataset")) {
      detail::Fields s(*d, "dataset");
      s.get("trajectories", c.dataset.trajectories);
      s.get("horizon", c.dataset.horizon);
      s.finish();
    }
    if (auto* r = f.sub("representations")) {
      if (!r->is_array()) throw ConfigError("config.representations: expected an array");
      c.representations.clear();
      for (const auto& k : *r) c.representations.push_back(representation_kind_from_string(k.get<std::string>()));
    }
    if (auto* t = f.sub("train")) {
      detail::Fields s(*t, "train");
      std::string act = to_string(c.train.activation);
      s.get("latent_dim", c.train.latent_dim);
      s.get("hidden", c.train.hidden);
      s.get("activation", act);
      s.get("epochs", c.train.epochs);
      s.get("batch", c.train.batch);
      s.get("learning_rate", c.train.learning_rate);
      s.get("beta", c.train.beta);
      s.get("slowness_weight", c.train.slowness_weight);
      s.get("pairs_per_state", c.train.pairs_per_state);
      s.get("eps_norm", c.train.eps_norm);
      s.finish();
      c.train.activation = activation_from_string(act);
    }
    if (auto* d = f.sub("decoder")) {
      detail::Fields s(*d, "decoder");
      std::string act = to_string(c.decoder.activation);
      s.get("hidden", c.decoder.hidden);
      s.get("activation", act);
      s.get("epochs", c.decoder.epochs);
      s.get("batch", c.decoder.batch);
      s.get("learning_rate", c.decoder.learning_rate);
      s.finish();
      c.decoder.activation = activation_from_string(act);
    }
    if (auto* d = f.sub("cluster")) {
      detail::Fields s(*d, "cluster");
      s.get("k", c.cluster.k);
      s.get("representation", c.cluster.representation);
      s.finish();
    }
    if (auto* d = f.sub("analysis")) {
      detail::Fields s(*d, "analysis");
      s.get("color_by", c.analysis.color_by);
      s.get("spread_radius", c.analysis.spread_radius);
      s.finish();
    }
    if (auto* d = f.sub("shaping")) {
      auto& x = c.shaping;
      detail::Fields s(*d, "shaping");
      s.get("enabled", x.enabled);
      s.get("large", x.large);
      s.get("small", x.small);
      s.get("representation", x.representation);
      s.get("alpha_scale", x.alpha_scale);
      s.get("hand_alpha_scale", x.hand_alpha_scale);
      s.get("seeds", x.seeds);
      s.get("n_goals", x.task.n_goals);
      s.get("episodes", x.task.episodes);
      s.get("eval_every", x.task.eval_every);
      s.get("eval_starts", x.task.eval_starts);
      s.get("min_goal_distance", x.task.min_goal_distance);
      s.get("start_radius", x.task.start_radius);
      s.get("learning_rate", x.learner.learning_rate);
      s.get("discount", x.learner.discount);
      s.get("epsilon", x.learner.epsilon);
      s.get("horizon", x.learner.horizon);
      s.get("initial_q", x.learner.initial_q);
      s.finish();
    }
    if (auto* d = f.sub("features")) {
      auto& x = c.features;
      detail::Fields s(*d, "features");
      s.get("enabled", x.enabled);
      s.get("width", x.width);
      s.get("representation", x.representation);
      s.get("danger_radius", x.danger_radius);
      s.get("penalty", x.penalty);
      s.get("horizon", x.horizon);
      s.get("seeds", x.seeds);
      s.get("learning_rate", x.learner.learning_rate);
      s.get("discount", x.learner.discount);
      s.get("epsilon", x.learner.epsilon);
      s.get("final_epsilon", x.learner.final_epsilon);
      s.get("lr_decay", x.learner.lr_decay);
      s.get("episodes", x.learner.episodes);
      s.get("eval_every", x.learner.eval_every);
      s.finish();
    }
    if (auto* d = f.sub("hrl")) {
      auto& x = c.hrl;
      detail::Fields s(*d, "hrl");
      s.get("enabled", x.enabled);
      s.get("kind", x.kind);
      s.get("representation", x.representation);
      s.get("checkpoints", x.checkpoints);
      s.get("meta_steps", x.meta_steps);
      s.get("meta_horizon", x.meta_horizon);
      s.get("k", x.k);
      s.get("start", x.start);
      s.get("waypoint_radius", x.waypoint_radius);
      s.get("hidden", x.hidden);
      s.get("seeds", x.seeds);
      s.get("random_episodes", x.random_episodes);
      s.get("eval_episodes", x.eval_episodes);
      s.get("iterations", x.train.iterations);
      s.get("batch_episodes", x.train.batch_episodes);
      s.get("learning_rate", x.train.learning_rate);
      s.get("baseline_decay", x.train.baseline_decay);
      s.finish();
    }
    if (auto* d = f.sub("sweep")) {
      detail::Fields s(*d, "sweep");
      s.get("latent_dims", c.sweep.latent_dims);
      s.get("betas", c.sweep.betas);
      s.get("alpha_scales", c.sweep.alpha_scales);
      s.get("ks", c.sweep.ks);
      s.get("grids", c.sweep.grids);
      s.finish();
    }
    f.finish();
    c.validate();
    return c;
  }

  static ExperimentConfig load(const std::string& path) {
    json j;
    try {
      j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
      throw ConfigError(path + ": " + e.what());
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    return from_json(j);
  }

  void validate() const {
    try {
      arclab::validate(gcp);
    } catch (const Error& e) {
      throw ConfigError(std::string("gcp: ") + e.what());
    }
    if (dataset.trajectories < 1 || dataset.horizon < 1)
      throw ConfigError("dataset: trajectories and horizon must be positive");
    if (distance.expectation != "exact_all_states" && distance.expectation != "dataset_states")
      throw ConfigError("distance.expectation: unknown mode '" + distance.expectation + "'");
    kl_mode_from_string(distance.kl_mode);
    color_by_from_string(analysis.color_by);
    if (cluster.k == 0) throw ConfigError("cluster.k must be positive");
    if (hrl.kind != "cluster" && hrl.kind != "latent")
      throw ConfigError("hrl.kind: expected 'cluster' or 'latent'");
    if (hrl.start.size() != 2) throw ConfigError("hrl.start: expected [x, y]");
    for (const auto& g : sweep.grids)
      if (g != "k" && g != "latent_dim" && g != "beta" && g != "alpha_scale")
        throw ConfigError("sweep.grids: unknown grid '" + g + "'");
  }
};

// ---------------------------------------------------------------------------
// Cache

/// Content-addressed artifact store. Disabled when constructed with an empty path.
class Cache {
public:
  explicit Cache(std::string dir = {}) : dir_(std::move(dir)) {
    if (!dir_.empty()) std::filesystem::create_directories(dir_);
  }

  /// --cache wins, then ARC_LAB_CACHE, else disabled.
  static Cache resolve(const std::string& flag) {
    if (!flag.empty()) return Cache(flag);
    if (const char* env = std::getenv("ARC_LAB_CACHE"); env && *env) return Cache(env);
    return Cache();
  }

  bool enabled() const noexcept { return !dir_.empty(); }
  const std::string& dir() const noexcept { return dir_; }

  std::string path(const std::string& name) const { return dir_ + "/" + name; }

  bool has(const std::string& name) const {
    return enabled() && std::filesystem::exists(path(name));
  }

  std::optional<std::string> get(const std::string& name) const {
    if (!has(name)) return std::nullopt;
    return read_text_file(path(name));
  }

  void put(const std::string& name, std::string_view contents) const {
    if (!enabled()) return;
    // Write-then-rename so a concurrent reader never sees a partial file.
    const std::string tmp = path(name) + ".tmp";
    write_text_file(tmp, contents);
    std::filesystem::rename(tmp, path(name));
  }

private:
  std::string dir_;
};

// ---------------------------------------------------------------------------
// Reports

struct StageRecord {
  std::string name;
  bool cached = false;
  double seconds = 0.0;
  json metrics = json::object();
};

struct RunReport {
  json config;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::vector<StageRecord> stages;
  double wall_seconds = 0.0;

  json to_json() const {
    json st = json::array();
    for (const auto& s : stages)
      st.push_back({{"stage", s.name}, {"cached", s.cached}, {"seconds", s.seconds}, {"metrics", s.metrics}});
    return {{"tool_version", kToolVersion},
            {"rng", Rng::algorithm},
            {"config_hash", hex64(config_hash)},
            {"seed", seed},
            {"config", config},
            {"stages", st},
            {"wall_seconds", wall_seconds}};
  }

  /// stage,metric,value for every numeric metric; no timings, so the file is
  /// reproducible byte for byte.
  std::string metrics_csv() const {
    std::string out = "stage,metric,value\n";
    for (const auto& s : stages) {
      for (const auto& [key, value] : s.metrics.items()) {
        if (value.is_number()) out += s.name + "," + key + "," + format_double(value.get<double>()) + "\n";
      }
    }
    return out;
  }

  const StageRecord* find(const std::string& name) const {
    for (const auto& s : stages)
      if (s.name == name) return &s;
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// Pipeline

namespace detail {

inline double median_of(Vec v) { return v.empty() ? 0.0 : median(std::move(v)); }

/// Highest value a curve attains; evaluation points are greedy policies.
inline double best_return(const LearningCurve& c) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& p : c.points) best = std::max(best, p.mean_return);
  return best;
}

}  // namespace detail

/// Lazily evaluated, cached experiment stages. Each getter runs its
/// dependencies first; every stage draws randomness from
/// derive_seed(config seed, stage name).
class Pipeline {
public:
  Pipeline(ExperimentConfig cfg, std::string out_dir = {}, Cache cache = Cache())
      : cfg_(std::move(cfg)), out_(std::move(out_dir)), cache_(std::move(cache)) {
    if (!out_.empty()) std::filesystem::create_directories(out_);
    report_.config = cfg_.to_json();
    report_.config_hash = cfg_.hash();
    report_.seed = cfg_.seed;
  }

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const RunReport& report() const noexcept { return report_; }
  const std::string& out_dir() const noexcept { return out_; }

  std::uint64_t stage_seed(const std::string& stage) const { return derive_seed(cfg_.seed, stage); }

  // -- env ------------------------------------------------------------------
  const GridMdp& env() {
    if (!env_) {
      stage("env", [&](StageRecord& r) {
        env_ = env_override_ ? *env_override_ : build_environment(cfg_.env);
        r.metrics = {{"states", env_->num_states()}, {"actions", env_->num_actions()}};
        emit("env.txt", env_->ascii());
      });
    }
    return *env_;
  }

  // -- gcp ------------------------------------------------------------------
  std::string gcp_key() {
    return "gcp-" + hex64(fnv1a(std::string(kToolVersion) + hex64(env().hash()) +
                                json(report_.config.at("gcp")).dump()));
  }

  const SoftGoalPolicy& gcp() {
    if (!gcp_) {
      const std::string key = gcp_key() + ".json";
      stage("gcp", [&](StageRecord& r) {
        if (auto hit = cache_.get(key)) {
          gcp_ = SoftGoalPolicy::from_json(json::parse(*hit));
          r.cached = true;
        } else {
          gcp_ = SoftGoalPolicy::solve(env(), cfg_.gcp);
          cache_.put(key, gcp_->to_json().dump());
        }
        double max_res = 0.0, total_res = 0.0;
        int max_it = 0;
        std::string csv = "goal,residual,iterations\n";
        for (StateId g = 0; g < gcp_->num_states(); ++g) {
          const auto& t = gcp_->tables(g);
          const double res = bellman_residual(env(), t, gcp_->params());
          max_res = std::max(max_res, res);
          total_res += res;
          max_it = std::max(max_it, t.iterations);
          csv += std::to_string(g) + "," + format_double(res) + "," + std::to_string(t.iterations) + "\n";
        }
        const double sr = success_rate(*gcp_, env(), 200, cfg_.dataset.horizon, stage_seed("gcp/eval"));
        r.metrics = {{"max_bellman_residual", max_res},
                     {"mean_bellman_residual", total_res / static_cast<double>(gcp_->num_states())},
                     {"max_iterations", max_it},
                     {"success_rate", sr}};
        emit("gcp_residuals.csv", csv);
      });
    }
    return *gcp_;
  }

  // -- dataset --------------------------------------------------------------
  const TrajectoryDataset& dataset() {
    if (!dataset_) {
      const auto& pol = gcp();
      stage("dataset", [&](StageRecord& r) {
        dataset_ = collect_dataset(pol, env(), cfg_.dataset.trajectories, cfg_.dataset.horizon,
                                   stage_seed("dataset"));
        r.metrics = {{"trajectories", dataset_->trajectories.size()},
                     {"transitions", dataset_->transitions().size()},
                     {"unique_states", dataset_->states().size()},
                     {"hash", static_cast<double>(dataset_->hash() >> 11)}};
        emit("dataset.csv", dataset_->to_csv());
      });
    }
    return *dataset_;
  }

  // -- dact -----------------------------------------------------------------
  DistanceOptions distance_options() {
    DistanceOptions o;
    o.mode = cfg_.distance.expectation == "dataset_states" ? ExpectationMode::dataset_states
                                                           : ExpectationMode::exact_all_states;
    o.kl_mode = kl_mode_from_string(cfg_.distance.kl_mode);
    o.op_budget = cfg_.distance.op_budget;
    if (o.mode == ExpectationMode::dataset_states) o.dataset_states = dataset().visits();
    return o;
  }

  std::string dact_key() {
    std::string k = gcp_key() + json(report_.config.at("distance")).dump();
    if (cfg_.distance.expectation == "dataset_states")
      k += json(report_.config.at("dataset")).dump() + std::to_string(stage_seed("dataset"));
    return "dact-" + hex64(fnv1a(k));
  }

  const ActionableDistanceMatrix& dact() {
    if (!dact_) {
      const auto& pol = gcp();
      const std::string key = dact_key() + ".csv";
      const auto opt = distance_options();
      stage("dact", [&](StageRecord& r) {
        const DistanceMeta meta{pol.params().temperature, pol.params().discount, pol.env_hash(),
                                opt.mode, opt.kl_mode};
        if (auto hit = cache_.get(key)) {
          dact_ = ActionableDistanceMatrix::from_csv(*hit, meta);
          r.cached = true;
        } else {
          dact_ = compute_distance_matrix(pol, opt);
          cache_.put(key, dact_->to_csv());
        }
        r.metrics = {{"states", dact_->size()},
                     {"mean_offdiagonal", dact_->mean_offdiagonal()},
                     {"triangle_violation_rate", dact_->triangle_violation_rate()}};
        emit("dact.csv", dact_->to_csv());
      });
    }
    return *dact_;
  }

  // -- representations ------------------------------------------------------
  TrainConfig train_config() const {
    TrainConfig t = cfg_.train;
    t.seed = stage_seed("train");
    return t;
  }

  const TrainedRepresentation& representation(RepresentationKind kind,
                                              std::optional<TrainConfig> override_cfg = {}) {
    const TrainConfig tc = override_cfg ? *override_cfg : train_config();
    const std::string id = to_string(kind) + "-" + hex64(fnv1a(tc.to_json().dump()));
    if (auto it = reps_.find(id); it != reps_.end()) return it->second;
    const auto& ds = dataset();
    const ActionableDistanceMatrix* d = kind == RepresentationKind::arc ? &dact() : nullptr;
    std::string key = std::string(kToolVersion) + hex64(env().hash()) + gcp_key() +
                      json(report_.config.at("dataset")).dump() +
                      std::to_string(stage_seed("dataset")) + tc.to_json().dump() + to_string(kind);
    if (d) key += dact_key();
    const std::string prefix = "rep-" + hex64(fnv1a(key));
    const std::string label = override_cfg ? id : to_string(kind);
    TrainedRepresentation out;
    stage("train-rep/" + label, [&](StageRecord& r) {
      if (kind != RepresentationKind::identity && cache_.has(prefix + ".json") &&
          cache_.has(prefix + ".curve.json")) {
        out.encoder = Encoder::load(cache_.path(prefix));
        const auto curve = json::parse(*cache_.get(prefix + ".curve.json"));
        out.report.kind = kind;
        out.report.train_loss = curve.at("train_loss").get<Vec>();
        out.report.validation_loss = curve.at("validation_loss").get<Vec>();
        out.report.dataset_hash = ds.hash();
        out.report.config = tc.to_json();
        r.cached = true;
      } else {
        out = train_representation(kind, ds, env(), d, tc);
        if (kind != RepresentationKind::identity && cache_.enabled()) {
          out.encoder.save(cache_.path(prefix));
          cache_.put(prefix + ".curve.json", json{{"train_loss", out.report.train_loss},
                                                  {"validation_loss", out.report.validation_loss}}
                                                 .dump());
        }
      }
      if (!out.report.train_loss.empty()) {
        r.metrics = {{"final_train_loss", out.report.train_loss.back()},
                     {"final_validation_loss", out.report.validation_loss.back()},
                     {"epochs", out.report.train_loss.size()}};
        emit("curve_" + label + ".csv", out.report.curve_csv());
      }
      emit("embedding_" + label + ".csv", embedding_csv(out.encoder, env()));
    });
    return reps_.emplace(id, std::move(out)).first->second;
  }

  void train_all() {
    for (auto k : cfg_.representations) representation(k);
  }

  // -- analysis -------------------------------------------------------------
  /// Environment-specific structure score of an encoder: wall separation
  /// ratio, room purity, or position/heading spread ratio.
  std::optional<std::pair<std::string, double>> structure_score(const Encoder& enc,
                                                                std::size_t k) {
    const auto& mdp = env();
    if (cfg_.env.kind == "wall") return std::pair{"separation_ratio", wall_separation(enc, mdp).ratio};
    if (cfg_.env.kind == "four_rooms") {
      const auto states = dataset().states();
      std::vector<int> labels;
      for (StateId s : states) labels.push_back(mdp.room_of(s));
      const auto km = kmeans_fit(enc.embed(mdp, states), k, stage_seed("cluster"));
      return std::pair{"purity", purity(km, labels)};
    }
    if (cfg_.env.kind == "directed") {
      const auto rep = perturbation_spread(enc, mdp, spread_bases(), StateFactor::position,
                                           StateFactor::heading, spread_radius());
      return std::pair{"spread_ratio", rep.ratio.value_or(0.0)};
    }
    return std::nullopt;
  }

  int spread_radius() {
    return cfg_.analysis.spread_radius >= 0 ? cfg_.analysis.spread_radius
                                            : (std::min(env().width(), env().height()) - 1) / 2;
  }

  std::vector<StateId> spread_bases() {
    const Cell c{env().width() / 2, env().height() / 2};
    std::vector<StateId> out;
    for (int h = 0; h < 4; ++h)
      if (auto s = env().state_at(c, static_cast<Heading>(h))) out.push_back(*s);
    return out;
  }

  void analyze() {
    train_all();
    const auto& d = dact();
    stage("analyze", [&](StageRecord& r) {
      const Matrix mds = classical_mds(d.d, 2);
      r.metrics["dact_mds_stress"] = stress(d.d, pairwise_distances(mds));
      std::string mcsv = "state_index,mds_1,mds_2\n";
      for (std::size_t i = 0; i < mds.rows(); ++i)
        mcsv += std::to_string(d.states[i]) + "," + format_double(mds(i, 0)) + "," + format_double(mds(i, 1)) + "\n";
      emit("dact_mds.csv", mcsv);
      const ColorBy color = color_by_from_string(cfg_.analysis.color_by);
      std::string spread = "representation,important,secondary,important_spread,secondary_spread,ratio,base_states\n";
      for (auto k : cfg_.representations) {
        const auto& rep = representation(k);
        const std::string name = to_string(k);
        if (auto s = structure_score(rep.encoder, cfg_.cluster.k)) r.metrics[name + "_" + s->first] = s->second;
        if (rep.encoder.latent_dim() == 2 || rep.encoder.latent_dim() == 3) {
          const Matrix xy = scatter_coordinates(rep.encoder, env());
          emit("scatter_" + name + ".svg", scatter_svg(xy, env(), color));
        }
        if (env().directed()) {
          const auto sp = perturbation_spread(rep.encoder, env(), spread_bases(), StateFactor::position,
                                              StateFactor::heading, spread_radius());
          const std::string row = spread_csv(sp, name);
          spread += row.substr(row.find('\n') + 1);
        }
      }
      if (env().directed()) emit("spread.csv", spread);
    });
  }

  // -- clustering -----------------------------------------------------------
  KMeansModel cluster(std::optional<std::size_t> k_override = {}) {
    const auto kind = representation_kind_from_string(cfg_.cluster.representation);
    const auto& rep = representation(kind);
    const auto states = dataset().states();
    const std::size_t k = k_override.value_or(cfg_.cluster.k);
    KMeansModel km;
    stage("cluster/k" + std::to_string(k), [&](StageRecord& r) {
      km = kmeans_fit(rep.encoder.embed(env(), states), k, stage_seed("cluster"));
      r.metrics = {{"k", k}, {"inertia", km.inertia}, {"iterations", km.iterations}};
      if (env().has_rooms()) {
        std::vector<int> labels;
        for (StateId s : states) labels.push_back(env().room_of(s));
        r.metrics["purity"] = purity(km, labels);
      }
      emit("clusters_k" + std::to_string(k) + ".csv", assignment_csv(km, states));
    });
    return km;
  }

  // -- downstream -----------------------------------------------------------
  /// Pipeline over a different environment sharing this config, cache and seed.
  Pipeline sub_pipeline(GridMdp mdp, const std::string& tag) {
    ExperimentConfig c = cfg_;
    c.name = cfg_.name + "/" + tag;
    Pipeline p(c, {}, cache_);
    p.env_override_ = std::move(mdp);
    return p;
  }

  void shaping() {
    const auto& sc = cfg_.shaping;
    const int origin = (sc.large - sc.small) / 2;
    GridMdp big = build_open_grid(sc.large, sc.large);
    Pipeline small = sub_pipeline(
        build_open_grid(sc.small, sc.small).with_feature_frame({origin, origin, sc.large, sc.large}),
        "shaping-small");
    const auto kind = representation_kind_from_string(sc.representation);
    const Encoder enc = small.representation(kind).encoder;
    absorb(small, "shaping/");
    stage("shaping", [&](StageRecord& r) {
      const Encoder hand = Encoder::identity(2);
      Vec sparse, shaped, handv;
      std::string csv = "arm,iteration,mean_return,success_rate,seed\n";
      auto add = [&](const std::string& arm, const LearningCurve& c) {
        for (const auto& p : c.points)
          csv += arm + "," + std::to_string(p.iteration) + "," + format_double(p.mean_return) + "," +
                 format_double(p.success_rate) + "," + std::to_string(c.seed) + "\n";
      };
      for (int i = 0; i < sc.seeds; ++i) {
        const std::uint64_t seed = stage_seed("shaping#" + std::to_string(i));
        const auto cs = train_shaped(big, {nullptr, 0.0, 1.0}, sc.learner, sc.task, seed);
        const auto ca = train_shaped(big, {&enc, sc.alpha_scale, 1.0}, sc.learner, sc.task, seed);
        const auto ch = train_shaped(big, {&hand, sc.hand_alpha_scale, 1.0}, sc.learner, sc.task, seed);
        add("sparse", cs);
        add(sc.representation, ca);
        add("hand", ch);
        sparse.push_back(cs.final().success_rate);
        shaped.push_back(ca.final().success_rate);
        handv.push_back(ch.final().success_rate);
      }
      r.metrics = {{"sparse_success_median", detail::median_of(sparse)},
                   {"shaped_success_median", detail::median_of(shaped)},
                   {"hand_success_median", detail::median_of(handv)}};
      emit("shaping_curves.csv", csv);
    });
  }

  void features() {
    const auto& fc = cfg_.features;
    Pipeline sub = sub_pipeline(build_open_grid(fc.width, fc.width), "features");
    const auto kind = representation_kind_from_string(fc.representation);
    const Encoder enc = sub.representation(kind).encoder;
    absorb(sub, "features/");
    const GridMdp& mdp = sub.env();
    stage("features", [&](StageRecord& r) {
      const auto task = make_reach_avoid(mdp, fc.danger_radius, fc.penalty, fc.horizon);
      const double opt = reach_avoid_optimal_return(mdp, task);
      const double rnd = reach_avoid_random_return(mdp, task);
      const Encoder raw = Encoder::identity(mdp.feature_dim());
      Vec learned, rawv;
      std::string csv = "arm,iteration,mean_return,normalized_return,reached_goal,seed\n";
      auto add = [&](const std::string& arm, const LearningCurve& c) {
        for (const auto& p : c.points)
          csv += arm + "," + std::to_string(p.iteration) + "," + format_double(p.mean_return) + "," +
                 format_double(normalized_return(p.mean_return, rnd, opt)) + "," +
                 format_double(p.success_rate) + "," + std::to_string(c.seed) + "\n";
      };
      for (int i = 0; i < fc.seeds; ++i) {
        const std::uint64_t seed = stage_seed("features#" + std::to_string(i));
        const auto ca = train_feature_policy(mdp, task, enc, fc.learner, seed);
        const auto cr = train_feature_policy(mdp, task, raw, fc.learner, seed);
        add(fc.representation, ca);
        add("raw", cr);
        learned.push_back(normalized_return(detail::best_return(ca), rnd, opt));
        rawv.push_back(normalized_return(detail::best_return(cr), rnd, opt));
      }
      r.metrics = {{"optimal_return", opt},
                   {"random_return", rnd},
                   {"learned_best_normalized_median", detail::median_of(learned)},
                   {"raw_best_normalized_median", detail::median_of(rawv)}};
      emit("features_curves.csv", csv);
    });
  }

  struct HrlOutcome {
    double random_baseline = 0.0;
    Vec trained;  // per seed, Monte-Carlo mean return of the final meta-policy
    std::vector<LearningCurve> curves;
    int clamped = 0;
  };

  HrlOutcome hrl() {
    const auto& hc = cfg_.hrl;
    const auto& mdp = env();
    const auto& pol = gcp();
    const auto kind = representation_kind_from_string(hc.representation);
    const auto& rep = representation(kind);
    const auto states = dataset().states();
    const auto start = mdp.state_at({hc.start[0], hc.start[1]});
    if (!start) throw ConfigError("hrl.start is not a free cell");
    HrlOutcome out;
    stage("hrl", [&](StageRecord& r) {
      const bool cluster_kind = hc.kind == "cluster";
      const HrlTask base_task =
          cluster_kind ? make_room_sequence(mdp, hc.checkpoints, *start, stage_seed("hrl/task"))
                       : make_waypoints(mdp, hc.checkpoints, *start, stage_seed("hrl/task"), hc.waypoint_radius);
      HrlTask task = base_task;
      task.meta_steps = hc.meta_steps;
      task.meta_horizon = hc.meta_horizon;

      std::optional<Decoder> decoder;
      Commander cmd;
      Vec offset, scale;
      if (cluster_kind) {
        const auto km = kmeans_fit(rep.encoder.embed(mdp, states), hc.k, stage_seed("hrl/cluster"));
        cmd = ClusterCommander::from_kmeans(km, states);
      } else {
        DecoderConfig dc = cfg_.decoder;
        dc.seed = stage_seed("hrl/decoder");
        decoder = train_decoder(rep.encoder, dataset(), mdp, dc);
        cmd = LatentCommander{&*decoder};
        const Matrix z = rep.encoder.embed(mdp, states);
        for (std::size_t j = 0; j < z.cols(); ++j) {
          double lo = 1e300, hi = -1e300;
          for (std::size_t i = 0; i < z.rows(); ++i) {
            lo = std::min(lo, z(i, j));
            hi = std::max(hi, z(i, j));
          }
          offset.push_back(0.5 * (lo + hi));
          scale.push_back(std::max(0.5 * (hi - lo), 1e-6));
        }
        r.metrics["decoder_reconstruction_error"] = reconstruction_error(*decoder, rep.encoder, mdp, states);
      }
      const MetaKind mk = cluster_kind ? MetaKind::cluster_categorical : MetaKind::latent_gaussian;
      const std::size_t adim = cluster_kind ? hc.k : rep.encoder.latent_dim();
      auto make_meta = [&](std::uint64_t seed) {
        MetaPolicy m(mk, task.input_dim(mdp), adim, hc.hidden, seed, hc.meta_horizon);
        if (!cluster_kind) m.set_latent_frame(offset, scale);
        return m;
      };
      out.random_baseline = random_meta_baseline(make_meta(0), pol, mdp, cmd, task, hc.random_episodes,
                                                 stage_seed("hrl/random"));
      std::string csv = "iteration,mean_return,success_rate,seed\n";
      for (int i = 0; i < hc.seeds; ++i) {
        const std::uint64_t seed = stage_seed("hrl#" + std::to_string(i));
        MetaPolicy meta = make_meta(seed);
        auto curve = train_meta(meta, pol, mdp, cmd, task, hc.train, seed);
        csv += curve.to_csv(false);
        Rng eval(derive_seed(seed, "hrl/eval"));
        double total = 0.0;
        for (int e = 0; e < hc.eval_episodes; ++e) {
          const auto ep = run_meta_episode(meta, pol, mdp, cmd, task, eval);
          total += ep.total_return;
          out.clamped += ep.clamped;
        }
        out.trained.push_back(total / hc.eval_episodes);
        out.curves.push_back(std::move(curve));
      }
      const double med = detail::median_of(out.trained);
      r.metrics["random_baseline"] = out.random_baseline;
      r.metrics["trained_return_median"] = med;
      r.metrics["ratio"] = out.random_baseline > 0.0 ? med / out.random_baseline : 0.0;
      r.metrics["clamped_goals"] = out.clamped;
      emit("hrl_curves.csv", csv);
    });
    return out;
  }

  // -- orchestration --------------------------------------------------------
  /// env -> gcp -> dataset -> dact -> representations -> analysis/clusters -> downstream.
  RunReport run_all() {
    const auto t0 = std::chrono::steady_clock::now();
    dataset();
    dact();
    train_all();
    analyze();
    if (std::find(cfg_.representations.begin(), cfg_.representations.end(),
                  representation_kind_from_string(cfg_.cluster.representation)) !=
        cfg_.representations.end())
      cluster();
    if (cfg_.shaping.enabled) shaping();
    if (cfg_.features.enabled) features();
    if (cfg_.hrl.enabled) hrl();
    report_.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_report();
    return report_;
  }

  /// Runs the configured hyperparameter grids; one row per grid cell.
  std::string sweep() {
    std::string csv = "grid,value,representation,metric,score\n";
    for (const auto& grid : cfg_.sweep.grids) {
      if (grid == "k") {
        for (std::size_t k : cfg_.sweep.ks) {
          const auto km = cluster(k);
          const auto* rec = report_.find("cluster/k" + std::to_string(k));
          const bool has = rec && rec->metrics.contains("purity");
          csv += "k," + std::to_string(k) + "," + cfg_.cluster.representation + "," +
                 (has ? "purity," + format_double(rec->metrics["purity"].get<double>())
                      : "inertia," + format_double(km.inertia)) +
                 "\n";
        }
      } else if (grid == "latent_dim") {
        for (std::size_t d : cfg_.sweep.latent_dims) {
          TrainConfig tc = train_config();
          tc.latent_dim = d;
          const auto& rep = representation(RepresentationKind::arc, tc);
          if (auto s = structure_score(rep.encoder, cfg_.cluster.k))
            csv += "latent_dim," + std::to_string(d) + ",arc," + s->first + "," + format_double(s->second) + "\n";
        }
      } else if (grid == "beta") {
        for (double b : cfg_.sweep.betas)
          for (auto kind : {RepresentationKind::vae, RepresentationKind::slowness, RepresentationKind::inverse}) {
            TrainConfig tc = train_config();
            tc.beta = b;
            const auto& rep = representation(kind, tc);
            if (auto s = structure_score(rep.encoder, cfg_.cluster.k))
              csv += "beta," + format_double(b) + "," + to_string(kind) + "," + s->first + "," +
                     format_double(s->second) + "\n";
          }
      } else if (grid == "alpha_scale") {
        const ExperimentConfig saved = cfg_;
        for (double a : cfg_.sweep.alpha_scales) {
          cfg_.shaping.alpha_scale = a;
          shaping();
          csv += "alpha_scale," + format_double(a) + "," + cfg_.shaping.representation +
                 ",shaped_success_median," +
                 format_double(report_.stages.back().metrics["shaped_success_median"].get<double>()) + "\n";
        }
        cfg_ = saved;
      }
    }
    emit("sweep.csv", csv);
    write_report();
    return csv;
  }

  void write_report() {
    emit("metrics.csv", report_.metrics_csv());
    emit("report.json", report_.to_json().dump(2) + "\n");
  }

private:
  template <class F>
  void stage(const std::string& name, F&& body) {
    StageRecord rec;
    rec.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      body(rec);
    } catch (const ConfigError& e) {
      throw ConfigError(prefixed(name, e.what()));
    } catch (const Error& e) {
      throw Error(prefixed(name, e.what()));
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report_.stages.push_back(std::move(rec));
  }

  static std::string prefixed(const std::string& stage, const std::string& what) {
    return what.rfind("stage '", 0) == 0 ? what : "stage '" + stage + "': " + what;
  }

  void emit(const std::string& file, std::string_view contents) const {
    if (out_.empty()) return;
    write_text_file(out_ + "/" + file, contents);
  }

  /// Copies a sub-pipeline's stage records into this report under `prefix`.
  void absorb(const Pipeline& sub, const std::string& prefix) {
    for (auto rec : sub.report_.stages) {
      rec.name = prefix + rec.name;
      report_.stages.push_back(std::move(rec));
    }
  }

  ExperimentConfig cfg_;
  std::string out_;
  Cache cache_;
  RunReport report_;
  std::optional<GridMdp> env_override_;
  std::optional<GridMdp> env_;
  std::optional<SoftGoalPolicy> gcp_;
  std::optional<TrajectoryDataset> dataset_;
  std::optional<ActionableDistanceMatrix> dact_;
  std::map<std::string, TrainedRepresentation> reps_;
};

}  // namespace arclab
