// arc-lab: command-line front end for the experiment pipeline.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "arclab/harness.hpp"

namespace {

struct Globals {
  std::string config;
  std::string out = "arc-lab-out";
  std::string cache;
  std::optional<std::uint64_t> seed;
};

arclab::Pipeline open_pipeline(const Globals& g) {
  arclab::ExperimentConfig cfg =
      g.config.empty() ? arclab::ExperimentConfig{} : arclab::ExperimentConfig::load(g.config);
  if (g.seed) cfg.seed = *g.seed;
  return arclab::Pipeline(std::move(cfg), g.out, arclab::Cache::resolve(g.cache));
}

void print_stages(const arclab::RunReport& report) {
  for (const auto& s : report.stages) {
    std::cout << s.name << (s.cached ? " (cached)" : "");
    for (const auto& [k, v] : s.metrics.items()) std::cout << " " << k << "=" << v.dump();
    std::cout << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Actionable representation laboratory on discrete navigation worlds", "arc-lab"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed_value = 0;
  app.add_option("--config", g.config, "Experiment configuration (JSON)")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed_value, "Override the configured global seed");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--cache", g.cache, "Artifact cache directory (else $ARC_LAB_CACHE)");
  app.fallthrough();

  std::string kind;
  std::size_t k = 0;

  auto* gcp = app.add_subcommand("gcp", "Solve soft goal-conditioned policies and report Bellman residuals");
  auto* dataset = app.add_subcommand("dataset", "Collect the trajectory dataset");
  auto* dact = app.add_subcommand("dact", "Compute the actionable distance matrix");
  auto* train = app.add_subcommand("train-rep", "Train representations");
  train->add_option("--kind", kind, "One representation kind (default: all configured)");
  auto* cluster = app.add_subcommand("cluster", "k-means over a learned representation");
  cluster->add_option("--k", k, "Number of clusters (default: configured)");
  auto* analyze = app.add_subcommand("analyze", "Scatter plots, MDS and perturbation analysis");
  auto* shaping = app.add_subcommand("shaping", "Reward-shaping experiment");
  auto* features = app.add_subcommand("features", "Representation-as-features experiment");
  auto* hrl = app.add_subcommand("hrl", "Hierarchical control experiment");
  auto* sweep = app.add_subcommand("sweep", "Hyperparameter grids");
  auto* report = app.add_subcommand("report", "Full pipeline with report.json and metrics.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  if (*seed_opt) g.seed = seed_value;

  try {
    arclab::Pipeline p = open_pipeline(g);
    if (gcp->parsed()) {
      p.gcp();
    } else if (dataset->parsed()) {
      p.dataset();
    } else if (dact->parsed()) {
      p.dact();
    } else if (train->parsed()) {
      if (kind.empty())
        p.train_all();
      else
        p.representation(arclab::representation_kind_from_string(kind));
    } else if (cluster->parsed()) {
      p.cluster(k ? std::optional<std::size_t>(k) : std::nullopt);
    } else if (analyze->parsed()) {
      p.analyze();
    } else if (shaping->parsed()) {
      p.shaping();
    } else if (features->parsed()) {
      p.features();
    } else if (hrl->parsed()) {
      p.hrl();
    } else if (sweep->parsed()) {
      p.sweep();
    } else if (report->parsed()) {
      p.run_all();
    }
    p.write_report();
    print_stages(p.report());
  } catch (const arclab::ConfigError& e) {
    std::cerr << "arc-lab: configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "arc-lab: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
