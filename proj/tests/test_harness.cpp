#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "arclab/harness.hpp"

using namespace arclab;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config() {
  return ExperimentConfig::from_json(json::parse(R"({
    "name": "small",
    "seed": 3,
    "env": {"kind": "wall", "width": 5, "height": 5, "gap_row": 2},
    "dataset": {"trajectories": 30, "horizon": 20},
    "representations": ["arc", "vae"],
    "train": {"hidden": [16], "epochs": 3, "pairs_per_state": 5}
  })"));
}

class TempDir {
public:
  explicit TempDir(const std::string& tag)
      : path_(fs::temp_directory_path() / ("arclab_harness_" + tag)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string str(const std::string& sub = {}) const { return (sub.empty() ? path_ : path_ / sub).string(); }

private:
  fs::path path_;
};

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ARC_LAB_BINARY) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig c;
  const ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(ExperimentConfig::from_json(json::parse(R"({"sed": 1})")), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(json::parse(R"({"gcp": {"temprature": 1}})")), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(json::parse(R"({"env": {"kind": "wall", "depth": 3}})")),
               ConfigError);
}

TEST(Config, InvalidValuesAreConfigErrors) {
  EXPECT_THROW(ExperimentConfig::from_json(json::parse(R"({"seed": "x"})")), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(json::parse(R"({"gcp": {"temperature": -1}})")), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(json::parse(R"({"cluster": {"k": 0}})")), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(json::parse(R"({"representations": ["pca"]})")), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(json::parse(R"([1, 2])")), ConfigError);
  EXPECT_THROW(build_environment(EnvConfig{"maze", 5, 5, 0}), ConfigError);
  EXPECT_THROW(ExperimentConfig::load("/nonexistent/config.json"), ConfigError);
}

TEST(Config, HashTracksContent) {
  ExperimentConfig a = small_config(), b = small_config();
  EXPECT_EQ(a.hash(), b.hash());
  b.gcp.temperature = 0.3;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Seeds, StageSeedsAreDerived) {
  const Pipeline p(small_config());
  EXPECT_EQ(p.stage_seed("dataset"), derive_seed(3, "dataset"));
  EXPECT_NE(p.stage_seed("dataset"), p.stage_seed("train"));
}

TEST(Cache, DisabledWithoutDirectory) {
  const Cache c;
  EXPECT_FALSE(c.enabled());
  c.put("x", "y");
  EXPECT_FALSE(c.get("x"));
}

TEST(Cache, HitsReproduceFreshArtifacts) {
  TempDir dir("cache");
  Pipeline fresh(small_config(), {}, Cache(dir.str("cache")));
  const std::string gcp_json = fresh.gcp().to_json().dump();
  const std::string dact_csv = fresh.dact().to_csv();
  const std::string emb = embedding_csv(fresh.representation(RepresentationKind::arc).encoder, fresh.env());
  for (const auto& s : fresh.report().stages) EXPECT_FALSE(s.cached) << s.name;

  Pipeline again(small_config(), {}, Cache(dir.str("cache")));
  EXPECT_EQ(again.gcp().to_json().dump(), gcp_json);
  EXPECT_EQ(again.dact().to_csv(), dact_csv);
  EXPECT_EQ(embedding_csv(again.representation(RepresentationKind::arc).encoder, again.env()), emb);
  for (const char* name : {"gcp", "dact", "train-rep/arc"}) {
    const StageRecord* r = again.report().find(name);
    ASSERT_NE(r, nullptr) << name;
    EXPECT_TRUE(r->cached) << name;
  }

  Pipeline uncached(small_config());
  EXPECT_EQ(uncached.dact().to_csv(), dact_csv);
}

TEST(Cache, KeysFollowTheirInputs) {
  ExperimentConfig a = small_config(), b = small_config();
  b.gcp.temperature = 0.3;
  Pipeline pa(a), pb(b);
  EXPECT_NE(pa.gcp_key(), pb.gcp_key());
  EXPECT_NE(pa.dact_key(), pb.dact_key());
  ExperimentConfig c = small_config();
  c.train.epochs = 4;
  EXPECT_EQ(Pipeline(c).dact_key(), pa.dact_key());
  c.distance.kl_mode = "forward";
  EXPECT_NE(Pipeline(c).dact_key(), pa.dact_key());
}

TEST(Pipeline, StageErrorsNameTheStage) {
  ExperimentConfig c = small_config();
  c.env.kind = "maze";
  Pipeline p(c);
  try {
    p.env();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 'env'"), std::string::npos) << e.what();
  }
}

TEST(Pipeline, OutputsAreDeterministic) {
  TempDir dir("det");
  for (const char* run : {"a", "b"}) {
    Pipeline p(small_config(), dir.str(run));
    p.train_all();
    p.write_report();
  }
  std::size_t compared = 0;
  for (const auto& e : fs::directory_iterator(dir.str("a"))) {
    const std::string name = e.path().filename().string();
    if (name == "report.json") continue;
    ASSERT_TRUE(fs::exists(dir.str("b/" + name))) << name;
    EXPECT_EQ(read_text_file(e.path().string()), read_text_file(dir.str("b/" + name))) << name;
    ++compared;
  }
  EXPECT_GE(compared, 6u);
}

TEST(Cli, ExitCodes) {
  TempDir dir("cli");
  const std::string good = dir.str("good.json");
  write_text_file(good, small_config().to_json().dump());
  const std::string bad = dir.str("bad.json");
  write_text_file(bad, R"({"gcp": {"temprature": 1}})");
  const std::string broken = dir.str("broken.json");
  write_text_file(broken, R"({"env": {"kind": "wall", "width": 5, "height": 5, "gap_row": 9}})");
  const std::string out = " --out " + dir.str("out");

  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("--config " + dir.str("missing.json") + " gcp"), 1);
  EXPECT_EQ(run_cli("--config " + bad + out + " gcp"), 2);
  EXPECT_EQ(run_cli("--config " + broken + out + " gcp"), 3);
  EXPECT_EQ(run_cli("--config " + good + out + " gcp"), 0);
  EXPECT_TRUE(fs::exists(dir.str("out/report.json")));
  EXPECT_TRUE(fs::exists(dir.str("out/gcp_residuals.csv")));
}

TEST(Cli, SeedOverrideChangesTheDataset) {
  TempDir dir("seed");
  const std::string cfg = dir.str("c.json");
  write_text_file(cfg, small_config().to_json().dump());
  ASSERT_EQ(run_cli("--config " + cfg + " --out " + dir.str("s1") + " --seed 1 dataset"), 0);
  ASSERT_EQ(run_cli("--config " + cfg + " --out " + dir.str("s2") + " --seed 2 dataset"), 0);
  ASSERT_EQ(run_cli("--config " + cfg + " --out " + dir.str("s1b") + " --seed 1 dataset"), 0);
  const std::string a = read_text_file(dir.str("s1/dataset.csv"));
  EXPECT_EQ(a, read_text_file(dir.str("s1b/dataset.csv")));
  EXPECT_NE(a, read_text_file(dir.str("s2/dataset.csv")));
}
