#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "dipt/dipt.hpp"

namespace fs = std::filesystem;
using namespace dipt;

namespace {

struct Outcome {
  int code = -1;
  std::string output;  // stdout and stderr together
};

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("dipt_cli_tests_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    // Shared fixture: a small planted dataset and a short training run.
    ASSERT_EQ(run("simulate si --nodes 20 --features 4 --transmission planted --iterations 2 --instances 6 --seed 3 "
                  "--out data")
                  .code,
              0);
    ASSERT_EQ(run("train --data data --count 4 --epochs 5 --latent-dim 3 --out model").code, 0);
  }

  static void TearDownTestSuite() { fs::remove_all(root_); }

  static Outcome run(const std::string& args) {
    const fs::path log = root_ / "last_output.txt";
    const std::string cmd = "cd '" + root_.string() + "' && '" + DIPT_CLI_PATH + "' " + args + " > '" + log.string() +
                            "' 2>&1";
    const int status = std::system(cmd.c_str());
    Outcome o;
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    o.output = text::read_file(log);
    return o;
  }

  static fs::path path(const std::string& rel) { return root_ / rel; }

  static void write(const std::string& rel, const std::string& content) { text::write_atomic(path(rel), content); }

  static fs::path root_;
};

fs::path CliTest::root_;

std::string slurp(const fs::path& p) { return text::read_file(p); }

}  // namespace

TEST_F(CliTest, HelpExitsZero) {
  const auto o = run("--help");
  EXPECT_EQ(o.code, 0);
  EXPECT_NE(o.output.find("simulate"), std::string::npos);
}

TEST_F(CliTest, SimulateSiIsByteIdenticalAcrossRuns) {
  ASSERT_EQ(run("simulate si --nodes 50 --seed 7 --out si_a").code, 0);
  ASSERT_EQ(run("simulate si --nodes 50 --seed 7 --out si_b").code, 0);
  for (const char* f : {"graph.txt", "summary.tsv", "instances/0000/seeds.txt", "instances/0000/observation.txt",
                        "instances/0000/forest.txt"}) {
    EXPECT_EQ(slurp(path("si_a") / f), slurp(path("si_b") / f)) << f;
  }
  EXPECT_TRUE(fs::exists(path("si_a/manifest.json")));
}

TEST_F(CliTest, SimulateIdssEmitsForestAndCompartments) {
  ASSERT_EQ(run("simulate idss --counties 100 --seed 2 --out idss").code, 0);
  EXPECT_TRUE(fs::exists(path("idss/instances/0000/forest.txt")));
  EXPECT_TRUE(fs::exists(path("idss/individuals.tsv")));
  std::istringstream sir(slurp(path("idss/sir.tsv")));
  std::string header;
  std::getline(sir, header);
  EXPECT_EQ(header, "day\tcounty\tS\tI\tR");
  std::size_t rows = 0;
  for (std::string line; std::getline(sir, line);) ++rows;
  EXPECT_EQ(rows, 91u * 100u);
}

TEST_F(CliTest, MissingFieldIsNamed) {
  const auto o = run("simulate si --seed 1 --out missing");
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.output.find("nodes"), std::string::npos);
  write("partial.json", R"({"seed": 4})");
  const auto c = run("simulate idss --config partial.json --out missing2");
  EXPECT_EQ(c.code, 1);
  EXPECT_NE(c.output.find("counties"), std::string::npos);
}

TEST_F(CliTest, ConfigFileSuppliesFieldsAndFlagsWin) {
  write("si.json", R"({"nodes": 12, "seed": 5, "seed_fraction": 0.25})");
  ASSERT_EQ(run("simulate si --config si.json --out cfg_a").code, 0);
  EXPECT_EQ(load_graph(path("cfg_a/graph.txt")).n_nodes(), 12u);
  EXPECT_EQ(load_seeds(path("cfg_a/instances/0000/seeds.txt")).count(), 3u);
  ASSERT_EQ(run("simulate si --config si.json --nodes 16 --out cfg_b").code, 0);
  EXPECT_EQ(load_graph(path("cfg_b/graph.txt")).n_nodes(), 16u);
  const auto m = nlohmann::json::parse(slurp(path("cfg_b/manifest.json")));
  EXPECT_EQ(m["config_files"].size(), 1u);
}

TEST_F(CliTest, UnknownConfigFieldIsUsageError) {
  write("typo.json", R"({"nodez": 12})");
  const auto o = run("simulate si --config typo.json --out typo");
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.output.find("nodez"), std::string::npos);
}

TEST_F(CliTest, MalformedDataIsExitTwo) {
  write("bad/graph.txt", "3 1\nnot numbers\n");
  write("bad/instances/0000/seeds.txt", "3\n1 0 0\n");
  const auto o = run("train --data bad --epochs 1 --out bad_model");
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.output.find("graph.txt"), std::string::npos);
}

TEST_F(CliTest, TrainSmokeWritesCheckpointAndCurve) {
  ASSERT_EQ(run("train --data data --epochs 1 --out t1").code, 0);
  EXPECT_NO_THROW(load_checkpoint(path("t1/checkpoint.txt")));
  std::istringstream curve(slurp(path("t1/loss.tsv")));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(curve, line)) ++rows;
  EXPECT_EQ(rows, 2u);
}

TEST_F(CliTest, ObservedFractionAndAblationFlags) {
  ASSERT_EQ(run("train --data data --epochs 2 --observed-fraction 0.3 --out obs").code, 0);
  const auto m = nlohmann::json::parse(slurp(path("obs/manifest.json")));
  EXPECT_EQ(m["options"]["observed-fraction"][0], "0.3");
  ASSERT_EQ(run("train --data data --epochs 2 --ablation cosine_influence --out cos").code, 0);
  EXPECT_EQ(load_checkpoint(path("cos/checkpoint.txt")).influence, InfluenceKind::cosine);
  EXPECT_EQ(run("train --data data --epochs 2 --ablation nonsense --out bogus").code, 1);
  EXPECT_EQ(run("train --data data --observed-fraction 1.5 --out bogus").code, 1);
}

TEST_F(CliTest, InferProducesValidForestsAndFullTrace) {
  ASSERT_EQ(run("infer --checkpoint model/checkpoint.txt --data data --count 2 --out inferred").code, 0);
  const Graph g = load_graph(path("data/graph.txt"));
  for (const char* k : {"0000", "0001"}) {
    const fs::path dir = path("inferred/instances") / k;
    const auto y = load_observation(path("data/instances") / k / "observation.txt");
    const auto s = load_seeds(dir / "seeds.txt");
    EXPECT_TRUE(validate_forest(load_forest(dir / "forest.txt"), g, y, s).empty()) << k;
    std::istringstream trace(slurp(dir / "trace.tsv"));
    std::string line;
    std::size_t rows = 0;
    while (std::getline(trace, line)) ++rows;
    EXPECT_EQ(rows, 101u);  // header + 100 iterations
  }
}

TEST_F(CliTest, InferRejectsMismatchedCheckpoint) {
  ASSERT_EQ(run("simulate si --nodes 9 --out other").code, 0);
  const auto o = run("infer --checkpoint model/checkpoint.txt --data other --out wrong");
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.output.find("20 nodes"), std::string::npos);
}

TEST_F(CliTest, InferWithoutZBarAsksForRetraining) {
  ASSERT_EQ(run("train --data data --epochs 0 --out untrained").code, 0);
  const auto o = run("infer --checkpoint untrained/checkpoint.txt --data data --out nozbar");
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.output.find("retrain"), std::string::npos);
}

TEST_F(CliTest, EvalTruthAgainstItselfScoresOne) {
  ASSERT_EQ(run("eval --pred data --truth data --out self").code, 0);
  std::istringstream report(slurp(path("self/report.tsv")));
  std::string line, last;
  std::getline(report, line);
  EXPECT_EQ(line, "instance\tpath_precision\tjaccard\tprecision\trecall\tf1\tauc\tsequence_error");
  std::size_t rows = 0;
  while (std::getline(report, line)) {
    ++rows;
    last = line;
  }
  EXPECT_EQ(rows, 7u);  // six instances and one aggregate row
  EXPECT_EQ(last, "mean\t1\t1\t1\t1\t1\t1\t0");
}

TEST_F(CliTest, EvalEmptyPredictionHasZeroPathPrecision) {
  const auto y = load_observation(path("data/instances/0000/observation.txt"));
  write("empty/instances/0000/seeds.txt", format_binary(SeedVector(y.size())));
  write("empty/instances/0000/forest.txt", format_forest(PropagationForest(y.size())));
  ASSERT_EQ(run("eval --pred empty --truth data --count 1 --out empty_eval").code, 0);
  std::istringstream report(slurp(path("empty_eval/report.tsv")));
  std::string line;
  std::getline(report, line);
  std::getline(report, line);
  EXPECT_EQ(line.substr(0, 7), "0000\t0\t");
}

TEST_F(CliTest, EvalNodeCountMismatchIsExitTwo) {
  write("short/instances/0000/seeds.txt", format_binary(SeedVector(3)));
  write("short/instances/0000/forest.txt", format_forest(PropagationForest(3)));
  EXPECT_EQ(run("eval --pred short --truth data --count 1 --out mismatch").code, 2);
}

TEST_F(CliTest, GradcheckPassesAndDetectsInjectedWrongSign) {
  const auto ok = run("gradcheck --instances 3 --out gc");
  EXPECT_EQ(ok.code, 0) << ok.output;
  for (const char* loss : {"diffusion", "elbo", "supervised_edge", "inference"}) {
    EXPECT_NE(ok.output.find(loss), std::string::npos) << loss;
  }
  EXPECT_TRUE(fs::exists(path("gc/gradcheck.tsv")));
  const auto bad = run("gradcheck --instances 2 --inject-wrong-sign diffusion");
  EXPECT_EQ(bad.code, 3);
  EXPECT_NE(bad.output.find("FAIL"), std::string::npos);
}

TEST_F(CliTest, ReplayReproducesOutputsByteForByte) {
  ASSERT_EQ(run("infer --checkpoint model/checkpoint.txt --data data --first 4 --iterations 10 --out to_replay").code, 0);
  const auto o = run("replay to_replay/manifest.json --out replayed");
  EXPECT_EQ(o.code, 0) << o.output;
  EXPECT_EQ(slurp(path("replayed/instances/0005/forest.txt")), slurp(path("to_replay/instances/0005/forest.txt")));
}

TEST_F(CliTest, ReplayReportsTamperedManifest) {
  ASSERT_EQ(run("simulate si --nodes 10 --seed 2 --out tamper").code, 0);
  auto m = nlohmann::json::parse(slurp(path("tamper/manifest.json")));
  m["outputs"][0]["fnv1a"] = "0000000000000000";
  write("tamper/manifest.json", m.dump(2));
  const auto o = run("replay tamper/manifest.json --out tamper_replay");
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.output.find("differs"), std::string::npos);
}
