// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "cli/cli.hpp"
#include "stproph/trainer/gradcheck_suite.hpp"
#include "test_util.hpp"

namespace stproph::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using testing::TempDir;

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "stproph");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = run(static_cast<int>(argv.size()), argv.data(), out, err, [](const char*) -> const char* { return nullptr; });
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string toy_config() { return testing::source_path("configs/toy.json"); }

/// One trained toy checkpoint shared by the eval tests.
class TrainedToy : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir;
    const Result r = run_cli({"train", "--config", toy_config(), "--epochs", "2", "--out", dir_->path()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string checkpoint() { return dir_->file("checkpoint.bin"); }
  static TempDir* dir_;
};

TempDir* TrainedToy::dir_ = nullptr;

TEST_F(TrainedToy, TrainWritesOutputs) {
  for (const char* f : {"checkpoint.bin", "history.csv", "horizon_metrics.csv", "summary.json"})
    EXPECT_TRUE(fs::exists(dir_->file(f))) << f;
  const json summary = json::parse(testing::read_text(dir_->file("summary.json")));
  EXPECT_TRUE(summary.contains("config_hash"));
  EXPECT_TRUE(summary.contains("version"));
  EXPECT_TRUE(summary["metrics"].contains("mae@avg"));
  EXPECT_EQ(summary["metrics"]["mae@avg"]["std"].get<double>(), 0.0);
  EXPECT_EQ(summary["run_results"].size(), 1u);
  const std::string history = testing::read_text(dir_->file("history.csv"));
  EXPECT_EQ(std::count(history.begin(), history.end(), '\n'), 3);
  const std::string horizon = testing::read_text(dir_->file("horizon_metrics.csv"));
  EXPECT_EQ(std::count(horizon.begin(), horizon.end(), '\n'), 14);
}

TEST_F(TrainedToy, EvalReportsMetrics) {
  TempDir out;
  const Result r = run_cli({"eval", "--checkpoint", checkpoint(), "--out", out.path()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json doc = json::parse(r.out);
  for (const char* k : {"mae@3", "rmse@6", "mape@12", "mae@avg"}) EXPECT_TRUE(doc["metrics"].contains(k)) << k;
  EXPECT_GT(doc["samples"].get<std::size_t>(), 0u);
  EXPECT_TRUE(fs::exists(out.file("metrics.json")));
  EXPECT_TRUE(fs::exists(out.file("horizon_metrics.csv")));
}

TEST_F(TrainedToy, ZeroRatioMaskMatchesUnmasked) {
  TempDir out;
  const Result plain = run_cli({"eval", "--checkpoint", checkpoint(), "--out", out.path()});
  const Result masked =
      run_cli({"eval", "--checkpoint", checkpoint(), "--mask", "point", "--ratio", "0", "--out", out.path()});
  ASSERT_EQ(plain.code, 0);
  ASSERT_EQ(masked.code, 0);
  EXPECT_EQ(json::parse(plain.out)["metrics"], json::parse(masked.out)["metrics"]);
}

TEST_F(TrainedToy, MaskedEvalIsReproducible) {
  TempDir out;
  const std::vector<std::string> args{"eval", "--checkpoint", checkpoint(), "--mask", "block",
                                      "--ratio", "0.3", "--seed", "5", "--out", out.path()};
  const Result a = run_cli(args), b = run_cli(args);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(json::parse(a.out)["metrics"], json::parse(b.out)["metrics"]);
  const Result plain = run_cli({"eval", "--checkpoint", checkpoint(), "--out", out.path()});
  EXPECT_NE(json::parse(a.out)["metrics"], json::parse(plain.out)["metrics"]);
}

TEST_F(TrainedToy, EvalRejectsBadFlags) {
  EXPECT_EQ(run_cli({"eval", "--checkpoint", checkpoint(), "--mask", "stripes", "--ratio", "0.1"}).code, 1);
  EXPECT_EQ(run_cli({"eval", "--checkpoint", checkpoint(), "--mask", "point", "--ratio", "1.5"}).code, 1);
}

TEST(Cli, MissingCheckpointIsADataError) {
  TempDir dir;
  const Result r = run_cli({"eval", "--checkpoint", dir.file("none.bin")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("none.bin"), std::string::npos);
}

TEST(Cli, UnknownAblationListsValidNames) {
  TempDir dir;
  const Result r = run_cli({"train", "--config", toy_config(), "--ablate", "Bogus", "--out", dir.path()});
  EXPECT_EQ(r.code, 1);
  for (const char* name : {"Bogus", "LLMs", "DP", "IntraS", "InterS", "CMA"})
    EXPECT_NE(r.err.find(name), std::string::npos) << name;
}

TEST(Cli, RepeatedRunsReportSpread) {
  TempDir dir;
  const Result r =
      run_cli({"train", "--config", toy_config(), "--epochs", "1", "--runs", "3", "--out", dir.path()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json summary = json::parse(testing::read_text(dir.file("summary.json")));
  EXPECT_EQ(summary["run_results"].size(), 3u);
  EXPECT_GT(summary["metrics"]["mae@avg"]["std"].get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(dir.file("checkpoint_run3.bin")));
}

TEST(Cli, AdapterReport) {
  Result r = run_cli({"adapter-report", "--d", "4096", "--r", "16"});
  ASSERT_EQ(r.code, 0) << r.err;
  json doc = json::parse(r.out);
  EXPECT_NEAR(doc["ratio_full_over_lora"].get<double>(), 128.0, 1e-9);
  EXPECT_NEAR(doc["ratio_full_over_lora_amr"].get<double>(), 512.0, 1e-9);
  r = run_cli({"adapter-report", "--d", "8", "--r", "4", "--batch", "2", "--tokens", "3"});
  ASSERT_EQ(r.code, 0);
  doc = json::parse(r.out);
  EXPECT_EQ(doc["lora_amr"]["trainable_params"].get<std::size_t>(), 16u);
  EXPECT_EQ(run_cli({"adapter-report", "--d", "8", "--r", "3"}).code, 1);
}

TEST(Cli, GradcheckPassesAndListsEveryOp) {
  const Result r = run_cli({"gradcheck", "--scope", "layer"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const auto& op : trainer::registered_ops()) {
    std::size_t hits = 0;
    std::istringstream lines(r.out);
    for (std::string line; std::getline(lines, line);)
      if (line.rfind(op + " ", 0) == 0) ++hits;
    EXPECT_EQ(hits, 1u) << op;
  }
}

TEST(Cli, GradcheckModelScope) {
  const Result r = run_cli({"gradcheck", "--scope", "model", "--seed", "3"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("model.point"), std::string::npos);
}

TEST(Cli, InjectedFaultIsReported) {
  const Result r = run_cli({"gradcheck", "--scope", "layer", "--inject-fault", "softmax"});
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("softmax"), std::string::npos);
  EXPECT_EQ(run_cli({"gradcheck", "--scope", "layer"}).code, 0);
}

TEST(Cli, SynthAndMaskWriteCsv) {
  TempDir dir;
  ASSERT_EQ(run_cli({"synth", "--kind", "heteroscedastic", "--steps", "300", "--output", dir.file("h.csv"),
                     "--sigma-output", dir.file("s.csv")})
                .code,
            0);
  EXPECT_TRUE(fs::exists(dir.file("s.csv")));
  testing::write_text(dir.file("run.json"), R"({"dataset": {"csv": "h.csv"}, "output": {"dir": "o"}})");
  const Result r = run_cli({"mask", "--config", dir.file("run.json"), "--mask", "point", "--ratio", "0.2", "--output",
                            dir.file("m.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("masked 120 of 600"), std::string::npos);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run_cli({}).code, 1);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 1);
  EXPECT_EQ(run_cli({"gradcheck", "--scope", "galaxy"}).code, 1);
  EXPECT_EQ(run_cli({"--help"}).code, 0);
}

}  // namespace
}  // namespace stproph::cli
