#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "commands.hpp"

namespace gau::cli {
namespace {

namespace fs = std::filesystem;

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("gau_cli_test_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "tiny.json") << R"({
      "corpus": {"synthetic_bytes": 40000},
      "model": {"num_layers": 2, "d_h": 16, "d_ff": 32, "s": 8, "max_len": 128},
      "train": {"steps": 6, "batch_size": 4, "length": {"lengths": [32]}, "eval_seqs": 8}
    })";
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(std::vector<std::string> args) {
    out_.str("");
    err_.str("");
    return run_cli(args, out_, err_);
  }
  std::string path(const std::string& p) const { return (dir_ / p).string(); }
  std::vector<std::string> lines(const std::string& p) const {
    std::ifstream f(dir_ / p);
    std::vector<std::string> v;
    for (std::string l; std::getline(f, l);) v.push_back(l);
    return v;
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

TEST_F(CliTest, UsageErrorsExitOne) {
  EXPECT_EQ(run({}), kExitUsage);
  EXPECT_EQ(run({"frobnicate"}), kExitUsage);
  EXPECT_EQ(run({"train", "--bogus"}), kExitUsage);
  EXPECT_EQ(run({"train", "--override", "model.depth=3", "--out", path("x")}), kExitUsage);
  EXPECT_NE(err_.str().find("model.depth"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir_ / "x"));  // validated before any output
  EXPECT_EQ(run({"train", "--config", path("tiny.json"), "--override", "kernel.variant=nope",
                 "--out", path("x")}),
            kExitUsage);
  EXPECT_NE(err_.str().find("kernel.variant"), std::string::npos);
  EXPECT_EQ(run({"--help"}), kExitOk);
}

TEST_F(CliTest, RuntimeErrorsExitTwo) {
  EXPECT_EQ(run({"train", "--config", path("tiny.json"), "--override",
                 "corpus.path=" + path("missing.txt"), "--out", path("x")}),
            kExitRuntime);
  EXPECT_NE(err_.str().find("missing.txt"), std::string::npos);
  EXPECT_EQ(run({"eval-lengths", "--run", path("nowhere"), "--out", path("y")}), kExitRuntime);
}

TEST_F(CliTest, TrainZeroStepsWritesCheckpointAndConfig) {
  ASSERT_EQ(run({"train", "--config", path("tiny.json"), "--steps", "0", "--out", path("r0")}),
            kExitOk)
      << err_.str();
  EXPECT_TRUE(fs::exists(dir_ / "r0/checkpoint.bin"));
  EXPECT_TRUE(fs::exists(dir_ / "r0/resolved_config.json"));
  EXPECT_EQ(lines("r0/metrics.csv").size(), 1u);
}

TEST_F(CliTest, TrainIsDeterministicAndEvalMatches) {
  ASSERT_EQ(run({"train", "--config", path("tiny.json"), "--out", path("a")}), kExitOk) << err_.str();
  ASSERT_EQ(run({"train", "--config", path("a/resolved_config.json"), "--out", path("b")}), kExitOk);
  EXPECT_EQ(lines("a/metrics.csv"), lines("b/metrics.csv"));
  EXPECT_EQ(lines("a/metrics.csv").size(), 7u);

  ASSERT_EQ(run({"eval-lengths", "--run", path("a"), "--lengths", "16,32,64", "--out", path("e")}),
            kExitOk)
      << err_.str();
  const auto rows = lines("e/eval_lengths.csv");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "run,kernel,train_len,eval_len,masked_acc,loss,masked_tokens,rel_change");
  // Final eval of the run (last row of eval.csv): step,eval_len,masked_acc,loss,...
  const auto evals = lines("a/eval.csv");
  auto field = [](const std::string& line, size_t i) {
    std::stringstream ss(line);
    std::string f;
    for (size_t k = 0; k <= i; ++k) std::getline(ss, f, ',');
    return std::stod(f);
  };
  EXPECT_NEAR(field(rows[2], 4), field(evals.back(), 2), 1e-6);
  EXPECT_NEAR(field(rows[2], 5), field(evals.back(), 3), 1e-6);
  EXPECT_EQ(field(rows[2], 7), 0.0);

  ASSERT_EQ(run({"eval-lengths", "--run", path("a"), "--lengths", "", "--out", path("e0")}), kExitOk);
  EXPECT_EQ(lines("e0/eval_lengths.csv").size(), 1u);
  EXPECT_EQ(run({"eval-lengths", "--run", path("a"), "--lengths", "256", "--out", path("e1")}),
            kExitRuntime);
}

TEST_F(CliTest, CountParamsPresets) {
  ASSERT_EQ(run({"count-params", "--override", "model.d_h=768", "--override", "model.d_ff=1536",
                 "--override", "model.s=128", "--out", path("c")}),
            kExitOk);
  const auto rows = lines("c/params.csv");
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[1], "gau,768,1536,128,4,3538944,3637760,98816");
  EXPECT_TRUE(rows[4].starts_with("gau_x2,")) << rows[4];
  ASSERT_EQ(run({"count-params", "--override", "model.d_h=4", "--override", "model.d_ff=8",
                 "--override", "model.s=2", "--override", "bench.heads=2", "--out", path("c4")}),
            kExitOk);
  EXPECT_EQ(lines("c4/params.csv")[1], "gau,4,8,2,2,96,112,16");
}

TEST_F(CliTest, AnalyzeRandomInit) {
  ASSERT_EQ(run({"analyze", "--random-init", "--kernels", "softmax", "--n", "1", "--seeds", "0",
                 "--out", path("a1")}),
            kExitOk);
  auto rows = lines("a1/attn_report.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_TRUE(rows[2].starts_with("softmax,1,128,0,")) << rows[2];
  ASSERT_EQ(run({"analyze", "--random-init", "--lengths", "16,32", "--override", "analysis.s=8",
                 "--out", path("a2")}),
            kExitOk);
  EXPECT_EQ(lines("a2/attn_report.csv").size(), 2u + 30u);
  EXPECT_EQ(run({"analyze", "--out", path("a3")}), kExitUsage);
  EXPECT_EQ(run({"analyze", "--random-init", "--kernels", "tanh", "--out", path("a4")}), kExitUsage);
}

TEST_F(CliTest, AnalyzeTrainedRun) {
  ASSERT_EQ(run({"train", "--config", path("tiny.json"), "--steps", "2", "--out", path("t")}), kExitOk);
  ASSERT_EQ(run({"analyze", "--run", path("t"), "--kernels", "qk,softmax", "--n", "32", "--seeds",
                 "0,1", "--layer", "1", "--out", path("an")}),
            kExitOk)
      << err_.str();
  const auto rows = lines("an/attn_report.csv");
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_NE(rows[0].find("trained-toy"), std::string::npos);
  EXPECT_TRUE(rows[2].starts_with("qk,32,8,")) << rows[2];
  EXPECT_EQ(run({"analyze", "--run", path("t"), "--layer", "2", "--out", path("an2")}), kExitUsage);
}

TEST_F(CliTest, BenchSingleRow) {
  ASSERT_EQ(run({"bench", "--lengths", "32", "--repeats", "1", "--override", "bench.d_h=16",
                 "--override", "bench.s=8", "--override", "bench.warmup=0", "--out", path("b")}),
            kExitOk)
      << err_.str();
  const auto rows = lines("b/bench.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_TRUE(rows[1].starts_with("32,gau_x2,3072,3392,")) << rows[1];
  EXPECT_TRUE(rows[2].starts_with("32,mhsa_ffn,3072,")) << rows[2];
  EXPECT_TRUE(fs::exists(dir_ / "b/resolved_config.json"));
}

}  // namespace
}  // namespace gau::cli
