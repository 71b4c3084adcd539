#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "petl/experiment.hpp"

namespace fs = std::filesystem;
namespace ex = petl::experiment;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("petl_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Run cli(const std::string& args, const fs::path& dir, const std::string& env = "") {
  const fs::path log = dir / "cli.log";
  const std::string cmd =
      env + " \"" + std::string(PETL_CLI_PATH) + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(log);
  return r;
}

// d=8, one layer, 16x16 inputs, 3 classes.
const std::string kTiny =
    " --d 8 --layers 1 --heads 2 --ff-ratio 2 --patch-h 8 --patch-w 8 --freq-bins 16 --time-bins 16"
    " --n-classes 3 --samples-per-class 10 --epochs 2 --batch-size 8 --pretrain-epochs 1";

std::size_t json_size(const std::string& text, const char* key) {
  return ex::json::parse(text)[key].get<std::size_t>();
}

}  // namespace

TEST(Cli, CountReferenceBudgets) {
  const auto dir = scratch("count");
  auto r = cli("count --method lora --r 6 --full-scale --json", dir);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(json_size(r.out, "trainable_params"), 221184u);
  r = cli("count --method bitfit --full-scale --json", dir);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(json_size(r.out, "trainable_params"), 101376u);
  r = cli("count --method lora --r 6 --full-scale", dir);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("221,184"), std::string::npos) << r.out;
}

TEST(Cli, CountHoulsbyDoublesPfeiffer) {
  const auto dir = scratch("houlsby");
  const auto a = cli("count --method conformer --r 8 --k 8 --full-scale --json", dir);
  const auto b = cli("count --method conformer --r 8 --k 8 --houlsby --full-scale --json", dir);
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(json_size(a.out, "trainable_params"), 250080u);
  EXPECT_EQ(json_size(b.out, "trainable_params"), 2 * json_size(a.out, "trainable_params"));
}

TEST(Cli, ConfigErrorsExitOne) {
  const auto dir = scratch("errors");
  EXPECT_EQ(cli("count --method nonsense", dir).code, 1);
  EXPECT_EQ(cli("count --no-such-flag 3", dir).code, 1);
  EXPECT_EQ(cli("train --full-scale --output-dir \"" + (dir / "fs").string() + "\"", dir).code, 1);
  EXPECT_FALSE(fs::exists(dir / "fs" / "metrics.csv"));
  std::ofstream(dir / "bad.json") << R"({"method": "lora", "bogus_key": 1})";
  EXPECT_EQ(cli("count -c \"" + (dir / "bad.json").string() + "\"", dir).code, 1);
  EXPECT_EQ(cli("count --method lora --r 0", dir).code, 1);
}

TEST(Cli, TrainWritesDeterministicMetrics) {
  const auto dir = scratch("train");
  const std::string args = "train --method lora --r 2" + kTiny + " --output-dir \"";
  auto a = cli(args + (dir / "a").string() + "\"", dir);
  ASSERT_EQ(a.code, 0) << a.out;
  auto b = cli(args + (dir / "b").string() + "\"", dir);
  ASSERT_EQ(b.code, 0) << b.out;
  const auto rows = ex::read_csv(dir / "a" / "metrics.csv", ex::kMetricsCsv);
  ASSERT_EQ(rows.size(), 2u * 2u + 1u);
  EXPECT_EQ(rows.back()[1], "test");
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));
  for (const char* f : {"config.json", "report.json", "petl.ckpt"}) EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
}

TEST(Cli, LinearProbeTrainsOnlyTheHead) {
  const auto dir = scratch("linear");
  auto r = cli("train --method linear" + kTiny + " --output-dir \"" + (dir / "run").string() + "\"", dir);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto report = ex::json::parse(slurp(dir / "run" / "report.json"));
  EXPECT_EQ(report["trainable_params"].get<std::size_t>(), 0u);
  EXPECT_EQ(report["head_params"].get<std::size_t>(), 8u * 3u + 3u);
}

TEST(Cli, GradcheckPassesAndDetectsCorruption) {
  const auto dir = scratch("gradcheck");
  const std::string base = "gradcheck --method lora --r 2 --probes 20" + kTiny;
  auto ok = cli(base, dir);
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("PASS"), std::string::npos);
  auto bad = cli(base + " --corrupt 0.01", dir);
  EXPECT_EQ(bad.code, 2) << bad.out;
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
}

TEST(Cli, SweepKernelCsv) {
  const auto dir = scratch("kernel");
  auto r = cli("sweep-kernel --r 2 --k-list 1,3 --seeds 0 --sweep-shots 2" + kTiny + " --output-dir \"" +
                   (dir / "run").string() + "\"",
               dir);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rows = ex::read_csv(dir / "run" / "sweep_kernel.csv", ex::kKernelCsv);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(std::stoul(rows[2][4]) - std::stoul(rows[0][4]), 1u * 2u * 2u);
}

TEST(Cli, SweepBudgetRespectsTargets) {
  const auto dir = scratch("budget");
  auto r = cli("sweep-budget --targets 300,800 --seeds 0 --budget-methods lora,bottleneck" + kTiny +
                   " --output-dir \"" + (dir / "run").string() + "\"",
               dir);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rows = ex::read_csv(dir / "run" / "sweep_budget.csv", ex::kBudgetCsv);
  ASSERT_FALSE(rows.empty());
  for (const auto& row : rows) EXPECT_LE(std::stoul(row[3]), std::stoul(row[0]));
}

TEST(Cli, FewshotCsvAndOutputRootEnv) {
  const auto dir = scratch("fewshot");
  auto r = cli("fewshot --method bitfit --shots 1,2 --seeds 0,1" + kTiny, dir,
               "PETL_OUTPUT_ROOT=\"" + (dir / "root").string() + "\"");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto run = dir / "root" / "fewshot";
  EXPECT_EQ(ex::read_csv(run / "fewshot.csv", ex::kFewshotCsv).size(), 4u);
  const auto summary = ex::read_csv(run / "fewshot_summary.csv", ex::kFewshotSummaryCsv);
  ASSERT_EQ(summary.size(), 2u);
  EXPECT_EQ(summary[0][1], "2");
}
