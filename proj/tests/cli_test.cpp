// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "miggrpo/eval.hpp"
#include "miggrpo/jsonl.hpp"
#include "miggrpo/taskgen.hpp"

namespace fs = std::filesystem;

namespace miggrpo {
namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("miggrpo_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "small.json") << R"({
      "data": {"count": 50},
      "sft": {"learning_rate": 0.05, "epochs": 20},
      "grpo": {"learning_rate": 0.5, "max_iterations": 6, "checkpoint_every": 3}
    })";
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Runs the CLI with `args`; returns its exit code.
  int run(const std::string& args) const {
    const std::string cmd = std::string(MIGGRPO_CLI) + " " + args + " > " + (dir_ / "stdout.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string cfg() const { return "-c " + (dir_ / "small.json").string(); }
  std::string path(const std::string& p) const { return (dir_ / p).string(); }
  std::string output() const { return slurp(dir_ / "stdout.txt"); }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
  static std::size_t line_count(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) n += line.empty() ? 0 : 1;
    return n;
  }

  // gen + cot + sft on the small config.
  void stage1() {
    ASSERT_EQ(run("gen " + cfg() + " -o " + path("data")), 0) << output();
    ASSERT_EQ(run("curate --stage cot " + cfg() + " --tasks " + path("data/train.jsonl") + " -o " + path("cot")), 0) << output();
    ASSERT_EQ(run("train --stage sft " + cfg() + " --tasks " + path("data/train.jsonl") + " --cot " + path("cot/cot_kept.jsonl") +
                  " -o " + path("sft")),
              0)
        << output();
  }

  fs::path dir_;
};

TEST_F(Cli, GenIsDeterministicAndSplits) {
  ASSERT_EQ(run("gen -o " + path("a")), 0) << output();
  ASSERT_EQ(run("gen -o " + path("b")), 0) << output();
  EXPECT_EQ(slurp(dir_ / "a/train.jsonl"), slurp(dir_ / "b/train.jsonl"));
  EXPECT_EQ(slurp(dir_ / "a/heldout.jsonl"), slurp(dir_ / "b/heldout.jsonl"));
  EXPECT_EQ(line_count(dir_ / "a/train.jsonl"), 400U);
  EXPECT_EQ(line_count(dir_ / "a/heldout.jsonl"), 100U);

  for (const auto& j : read_jsonl(dir_ / "a/train.jsonl")) {
    EXPECT_TRUE(validate_task_json(j).empty()) << j.dump();
    ASSERT_TRUE(j.contains("provenance"));
    EXPECT_EQ(j["provenance"]["seed"], 2025);
    EXPECT_EQ(j["provenance"]["config_hash"].get<std::string>().size(), 16U);
  }
  ASSERT_EQ(run("gen --set seed=9 -o " + path("c")), 0);
  EXPECT_NE(slurp(dir_ / "a/train.jsonl"), slurp(dir_ / "c/train.jsonl"));
}

TEST_F(Cli, CotOnCleanTeacherKeepsEverything) {
  ASSERT_EQ(run("gen " + cfg() + " -o " + path("data")), 0) << output();
  ASSERT_EQ(run("curate --stage cot " + cfg() + " --set teacher.p_box=0 --tasks " + path("data/train.jsonl") + " -o " +
                path("cot")),
            0)
      << output();
  const auto stats = read_json(dir_ / "cot/cot_stats.json");
  EXPECT_EQ(stats["total"], 40);
  EXPECT_EQ(stats["kept"], 40);
  EXPECT_EQ(line_count(dir_ / "cot/cot_kept.jsonl"), 40U);
  EXPECT_EQ(line_count(dir_ / "cot/teacher.jsonl"), 40U);
}

TEST_F(Cli, RejectionSamplingUntrainedModelKeepsNothing) {
  ASSERT_EQ(run("gen " + cfg() + " -o " + path("data")), 0) << output();
  ASSERT_EQ(run("run " + cfg() + " --set grpo.max_iterations=0 --no-cold-start --no-rs -o " + path("base")), 0) << output();
  ASSERT_EQ(run("curate --stage rs " + cfg() + " --tasks " + path("data/train.jsonl") + " --model " + path("base/base.ckpt") +
                " -o " + path("rs")),
            0)
      << output();
  const auto stats = read_json(dir_ / "rs/rs_stats.json");
  EXPECT_EQ(stats["total"], 40);
  EXPECT_EQ(stats["kept"], 0);
  EXPECT_EQ(stats["kept"].get<int>() + stats["dropped"].get<int>(), stats["total"].get<int>());
  EXPECT_EQ(line_count(dir_ / "rs/rs_log.jsonl"), 40U * 8U);
  EXPECT_EQ(line_count(dir_ / "rs/rs_tasks.jsonl"), 0U);
}

TEST_F(Cli, EndToEndWithResume) {
  stage1();
  EXPECT_EQ(line_count(dir_ / "sft/sft_loss.jsonl"), 20U);
  ASSERT_EQ(run("curate --stage rs " + cfg() + " --tasks " + path("data/train.jsonl") + " --model " + path("sft/sft_merged.ckpt") +
                " -o " + path("rs")),
            0)
      << output();
  const auto stats = read_json(dir_ / "rs/rs_stats.json");
  EXPECT_EQ(stats["kept"].get<int>() + stats["dropped"].get<int>(), 40);
  int hist = 0;
  for (int h : stats["correct_histogram"]) hist += h;
  EXPECT_EQ(hist, 40);

  const std::string rl = "train --stage rl " + cfg() + " --tasks " + path("data/train.jsonl") + " --model " +
                         path("sft/sft_merged.ckpt") + " -o ";
  ASSERT_EQ(run(rl + path("rl")), 0) << output();
  EXPECT_EQ(line_count(dir_ / "rl/rl_log.jsonl"), 6U);
  EXPECT_TRUE(fs::exists(dir_ / "rl/rl_step_000003.ckpt"));
  EXPECT_TRUE(fs::exists(dir_ / "rl/rl_step_000006.ckpt"));
  for (const auto& j : read_jsonl(dir_ / "rl/rl_log.jsonl")) {
    for (const char* k : {"iteration", "mean_reward", "format_rate", "acc_at_05_on_batch", "kl", "loss"}) {
      EXPECT_TRUE(j.contains(k)) << k;
    }
  }

  // Resume from iteration 3 into a copy of the partial run.
  fs::create_directories(dir_ / "resumed");
  fs::copy_file(dir_ / "rl/rl_log.jsonl", dir_ / "resumed/rl_log.jsonl");
  fs::copy_file(dir_ / "rl/rl_rollouts.jsonl", dir_ / "resumed/rl_rollouts.jsonl");
  ASSERT_EQ(run(rl + path("resumed") + " --resume " + path("rl/rl_step_000003.ckpt")), 0) << output();
  EXPECT_EQ(slurp(dir_ / "rl/rl_final.ckpt"), slurp(dir_ / "resumed/rl_final.ckpt"));
  EXPECT_EQ(slurp(dir_ / "rl/rl_log.jsonl"), slurp(dir_ / "resumed/rl_log.jsonl"));
  EXPECT_EQ(slurp(dir_ / "rl/rl_rollouts.jsonl"), slurp(dir_ / "resumed/rl_rollouts.jsonl"));

  // Resuming under a different config is refused.
  EXPECT_EQ(run(rl + path("other") + " --set grpo.beta_kl=0.5 --resume " + path("rl/rl_step_000003.ckpt")), 2);

  // Two evaluations and a comparison.
  ASSERT_EQ(run("eval " + cfg() + " --model " + path("sft/sft_merged.ckpt") + " --tasks " + path("data/heldout.jsonl") + " -o " +
                path("eval") + " --name stage1"),
            0)
      << output();
  ASSERT_EQ(run("eval " + cfg() + " --model " + path("rl/rl_final.ckpt") + " --tasks " + path("data/heldout.jsonl") + " -o " +
                path("eval") + " --name stage2"),
            0)
      << output();
  for (const char* name : {"stage1", "stage2"}) {
    const auto rep = read_json(dir_ / "eval" / (std::string(name) + "_report.json"));
    EXPECT_TRUE(validate_report_json(rep).empty()) << rep.dump();
    EXPECT_EQ(rep["task_count"], 10);
    std::ifstream csv(dir_ / "eval" / (std::string(name) + "_per_task.csv"));
    std::string first;
    std::getline(csv, first);
    EXPECT_EQ(first.rfind("# config_hash=", 0), 0U) << first;
  }
  ASSERT_EQ(run("report " + path("eval/stage1_report.json") + " " + path("eval/stage2_report.json") + " -o " +
                path("eval/compare.json")),
            0)
      << output();
  EXPECT_TRUE(fs::exists(dir_ / "eval/compare.json"));
}

TEST_F(Cli, ColdRlNeedsExplicitFlag) {
  ASSERT_EQ(run("gen " + cfg() + " -o " + path("data")), 0) << output();
  const std::string rl = "train --stage rl " + cfg() + " --set grpo.max_iterations=2 --tasks " + path("data/train.jsonl") + " -o ";
  EXPECT_EQ(run(rl + path("cold")), 2);
  EXPECT_NE(output().find("--allow-cold-rl"), std::string::npos) << output();
  ASSERT_EQ(run(rl + path("cold") + " --allow-cold-rl"), 0) << output();
  EXPECT_EQ(line_count(dir_ / "cold/rl_log.jsonl"), 2U);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("curate --stage nope --tasks x"), 1);
  EXPECT_EQ(run("gen --set no.such_key=1 -o " + path("x")), 2);
  EXPECT_EQ(run("gen --set data.heldout_fraction=0 -o " + path("x")), 2);

  ASSERT_EQ(run("gen " + cfg() + " -o " + path("data")), 0) << output();
  // Missing model for rejection sampling.
  EXPECT_EQ(run("curate --stage rs " + cfg() + " --tasks " + path("data/train.jsonl") + " --model " + path("none.ckpt") +
                " -o " + path("rs")),
            2);
  // Corrupt task file.
  std::ofstream(dir_ / "bad.jsonl") << "{\"task_id\": 3}\n";
  EXPECT_EQ(run("curate --stage cot " + cfg() + " --tasks " + path("bad.jsonl") + " -o " + path("cot")), 2);
  // Corrupt checkpoint.
  std::ofstream(dir_ / "bad.ckpt") << "MIGPOLCKgarbage";
  EXPECT_EQ(run("eval " + cfg() + " --model " + path("bad.ckpt") + " --tasks " + path("data/heldout.jsonl") + " -o " +
                path("eval")),
            2);
  // A diverging learning rate is a numeric failure.
  ASSERT_EQ(run("curate --stage cot " + cfg() + " --tasks " + path("data/train.jsonl") + " -o " + path("cot")), 0) << output();
  EXPECT_EQ(run("train --stage sft " + cfg() + " --set sft.learning_rate=1e308 --tasks " + path("data/train.jsonl") + " --cot " +
                path("cot/cot_kept.jsonl") + " -o " + path("boom")),
            3)
      << output();
}

TEST_F(Cli, RunSubcommandWritesReports) {
  ASSERT_EQ(run("run " + cfg() + " --no-rs -o " + path("all")), 0) << output();
  for (const char* name : {"base", "stage1", "stage2"}) {
    const fs::path rep = dir_ / "all" / (std::string(name) + "_report.json");
    ASSERT_TRUE(fs::exists(rep)) << rep;
    EXPECT_TRUE(validate_report_json(read_json(rep)).empty());
  }
  EXPECT_EQ(line_count(dir_ / "all/rl_log.jsonl"), 6U);
}

}  // namespace
}  // namespace miggrpo
